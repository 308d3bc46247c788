"""
Stacking: a learned combiner over pooled hypotheses
===================================================

The meta-model reads every hypothesis of both models as one token sequence
and outputs a distribution over the 16 slots. It is trained to match a
softmax of the slots' F1 scores, then the argmax slot is the answer.

A small geometry keeps this script under a minute on one core; the
default configuration (E=512, conv 1024/64) is what the CLI trains.
"""

from stackqa.metrics import evaluate, oracle_eval
from stackqa.model import MetaModelConfig, init_model, predict, train
from stackqa.stacking import StackConfig, build_examples, build_vocab, corpus, padding_stats
from stackqa.synth import SynthConfig, generate


def split(seed, prefix, q):
    return generate(SynthConfig(num_questions=q, seed=seed, qid_prefix=prefix,
                                short_list_fraction=0.1))


(tr_ds, tr_p), (dv_ds, dv_p), (te_ds, te_p) = split(1, "tr", 2000), split(2, "dv", 300), split(3, "te", 300)

stack = StackConfig(["model_a", "model_b"])
tok = build_vocab(corpus(tr_p, stack), stack)
train_rows = build_examples(tr_p, tr_ds, tok, stack)
dev_rows = build_examples(dv_p, dv_ds, tok, stack)
test_rows = build_examples(te_p, None, tok, stack, qids=te_ds.qids())  # targets unused at test time

row = train_rows[0]
print("x length", len(row.x), "first slot tokens", row.x[:16])
print("targets", [round(v, 3) for v in row.y])
print("padded share", padding_stats(train_rows))

###############################################################################
# Train a scaled-down meta-model

config = MetaModelConfig(embed_dim=32, conv_channels=[64, 32], fc_sizes=[64, 16], epochs=6, seed=0)
model, history = train(init_model(config, tok), train_rows, dev_rows, dv_ds)
for rec in history.epochs:
    print(f"epoch {rec.epoch}  loss {rec.train_loss:.4f}  dev EM {rec.dev_em:.1f}  lr {rec.lr:g}")

###############################################################################
# Compare against the level-0 models and the oracle

ensemble = evaluate(predict(model, test_rows), te_ds)
print("ensemble   EM", round(ensemble.em, 3))
for p in te_p:
    print(f"{p.model_id:10} EM", round(evaluate(p.top1(), te_ds).em, 3))
print("oracle     EM", round(oracle_eval(te_p, 8, te_ds).em, 3))
