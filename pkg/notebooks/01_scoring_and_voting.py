"""
Scoring n-best lists and voting over them
=========================================

Two simulated reading-comprehension models answer the same 2,000 questions.
We look at how much headroom their n-best lists hold and how far each
hand-made voting rule gets toward it.
"""

from stackqa.metrics import evaluate, f1_score, oracle_eval, topn_eval
from stackqa.synth import SynthConfig, SynthModel, generate
from stackqa.voting import ALL_METHODS, VotingMethod, vote_dataset

# one strong and one weaker model, both with 95% of gold answers in their top 8
config = SynthConfig(
    num_questions=2000,
    models=[SynthModel("model_a", 0.8, 0.95, 8), SynthModel("model_b", 0.7, 0.95, 8)],
    seed=0,
)
dataset, preds = generate(config)
qids = dataset.qids()

# partial credit: F1 counts overlapping tokens
print(f1_score("Pérez", ["Enrique Pérez de Guzmán"]))  # 0.4

###############################################################################
# Top-N headroom: best-of-N over each model's list

for p in preds:
    rows = topn_eval(p, dataset, [1, 2, 4, 8]).rows()
    print(p.model_id, [(r["n"], r["em"]) for r in rows])

pooled = oracle_eval(preds, 8, dataset)
print("pooled top-8 oracle EM", round(pooled.em, 3))

###############################################################################
# Every voting rule at n = 8

baseline = max(evaluate(p.top1(), dataset).em for p in preds)
print(f"best single model EM {baseline:.3f}")
for method_id in ALL_METHODS:
    method = VotingMethod(method_id, 8)
    rep = evaluate(vote_dataset(method, preds, qids), dataset)
    print(f"{str(method):>10}  EM {rep.em:7.3f}  F1 {rep.f1:7.3f}")

# synthetic probabilities are drawn independently of correctness, so the
# probability-weighted rules have nothing to exploit here; the Fibonacci rank
# weights still reward agreement between the two lists
