"""Voting and stacking ensembles for extractive QA n-best lists.

Usage: ``stackqa <command> [flags]``.
Exit status is 0 on success, 1 on invalid input or usage, 2 on I/O failure.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict
from functools import partial

import numpy as np

from stackqa import autograd as ag
from stackqa.metrics import _aggregate, _missing, evaluate, oracle_eval, score_question, topn_eval
from stackqa.model import MetaModel, MetaModelConfig, init_model, predict, train
from stackqa.prediction_io import (
    PredictionFormatError,
    ValidationError,
    load_ground_truth,
    load_nbest,
    load_predictions,
    write_predictions,
)
from stackqa.stacking import (
    StackConfig,
    StackFormatError,
    Tokenizer,
    build_examples,
    build_vocab,
    corpus,
    padding_stats,
    read_stack_dataset,
    write_stack_dataset,
)
from stackqa.synth import SynthConfig, SynthModel, generate_files
from stackqa.voting import combine_question, parse_method

REPORT_SCHEMA = "stackqa-report-v1"
SEED_ENV = "STACKQA_SEED"

logger = logging.getLogger("stackqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _table(headers, rows):
    cells = [headers] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(str(v).rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v):
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def _report_row(rep):
    return [rep.em, rep.f1, rep.na_accuracy, rep.count]


_REPORT_HEADERS = ["EM", "F1", "NoAns", "count"]


def _emit(args, payload):
    if getattr(args, "json", None):
        payload = {"schema": REPORT_SCHEMA, "command": args.command, **payload}
        with open(args.json, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) < 2:
        return [fn(*it) for it in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(jobs) as ex:
        return list(ex.map(_star, [(fn, it) for it in items], chunksize=chunk))


def _star(job):
    fn, args = job
    return fn(*args)


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        raise UsageError(f"{args.command} needs --seed (or {SEED_ENV} in the environment)")
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def _evaluate_parallel(answers, dataset, jobs):
    _missing(dataset, answers)
    qids = dataset.qids()
    scores = _pool_map(score_question, [(answers[q], dataset[q]) for q in qids], jobs)
    return _aggregate(dict(zip(qids, scores)), dataset)


def cmd_eval(args):
    answers = load_predictions(args.pred)
    dataset = load_ground_truth(args.gold)
    rep = _evaluate_parallel(answers, dataset, args.jobs)
    print(_table(_REPORT_HEADERS, [_report_row(rep)]))
    _emit(args, {"report": rep.as_dict()})


def _parse_ns(text):
    try:
        ns = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise ValidationError(f"--ns expects comma-separated integers, got {text!r}") from None
    if not ns or ns[0] < 1:
        raise ValidationError("--ns values must be >= 1")
    return ns


def cmd_topn(args):
    dataset = load_ground_truth(args.gold)
    ns = _parse_ns(args.ns)
    payload = {}
    for path in args.pred:
        preds = load_nbest(path)
        rep = topn_eval(preds, dataset, ns)
        print(f"{preds.model_id}")
        print(_table(["N", "EM", "F1", "NoAns"], [[r["n"], r["em"], r["f1"], r["na_accuracy"]]
                                                  for r in rep.rows()]))
        payload[preds.model_id] = rep.rows()
    _emit(args, {"models": payload})


def cmd_oracle(args):
    dataset = load_ground_truth(args.gold)
    preds = [load_nbest(p) for p in args.pred]
    rows, payload = [], {}
    for p in preds:
        rep = oracle_eval([p], args.n, dataset)
        rows.append([p.model_id] + _report_row(rep))
        payload[p.model_id] = rep.as_dict()
    pooled = oracle_eval(preds, args.n, dataset)
    rows.append(["pooled"] + _report_row(pooled))
    payload["pooled"] = pooled.as_dict()
    print(f"oracle at n={args.n}")
    print(_table(["model"] + _REPORT_HEADERS, rows))
    _emit(args, {"n": args.n, "reports": payload})


def cmd_vote(args):
    method = parse_method(args.method, args.n)
    preds = [load_nbest(p) for p in args.pred]
    dataset = load_ground_truth(args.gold) if args.gold else None
    qids = dataset.qids() if dataset is not None else sorted(set().union(*(p.per_question for p in preds)))
    for qid in qids:
        for p in preds:
            if qid not in p:
                raise ValidationError(f"model {p.model_id!r} has no predictions for {qid!r}")
    winners = _pool_map(partial(_vote_one, method), [([p[q] for p in preds],) for q in qids], args.jobs)
    answers = dict(zip(qids, winners))
    write_predictions(args.out, answers)
    payload = {"method": args.method, "n": method.depth, "output": str(args.out)}
    print(f"method {method}: wrote {len(answers)} answers to {args.out}")
    if dataset is not None:
        rep = evaluate(answers, dataset)
        print(_table(_REPORT_HEADERS, [_report_row(rep)]))
        payload["report"] = rep.as_dict()
    _emit(args, payload)


def _vote_one(method, lists):
    return combine_question(method, lists)


def cmd_dataset_build(args):
    preds = [load_nbest(p) for p in args.pred]
    dataset = load_ground_truth(args.gold) if args.gold else None
    config = StackConfig(
        models=[p.model_id for p in preds],
        n_per_model=args.n_per_model,
        tokens_per_hypothesis=args.tokens_per_hypothesis,
        max_answer_length=args.max_answer_length,
    )
    qids = dataset.qids() if dataset is not None else sorted(preds[0].per_question)
    if args.tokenizer:
        tok = Tokenizer.load(args.tokenizer)
        if tok.num_hypotheses != config.num_hypotheses:
            raise ValidationError(
                f"tokenizer has {tok.num_hypotheses} slots, inputs give {config.num_hypotheses}"
            )
    else:
        tok = build_vocab(corpus(preds, config, qids), config)
        tok.save(args.tokenizer_out)
    examples = build_examples(preds, dataset, tok, config, biased=args.biased, qids=qids)
    write_stack_dataset(args.out, examples)
    pad = padding_stats(examples)
    print(f"wrote {len(examples)} examples to {args.out} "
          f"(H={config.num_hypotheses}, T={config.tokens_per_hypothesis}, vocab={len(tok)})")
    print(f"padded examples: {100 * pad:.3f}%")
    _emit(args, {"examples": len(examples), "padded_fraction": pad, "vocab_size": len(tok),
                 "num_hypotheses": config.num_hypotheses,
                 "tokens_per_hypothesis": config.tokens_per_hypothesis})


_TRAIN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "dropout": "dropout_p",
    "embed_dropout": "embed_dropout_p", "noise_sigma": "noise_sigma", "patience": "patience",
    "lr_factor": "lr_factor", "embed_dim": "embed_dim", "conv_channels": "conv_channels",
    "fc_sizes": "fc_sizes", "kl_direction": "kl_direction",
}


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _train_config(args, num_hypotheses, tokens_per_hypothesis):
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            values.update(json.load(f))
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    if args.biased:
        values["biased_targets"] = True
    values["seed"] = _seed(args)
    values["num_hypotheses"] = num_hypotheses
    values["tokens_per_hypothesis"] = tokens_per_hypothesis
    values.setdefault("fc_sizes", [64, num_hypotheses])
    try:
        return MetaModelConfig.from_dict(values)
    except TypeError as e:
        raise ValidationError(str(e)) from None


def cmd_train(args):
    tok = Tokenizer.load(args.tokenizer)
    train_ex = read_stack_dataset(args.train)
    dev_ex = read_stack_dataset(args.dev)
    if not train_ex:
        raise ValidationError(f"{args.train} holds no examples")
    h = tok.num_hypotheses
    t = len(train_ex[0].x) // h
    config = _train_config(args, h, t)
    dev_truth = load_ground_truth(args.gold)
    model = init_model(config, tok)
    best, history = train(model, train_ex, dev_ex, dev_truth)
    best.save(args.out)
    history.write_csv(args.history)
    for r in history.epochs:
        print(f"epoch {r.epoch:3d}  loss {r.train_loss:.6f}  dev EM {r.dev_em:.3f}  "
              f"F1 {r.dev_f1:.3f}  lr {r.lr:g}")
    best_rec = history.epochs[history.best_epoch - 1] if history.best_epoch else None
    if best_rec:
        print(f"best epoch {best_rec.epoch}: dev EM {best_rec.dev_em:.3f} F1 {best_rec.dev_f1:.3f}")
    _emit(args, {"config": asdict(config), "best_epoch": history.best_epoch,
                 "history": [asdict(r) for r in history.epochs], "checkpoint": str(args.out)})


def cmd_predict(args):
    model = MetaModel.load(args.checkpoint)
    examples = read_stack_dataset(args.data)
    if args.jobs > 1 and len(examples) > 1:
        size = -(-len(examples) // args.jobs)
        chunks = [examples[i:i + size] for i in range(0, len(examples), size)]
        with ThreadPoolExecutor(args.jobs) as ex:
            answers = {}
            for part in ex.map(partial(predict, model), chunks):
                answers.update(part)
    else:
        answers = predict(model, examples)
    answers = dict(sorted(answers.items()))
    write_predictions(args.out, answers)
    print(f"wrote {len(answers)} answers to {args.out}")
    payload = {"output": str(args.out), "count": len(answers)}
    if args.gold:
        rep = evaluate(answers, load_ground_truth(args.gold).subset(list(answers)))
        print(_table(_REPORT_HEADERS, [_report_row(rep)]))
        payload["report"] = rep.as_dict()
    _emit(args, payload)


def _model_spec(text):
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise argparse.ArgumentTypeError(f"expected id:top1_accuracy:topn_recall[:n], got {text!r}")
    try:
        n = int(parts[3]) if len(parts) == 4 else 8
        return SynthModel(parts[0], float(parts[1]), float(parts[2]), n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad model spec {text!r}") from None


def cmd_synth(args):
    models = args.model or [SynthModel("model_a", 0.8, 0.95, 8), SynthModel("model_b", 0.7, 0.95, 8)]
    config = SynthConfig(
        num_questions=args.num_questions,
        models=models,
        unanswerable_fraction=args.unanswerable_fraction,
        vocab_size=args.vocab_size,
        seed=_seed(args),
        correlation=args.correlation,
        short_list_fraction=args.short_list_fraction,
        qid_prefix=args.qid_prefix,
    )
    gold, preds = generate_files(config, args.out_dir)
    print(f"wrote {gold}")
    for p in preds:
        print(f"wrote {p}")
    _emit(args, {"gold": str(gold), "predictions": [str(p) for p in preds],
                 "num_questions": config.num_questions})


def grad_check_suite(seed, delta=1e-5, tol=1e-4):
    """Finite-difference checks for every layer and a tiny end-to-end meta-model."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return ag.Tensor(rng.normal(size=shape), requires_grad=True)

    def away_from_zero(*shape):
        v = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return ag.Tensor(v, requires_grad=True)

    checks = {}
    table, ids = t(7, 3), rng.integers(0, 7, size=(2, 5))
    w_out = rng.normal(size=(2, 5, 3))
    checks["embedding"] = ([table], lambda: (ag.embedding(table, ids) * w_out).sum())
    x, w, b = t(2, 3, 6), t(4, 3, 3), t(4)
    g_conv = rng.normal(size=(2, 4, 6))
    checks["conv1d"] = ([x, w, b], lambda: (ag.conv1d(x, w, b, padding=1) * g_conv).sum())
    tw, tb = t(4, 3, 3), t(4)
    g_ec = rng.normal(size=(2, 4, 5))
    checks["embed_conv1d"] = ([table, tw, tb],
                              lambda: (ag.embed_conv1d(table, ids, tw, tb, padding=1) * g_ec).sum())
    xp = t(2, 3, 7)
    g_p2, g_pg, g_p3 = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 1)), rng.normal(size=(2, 3, 2))
    checks["maxpool1d(2)"] = ([xp], lambda: (ag.maxpool1d(xp, 2) * g_p2).sum())
    checks["maxpool1d(3)"] = ([xp], lambda: (ag.maxpool1d(xp, 3) * g_p3).sum())
    checks["maxpool1d(global)"] = ([xp], lambda: (ag.maxpool1d(xp, ag.GLOBAL) * g_pg).sum())
    xl, wl, bl = t(3, 4), t(5, 4), t(5)
    g_l = rng.normal(size=(3, 5))
    checks["linear"] = ([xl, wl, bl], lambda: (ag.linear(xl, wl, bl) * g_l).sum())
    xr = away_from_zero(3, 4)
    g_r = rng.normal(size=(3, 4))
    checks["relu"] = ([xr], lambda: (ag.relu(xr) * g_r).sum())
    xs = t(3, 5)
    g_s = rng.normal(size=(3, 5))
    checks["log_softmax"] = ([xs], lambda: (ag.log_softmax(xs) * g_s).sum())
    target = rng.dirichlet(np.ones(5), size=3)
    checks["kl_div_loss"] = ([xs], lambda: ag.kl_div_loss(ag.log_softmax(xs), target))
    checks["kl_div_loss(literal)"] = (
        [xs], lambda: ag.kl_div_loss(ag.log_softmax(xs), target, ag.LITERAL))

    tiny = MetaModelConfig(num_hypotheses=4, tokens_per_hypothesis=4, embed_dim=4,
                           conv_channels=[3, 2], fc_sizes=[5, 4], dropout_p=0.0, seed=seed)
    tok = Tokenizer(4, {f"w{i}": 8 + i for i in range(12)})
    model = init_model(tiny, tok)
    xm = rng.integers(0, len(tok), size=(3, tiny.input_length))
    ym = rng.dirichlet(np.ones(4), size=3)
    from stackqa.model import forward

    checks["meta_model"] = (model.parameters(),
                            lambda: ag.kl_div_loss(forward(model, xm), ym))
    return {name: ag.grad_check(f, params, delta=delta, tol=tol) for name, (params, f) in checks.items()}


def cmd_grad_check(args):
    reports = grad_check_suite(_seed(args), args.delta, args.tol)
    rows = [[name, rep.max_rel_error, rep.checked, "PASS" if rep.passed else "FAIL"]
            for name, rep in reports.items()]
    print(_table(["check", "max_rel_error", "coords", "status"],
                 [[r[0], f"{r[1]:.3e}", r[2], r[3]] for r in rows]))
    _emit(args, {"checks": {name: {"max_rel_error": rep.max_rel_error, "passed": rep.passed,
                                   "checked": rep.checked} for name, rep in reports.items()}})
    if not all(rep.passed for rep in reports.values()):
        raise ValidationError("gradient check failed")


def build_parser():
    p = _Parser(prog="stackqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, jobs=False):
        sp.add_argument("--json", metavar="PATH", help="also write a machine-readable report")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel workers for per-question work")

    sp = sub.add_parser("eval", help="score a {qid: answer} file")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gold", required=True)
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("topn", help="best-of-N scores of n-best files")
    sp.add_argument("--pred", required=True, action="append")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--ns", default="1,2,4,8,16,32")
    common(sp)
    sp.set_defaults(func=cmd_topn)

    sp = sub.add_parser("oracle", help="pooled best-of-n across models")
    sp.add_argument("--pred", required=True, action="append")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--n", type=int, default=8)
    common(sp)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("vote", help="combine n-best files with a voting rule")
    sp.add_argument("--method", required=True, help="1, 2, 3, 3p, 4, 5, 6, 7, 8 or 8p")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--pred", required=True, action="append")
    sp.add_argument("--gold")
    sp.add_argument("--out", required=True)
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_vote)

    sp = sub.add_parser("dataset-build", help="build level-1 stack examples (JSONL)")
    sp.add_argument("--pred", required=True, action="append")
    sp.add_argument("--gold", help="omit for unlabeled (test) splits")
    sp.add_argument("--out", required=True)
    tk = sp.add_mutually_exclusive_group(required=True)
    tk.add_argument("--tokenizer", help="reuse an existing tokenizer file")
    tk.add_argument("--tokenizer-out", help="build the vocabulary here from these inputs")
    sp.add_argument("--n-per-model", type=int, default=8)
    sp.add_argument("--tokens-per-hypothesis", type=int, default=16)
    sp.add_argument("--max-answer-length", type=int, default=30)
    sp.add_argument("--biased", action="store_true", help="score wrong answerability as -1")
    common(sp)
    sp.set_defaults(func=cmd_dataset_build)

    sp = sub.add_parser("train", help="train the meta-model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--gold", required=True, help="dev-split ground truth")
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--history", required=True, help="per-epoch CSV path")
    sp.add_argument("--config", help="JSON file of config values; flags override it")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--embed-dropout", type=float)
    sp.add_argument("--noise-sigma", type=float)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--lr-factor", type=float)
    sp.add_argument("--embed-dim", type=int)
    sp.add_argument("--conv-channels", type=_int_list)
    sp.add_argument("--fc-sizes", type=_int_list)
    sp.add_argument("--kl-direction", choices=[ag.CONVENTIONAL, ag.LITERAL])
    sp.add_argument("--biased", action="store_true", help="record that targets were biased")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="answer stack examples with a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gold")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("synth", help="generate synthetic gold and n-best files")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--num-questions", type=int, default=1000)
    sp.add_argument("--model", type=_model_spec, action="append",
                    help="id:top1_accuracy:topn_recall[:n] (repeatable)")
    sp.add_argument("--unanswerable-fraction", type=float, default=1 / 3)
    sp.add_argument("--vocab-size", type=int, default=500)
    sp.add_argument("--correlation", type=float, default=0.0)
    sp.add_argument("--short-list-fraction", type=float, default=0.0)
    sp.add_argument("--qid-prefix", default="q")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("grad-check", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    common(sp)
    sp.set_defaults(func=cmd_grad_check)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ValidationError, PredictionFormatError, StackFormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
