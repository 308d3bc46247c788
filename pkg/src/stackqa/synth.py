"""Synthetic SQuAD-2.0-style ground truth plus n-best files from simulated models.

Each question gets a gold answer (or none, for the unanswerable share) and a
small pool of candidate spans standing in for its context paragraph. Every
simulated model ranks candidates from that shared pool: the gold answer lands
at rank 1 with probability ``top1_accuracy``, somewhere in the top ``n`` with
probability ``topn_recall``, and is missing otherwise.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stackqa.metrics import normalize_answer
from stackqa.prediction_io import (
    Dataset,
    GroundTruth,
    Hypothesis,
    ModelPredictions,
    dataset_to_json,
    write_nbest,
)

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


@dataclass(frozen=True)
class SynthModel:
    model_id: str
    top1_accuracy: float
    topn_recall: float
    n: int = 8


@dataclass
class SynthConfig:
    num_questions: int = 1000
    models: list = field(default_factory=lambda: [
        SynthModel("model_a", 0.8, 0.95, 8),
        SynthModel("model_b", 0.7, 0.95, 8),
    ])
    unanswerable_fraction: float = 1 / 3
    vocab_size: int = 500
    answer_length_range: tuple = (1, 4)
    seed: int = 0
    correlation: float = 0.0
    short_list_fraction: float = 0.0
    qid_prefix: str = "q"

    def __post_init__(self):
        self.models = [m if isinstance(m, SynthModel) else SynthModel(*m) for m in self.models]
        if self.num_questions < 0 or not self.models:
            raise ValueError("need num_questions >= 0 and at least one model")
        for m in self.models:
            if not 0.0 <= m.top1_accuracy <= m.topn_recall <= 1.0:
                raise ValueError(f"{m.model_id}: need 0 <= top1_accuracy <= topn_recall <= 1")
            if m.n < 1:
                raise ValueError(f"{m.model_id}: n must be >= 1")
        if len({m.model_id for m in self.models}) != len(self.models):
            raise ValueError("model ids must be unique")
        for name in ("unanswerable_fraction", "correlation", "short_list_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        lo, hi = self.answer_length_range
        if not 1 <= lo <= hi:
            raise ValueError("answer_length_range must satisfy 1 <= lo <= hi")
        if self.vocab_size < 2 * hi + 2:
            raise ValueError("vocab_size too small for the answer length range")
        if self.short_list_fraction > 0 and max(m.n for m in self.models) < 2:
            raise ValueError("short lists need n >= 2")


def make_vocabulary(size, rng):
    words = set()
    while len(words) < size:
        syllables = rng.integers(2, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syllables))
        words.add(w)
    return sorted(words)


def _span(vocab, length, rng):
    return " ".join(vocab[i] for i in rng.integers(len(vocab), size=length))


def _candidate_pool(gold, size, vocab, cfg, rng):
    """Distinct (after normalization) wrong candidates for one question."""
    lo, hi = cfg.answer_length_range
    seen = {normalize_answer(gold)}
    pool = []
    if gold:
        pool.append("")  # models always consider abstaining
        seen.add("")
        words = gold.split()
        # near misses that earn partial F1 credit
        variants = [" ".join(words + [vocab[rng.integers(len(vocab))]])]
        if len(words) > 1:
            variants.append(" ".join(words[1:]))
            variants.append(" ".join(words[:-1]))
        for v in variants:
            if normalize_answer(v) not in seen:
                seen.add(normalize_answer(v))
                pool.append(v)
    while len(pool) < size:
        cand = _span(vocab, int(rng.integers(lo, hi + 1)), rng)
        if normalize_answer(cand) not in seen:
            seen.add(normalize_answer(cand))
            pool.append(cand)
    rng.shuffle(pool)
    return pool


def _probabilities(k, rng):
    p = np.sort(rng.dirichlet(np.ones(k)))[::-1]
    return [float(v) for v in p]


def generate(config):
    """Return ``(Dataset, [ModelPredictions, ...])``, fully determined by ``config.seed``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    vocab = make_vocabulary(cfg.vocab_size, rng)
    q = cfg.num_questions
    width = max(4, len(str(max(q - 1, 0))))
    qids = [f"{cfg.qid_prefix}{i:0{width}d}" for i in range(q)]
    max_n = max(m.n for m in cfg.models)
    n_short = round(cfg.short_list_fraction * q)
    short = set(rng.choice(q, size=n_short, replace=False).tolist()) if n_short else set()
    lo, hi = cfg.answer_length_range

    truths = {}
    contexts = {}
    per_model = [dict() for _ in cfg.models]
    for i, qid in enumerate(qids):
        unanswerable = rng.random() < cfg.unanswerable_fraction
        gold = "" if unanswerable else _span(vocab, int(rng.integers(lo, hi + 1)), rng)
        truths[qid] = GroundTruth(() if unanswerable else (gold,), unanswerable)
        pool = _candidate_pool(gold, 2 * max_n, vocab, cfg, rng)
        contexts[qid] = f"synthetic context {qid}: " + " | ".join(p for p in pool + [gold] if p)
        lengths = [m.n for m in cfg.models]
        if i in short:
            m = int(rng.integers(len(cfg.models)))
            if cfg.models[m].n > 1:
                lengths[m] = int(rng.integers(1, cfg.models[m].n))
        shared = rng.random()
        for m, sm in enumerate(cfg.models):
            u = shared if rng.random() < cfg.correlation else rng.random()
            if u < sm.top1_accuracy:
                gold_rank = 1
            elif u < sm.topn_recall:
                gold_rank = int(rng.integers(2, sm.n + 1)) if sm.n > 1 else None
            else:
                gold_rank = None
            k = lengths[m]
            if gold_rank is not None and gold_rank > k:
                gold_rank = None
            picks = rng.choice(len(pool), size=k, replace=False)
            texts = [pool[j] for j in picks]
            if gold_rank is not None:
                texts[gold_rank - 1] = gold
            probs = _probabilities(k, rng)
            per_model[m][qid] = [Hypothesis(t, p, r) for r, (t, p) in enumerate(zip(texts, probs), 1)]
    dataset = Dataset(truths, "synthetic", contexts)
    preds = [ModelPredictions(sm.model_id, per_model[m]) for m, sm in enumerate(cfg.models)]
    return dataset, preds


def write_generated(dataset, preds, out_dir, gold_name="gold.json"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gold_path = out / gold_name
    obj = dataset_to_json(dataset, title="synthetic")
    # attach per-question placeholder contexts
    paragraphs = [
        {"context": dataset.contexts.get(qa["id"], ""), "qas": [qa]}
        for qa in obj["data"][0]["paragraphs"][0]["qas"]
    ]
    obj["data"][0]["paragraphs"] = paragraphs
    with open(gold_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, ensure_ascii=False)
        f.write("\n")
    pred_paths = []
    for p in preds:
        path = out / f"{p.model_id}.json"
        write_nbest(path, p)
        pred_paths.append(path)
    return gold_path, pred_paths


def generate_files(config, out_dir):
    """Write ``gold.json`` plus one ``<model_id>.json`` n-best file per model."""
    dataset, preds = generate(config)
    return write_generated(dataset, preds, out_dir)
