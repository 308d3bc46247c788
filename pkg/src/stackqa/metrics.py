"""SQuAD 2.0 scoring: normalization, EM, F1, no-answer accuracy, top-N and pooled oracles."""

import collections
import re
import string
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache

from stackqa.prediction_io import ValidationError

_ASCII_PUNCT = frozenset(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)


def _is_punct(ch):
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


@lru_cache(maxsize=1 << 16)
def normalize_answer(s):
    """Lower text and remove punctuation, articles and extra whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if not _is_punct(ch))
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def get_tokens(s):
    return normalize_answer(s).split()


def _exact(pred, truth):
    return float(normalize_answer(pred) == normalize_answer(truth))


def _f1(pred, truth):
    pred_toks = get_tokens(pred)
    truth_toks = get_tokens(truth)
    if not pred_toks or not truth_toks:
        # no-answer on either side: 1 only when both agree
        return float(pred_toks == truth_toks)
    common = collections.Counter(pred_toks) & collections.Counter(truth_toks)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_toks)
    recall = num_same / len(truth_toks)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction, truths):
    return max(_exact(prediction, t) for t in truths)


def f1_score(prediction, truths):
    return max(_f1(prediction, t) for t in truths)


def is_no_answer(text):
    return normalize_answer(text) == ""


@dataclass
class EvalReport:
    em: float
    f1: float
    na_accuracy: float
    count: int
    per_question: dict = field(default_factory=dict, repr=False)  # qid -> (em, f1)

    def as_dict(self, digits=3):
        return {
            "em": round(self.em, digits),
            "f1": round(self.f1, digits),
            "na_accuracy": round(self.na_accuracy, digits),
            "count": self.count,
        }


@dataclass
class TopNReport:
    per_n: dict  # N -> (em, f1, na_accuracy)

    def rows(self, digits=3):
        return [
            {"n": n, "em": round(em, digits), "f1": round(f1, digits), "na_accuracy": round(na, digits)}
            for n, (em, f1, na) in sorted(self.per_n.items())
        ]


def _missing(dataset, have):
    missing = [q for q in dataset.qids() if q not in have]
    if missing:
        shown = ", ".join(missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise ValidationError(f"{len(missing)} question(s) without an answer: {shown}{more}")


def _aggregate(scores, dataset):
    # scores: qid -> (em, f1, na_correct); summed in sorted-qid order
    qids = dataset.qids()
    n = len(qids)
    if n == 0:
        return EvalReport(0.0, 0.0, 0.0, 0, {})
    em = sum(scores[q][0] for q in qids)
    f1 = sum(scores[q][1] for q in qids)
    na = sum(scores[q][2] for q in qids)
    per_question = {q: (scores[q][0], scores[q][1]) for q in qids}
    return EvalReport(100.0 * em / n, 100.0 * f1 / n, 100.0 * na / n, n, per_question)


def score_question(answer, gt):
    truths = gt.truths
    na_correct = float(is_no_answer(answer) == gt.is_impossible)
    return exact_match(answer, truths), f1_score(answer, truths), na_correct


def evaluate(answers, dataset):
    """Score a ``{qid: answer}`` map against ``dataset``; extra qids are ignored."""
    _missing(dataset, answers)
    scores = {qid: score_question(answers[qid], dataset[qid]) for qid in dataset.qids()}
    return _aggregate(scores, dataset)


def _best_of(texts, gt):
    best = [0.0, 0.0, 0.0]
    for text in texts:
        for i, s in enumerate(score_question(text, gt)):
            if s > best[i]:
                best[i] = s
    return tuple(best)


def topn_eval(preds, dataset, ns):
    """Best-of-N scores per metric (each metric maximized independently)."""
    _missing(dataset, preds.per_question)
    per_n = {}
    for n in ns:
        if n < 1:
            raise ValidationError(f"N must be >= 1, got {n}")
        scores = {
            qid: _best_of([h.text for h in preds[qid][:n]], dataset[qid]) for qid in dataset.qids()
        }
        rep = _aggregate(scores, dataset)
        per_n[n] = (rep.em, rep.f1, rep.na_accuracy)
    return TopNReport(per_n)


def oracle_eval(preds_list, n, dataset):
    """Pool the top-``n`` hypotheses of every model and keep the best score per metric."""
    for preds in preds_list:
        _missing(dataset, preds.per_question)
    scores = {}
    for qid in dataset.qids():
        pooled = [h.text for preds in preds_list for h in preds[qid][:n]]
        scores[qid] = _best_of(pooled, dataset[qid])
    return _aggregate(scores, dataset)
