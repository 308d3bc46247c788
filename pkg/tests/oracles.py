"""Independent reference implementations used to check the library.

Written from the definitions rather than from the library code: token lists
instead of Counters, exact rationals for z-score spread, explicit loops for
every tally.
"""

import math
import string
import unicodedata
from fractions import Fraction

import numpy as np

from stackqa.prediction_io import Hypothesis

ARTICLES = {"a", "an", "the"}
TOP1 = {"1", "2", "3", "3p"}


def ref_normalize(s):
    kept = []
    for ch in s.lower():
        if ch in string.punctuation or unicodedata.category(ch).startswith("P"):
            continue
        kept.append(ch)
    return " ".join(w for w in "".join(kept).split() if w not in ARTICLES)


def ref_f1(pred, truth):
    p = ref_normalize(pred).split()
    t = ref_normalize(truth).split()
    if not p or not t:
        return 1.0 if p == t else 0.0
    remaining = list(t)
    common = 0
    for w in p:
        if w in remaining:
            remaining.remove(w)
            common += 1
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(t)
    return 2 * precision * recall / (precision + recall)


def ref_em(pred, truth):
    return 1.0 if ref_normalize(pred) == ref_normalize(truth) else 0.0


def ref_fib(k):
    return 1 if k <= 2 else ref_fib(k - 1) + ref_fib(k - 2)


def _median(values):
    v = sorted(values)
    mid = len(v) // 2
    return v[mid] if len(v) % 2 else (v[mid - 1] + v[mid]) / 2


def _contributions(method, n, lists):
    """(normalized text, probability, weight, degenerate) for every counted hypothesis."""
    depth = 1 if method in TOP1 else n
    out = []
    for hyps in lists:
        probs = [p for _, p in hyps]
        for rank, (text, prob) in enumerate(hyps, start=1):
            if rank > depth:
                break
            degenerate = False
            if method in ("1", "4"):
                w = 1.0
            elif method in ("2", "7"):
                w = prob
            elif method == "5":
                w = float(n - rank + 1)
            elif method == "6":
                w = float(ref_fib(n - rank + 1))
            elif method in ("3p", "8p"):
                w = prob - _median(probs)
            else:
                exact = [Fraction(p) for p in probs]
                mu = sum(exact) / len(exact)
                var = sum((p - mu) ** 2 for p in exact) / len(exact)
                if var == 0:
                    w, degenerate = 0.0, True
                else:
                    w = float(Fraction(prob) - mu) / math.sqrt(var)
            out.append((ref_normalize(text), prob, w, degenerate))
    return out


def brute_force_vote(method, n, lists, rtol=1e-9):
    """Normalized winner for ``lists`` of ``[(text, prob), ...]`` in rank order."""
    contrib = _contributions(method, n, lists)
    if all(c[3] for c in contrib):
        contrib = _contributions("1" if method in TOP1 else "4", n, lists)
    keys = sorted({c[0] for c in contrib})
    total = {k: math.fsum(c[2] for c in contrib if c[0] == k) for k in keys}
    mass = {k: math.fsum(c[1] for c in contrib if c[0] == k) for k in keys}
    scale = max(abs(c[2]) for c in contrib)
    best = max(total.values())
    tied = [k for k in keys if total[k] >= best - rtol * scale]
    best_mass = max(mass[k] for k in tied)
    tied = [k for k in tied if mass[k] >= best_mass - rtol * best_mass]
    return tied[0]


# surface forms that pool under normalization; no symbol characters, so the
# token-based reference normalizer agrees with the regex one
TEXT_POOL = [
    "Paris", "paris.", "the Paris", "Rome", "rome!", "ROME", "", "Berlin",
    "an apple", "Apple", "New York", "new york city", "York", "a",
]


def random_lists(rng, max_models=3, max_hyps=5, pool=TEXT_POOL):
    """Random per-model n-best lists as ``[(text, prob), ...]`` sorted by probability."""
    lists = []
    for _ in range(int(rng.integers(1, max_models + 1))):
        k = int(rng.integers(1, max_hyps + 1))
        texts = [pool[i] for i in rng.integers(len(pool), size=k)]
        if rng.random() < 0.3:
            probs = rng.choice([0.1, 0.2, 0.3, 0.5], size=k)  # exact ties
        else:
            probs = rng.random(k)
        probs = sorted((float(p) for p in probs), reverse=True)
        lists.append(list(zip(texts, probs)))
    return lists


def as_hypotheses(lists):
    return [[Hypothesis(t, p, r) for r, (t, p) in enumerate(hyps, 1)] for hyps in lists]


def ref_kl(p, q):
    """KL(p || q) with 0 log 0 = 0, summed over the last axis."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    total = 0.0
    for pi, qi in zip(p.ravel(), q.ravel()):
        if pi > 0:
            total += pi * math.log(pi / qi)
    return total
