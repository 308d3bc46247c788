"""Hand-crafted voting ensembles over per-model n-best lists.

Ten rules, keyed by the short ids used on the command line::

    1   plurality over top-1 answers
    2   top-1 answers weighted by probability
    3   top-1 answers weighted by z-score of probability within the model's list
    3p  top-1 answers weighted by probability minus the list median
    4   plurality over the bag of top-N answers
    5   top-N answers weighted by linear rank (N, N-1, ..., 1)
    6   top-N answers weighted by Fibonacci rank (Fib(N), ..., Fib(1))
    7   top-N answers weighted by probability
    8   top-N answers weighted by z-score
    8p  top-N answers weighted by probability minus the list median

Hypotheses are normalized before tallying so equal normalized texts pool
their weight. Ties on total weight are broken by summed probability mass,
then by the lexicographically smallest normalized answer.
"""

import enum
import statistics
from dataclasses import dataclass, field
from functools import lru_cache

from stackqa.metrics import normalize_answer
from stackqa.prediction_io import ValidationError

# relative tie tolerance, scaled by the largest single contribution in a question
TIE_RTOL = 1e-9


class Method(enum.Enum):
    PLURALITY_1 = "1"
    WEIGHTED_PROB_1 = "2"
    ZSCORE_1 = "3"
    MEDIAN_SCORE_1 = "3p"
    PLURALITY_N = "4"
    LINEAR_RANK_N = "5"
    FIBONACCI_RANK_N = "6"
    WEIGHTED_PROB_N = "7"
    ZSCORE_N = "8"
    MEDIAN_SCORE_N = "8p"

    @property
    def top1(self):
        return self in _TOP1

    @property
    def base(self):
        """Weighting family, shared by the top-1 and top-N variants."""
        return _BASE[self]


_TOP1 = {Method.PLURALITY_1, Method.WEIGHTED_PROB_1, Method.ZSCORE_1, Method.MEDIAN_SCORE_1}
_BASE = {
    Method.PLURALITY_1: "plurality",
    Method.PLURALITY_N: "plurality",
    Method.WEIGHTED_PROB_1: "prob",
    Method.WEIGHTED_PROB_N: "prob",
    Method.ZSCORE_1: "zscore",
    Method.ZSCORE_N: "zscore",
    Method.MEDIAN_SCORE_1: "median",
    Method.MEDIAN_SCORE_N: "median",
    Method.LINEAR_RANK_N: "linear",
    Method.FIBONACCI_RANK_N: "fibonacci",
}


@dataclass(frozen=True)
class VotingMethod:
    id: Method
    n: int = 1

    def __post_init__(self):
        if not isinstance(self.id, Method):
            object.__setattr__(self, "id", Method(self.id))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")

    @property
    def depth(self):
        return 1 if self.id.top1 else self.n

    def __str__(self):
        return f"#{self.id.value}" if self.id.top1 else f"#{self.id.value}(n={self.n})"


ALL_METHODS = tuple(Method)


@lru_cache(maxsize=None)
def fibonacci(k):
    """Fib(1) = Fib(2) = 1."""
    a, b = 1, 1
    for _ in range(k - 1):
        a, b = b, a + b
    return a


def _stats(hyps):
    probs = [h.probability for h in hyps]
    mean = statistics.fmean(probs)
    # pstdev with its own exact mean, so all-equal lists give exactly 0
    std = statistics.pstdev(probs)
    return mean, std, statistics.median(probs)


def hypothesis_weight(method, hyp, hyps):
    """Vote weight of ``hyp``; ``hyps`` is the model's full list for the question.

    Returns ``(weight, degenerate)``; ``degenerate`` marks a z-score with zero spread.
    """
    base = method.id.base
    if base == "plurality":
        return 1.0, False
    if base == "prob":
        return hyp.probability, False
    if base in ("linear", "fibonacci"):
        if hyp.rank > method.n:
            raise ValueError(f"rank {hyp.rank} exceeds n={method.n}")
        k = method.n - hyp.rank + 1
        return float(k if base == "linear" else fibonacci(k)), False
    mean, std, median = _stats(hyps)
    if base == "median":
        return hyp.probability - median, False
    if std == 0.0:
        return 0.0, True
    return (hyp.probability - mean) / std, False


@dataclass
class VoteTally:
    weights: dict = field(default_factory=dict)  # normalized -> total weight
    surface: dict = field(default_factory=dict)  # normalized -> display text
    mass: dict = field(default_factory=dict)  # normalized -> summed probability
    scale: float = 0.0
    count: int = 0
    degenerate: int = 0
    _best_prob: dict = field(default_factory=dict, repr=False)

    def add(self, hyp, weight):
        key = normalize_answer(hyp.text)
        self.weights[key] = self.weights.get(key, 0.0) + weight
        self.mass[key] = self.mass.get(key, 0.0) + hyp.probability
        self.scale = max(self.scale, abs(weight))
        self.count += 1
        if key not in self._best_prob or hyp.probability > self._best_prob[key]:
            self._best_prob[key] = hyp.probability
            self.surface[key] = hyp.text

    def winner(self):
        tol = TIE_RTOL * self.scale
        top = max(self.weights.values())
        tied = [k for k, w in self.weights.items() if w >= top - tol]
        if len(tied) > 1:
            mtol = TIE_RTOL * max(self.mass[k] for k in tied)
            top_mass = max(self.mass[k] for k in tied)
            tied = [k for k in tied if self.mass[k] >= top_mass - mtol]
        return min(tied)


def tally_question(method, lists):
    tally = VoteTally()
    for hyps in lists:
        for hyp in hyps[: method.depth]:
            weight, degenerate = hypothesis_weight(method, hyp, hyps)
            tally.degenerate += degenerate
            tally.add(hyp, weight)
    return tally


def combine_question(method, lists):
    """Pick one answer for a question from the models' n-best lists."""
    if not lists or any(not hyps for hyps in lists):
        raise ValidationError("every model needs a non-empty n-best list")
    tally = tally_question(method, lists)
    if tally.degenerate == tally.count:
        # every z-score was undefined: plain plurality over the same hypotheses
        fallback = Method.PLURALITY_1 if method.id.top1 else Method.PLURALITY_N
        tally = tally_question(VotingMethod(fallback, method.n), lists)
    key = tally.winner()
    return "" if key == "" else tally.surface[key]


def vote_dataset(method, preds_list, qids):
    for qid in qids:
        for preds in preds_list:
            if qid not in preds:
                raise ValidationError(f"model {preds.model_id!r} has no predictions for {qid!r}")
    return {qid: combine_question(method, [p[qid] for p in preds_list]) for qid in qids}


def parse_method(flag, n=1):
    try:
        return VotingMethod(Method(str(flag).lower().lstrip("#").replace("'", "p")), n)
    except ValueError:
        choices = ", ".join(m.value for m in Method)
        raise ValidationError(f"unknown voting method {flag!r}; choose from {choices}") from None
