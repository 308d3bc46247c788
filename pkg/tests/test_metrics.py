import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import ref_em, ref_f1, ref_normalize
from stackqa.metrics import evaluate, exact_match, f1_score, normalize_answer, oracle_eval, topn_eval
from stackqa.prediction_io import Dataset, GroundTruth, Hypothesis, ModelPredictions, ValidationError

CASES = json.loads((Path(__file__).parent / "fixtures" / "metrics_cases.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("case", CASES, ids=[c["id"] for c in CASES])
def test_fixture_scores(case):
    assert exact_match(case["prediction"], case["truths"]) == case["em"]
    assert f1_score(case["prediction"], case["truths"]) == pytest.approx(case["f1"], abs=1e-12)


@pytest.mark.parametrize("case", CASES, ids=[c["id"] for c in CASES])
def test_fixtures_agree_with_reference(case):
    assert max(ref_em(case["prediction"], t) for t in case["truths"]) == case["em"]
    assert max(ref_f1(case["prediction"], t) for t in case["truths"]) == pytest.approx(case["f1"], abs=1e-12)


@pytest.mark.parametrize("raw, norm", [
    ("The King's Speech!", "kings speech"),
    ("", ""),
    ("Enrique Pérez de Guzmán", "enrique pérez de guzmán"),
])
def test_normalize_examples(raw, norm):
    assert normalize_answer(raw) == norm


def test_spec_scorer_examples():
    assert exact_match("T(n)", ["T(n)"]) == 1
    assert exact_match("", [""]) == 1
    assert exact_match("Pérez", ["Enrique Pérez de Guzmán"]) == 0
    assert f1_score("Pérez", ["Enrique Pérez de Guzmán"]) == pytest.approx(0.4)
    assert f1_score("multiplication", ["multiplication"]) == 1.0
    assert f1_score("", ["something"]) == 0.0


text = st.text(alphabet=st.sampled_from(list("ab the.,!'é«» \tXYZan")), max_size=30)


@given(text)
def test_normalize_idempotent(s):
    assert normalize_answer(normalize_answer(s)) == normalize_answer(s)


@given(text, text)
def test_em_implies_f1_and_f1_symmetric(p, t):
    if exact_match(p, [t]) == 1:
        assert f1_score(p, [t]) == 1.0
    assert f1_score(p, [t]) == pytest.approx(f1_score(t, [p]), abs=1e-15)


@given(text, text)
def test_f1_matches_reference(p, t):
    assert f1_score(p, [t]) == pytest.approx(ref_f1(p, t), abs=1e-12)
    assert normalize_answer(p).split() == ref_normalize(p).split()


def ds(**truths):
    return Dataset({q: GroundTruth(tuple(a), not a) for q, a in truths.items()})


def test_evaluate_perfect_single():
    rep = evaluate({"q": "x"}, ds(q=["x"]))
    assert (rep.em, rep.f1, rep.na_accuracy) == (100.0, 100.0, 100.0)


def test_evaluate_mean_times_100():
    rep = evaluate({"a": "T(n)", "b": "Pérez"},
                   ds(a=["T(n)"], b=["Enrique Pérez de Guzmán"]))
    assert rep.em == pytest.approx(50.0)
    assert rep.f1 == pytest.approx(70.0)
    assert rep.per_question["b"] == (0.0, pytest.approx(0.4))


def test_unanswerable_answered_empty():
    rep = evaluate({"q": ""}, ds(q=[]))
    assert (rep.em, rep.f1, rep.na_accuracy) == (100.0, 100.0, 100.0)


def test_missing_answers_listed():
    with pytest.raises(ValidationError, match="q2"):
        evaluate({"q1": "x"}, ds(q1=["x"], q2=["y"]))


def test_extra_answers_ignored_and_report_rounds():
    rep = evaluate({"a": "x", "zzz": "y"}, ds(a=["x y z"]))
    assert rep.count == 1
    assert rep.as_dict()["f1"] == round(100 * 0.5, 3)


def mp(model_id, **lists):
    return ModelPredictions(model_id, {
        q: [Hypothesis(t, p, r) for r, (t, p) in enumerate(hyps, 1)] for q, hyps in lists.items()
    })


def test_topn_n1_equals_top1_evaluate():
    d = ds(a=["x"], b=[])
    p = mp("m", a=[("y", 0.6), ("x", 0.4)], b=[("", 0.7), ("z", 0.3)])
    rep = topn_eval(p, d, [1, 2])
    top1 = evaluate(p.top1(), d)
    assert rep.per_n[1] == (top1.em, top1.f1, top1.na_accuracy)
    assert rep.per_n[2][0] == 100.0


def test_oracle_single_model_equals_topn_and_union():
    d = ds(q=["right"])
    a = mp("a", q=[("wrong", 0.9)])
    b = mp("b", q=[("right", 0.8)])
    assert oracle_eval([a], 1, d).em == topn_eval(a, d, [1]).per_n[1][0] == 0.0
    assert oracle_eval([a, b], 1, d).em == 100.0


def random_instance(rng, pool):
    n_q = int(rng.integers(1, 6))
    truths, lists_a, lists_b = {}, {}, {}
    for i in range(n_q):
        gold = pool[int(rng.integers(len(pool)))]
        truths[f"q{i}"] = [gold] if gold else []
        for lists in (lists_a, lists_b):
            k = int(rng.integers(1, 7))
            texts = [pool[j] for j in rng.integers(len(pool), size=k)]
            probs = sorted(rng.random(k), reverse=True)
            lists[f"q{i}"] = list(zip(texts, probs))
    return ds(**truths), mp("a", **lists_a), mp("b", **lists_b)


def test_topn_monotone_and_oracle_dominates():
    rng = np.random.default_rng(5)
    pool = ["", "x", "x y", "y", "the x", "z w"]
    for _ in range(200):
        d, a, b = random_instance(rng, pool)
        ns = [1, 2, 3, 4, 6, 8]
        for p in (a, b):
            rows = [topn_eval(p, d, ns).per_n[n] for n in ns]
            for lo, hi in zip(rows, rows[1:]):
                assert all(h >= l for l, h in zip(lo, hi))
        for n in ns:
            pooled = oracle_eval([a, b], n, d)
            for p in (a, b):
                single = topn_eval(p, d, [n]).per_n[n]
                assert pooled.em >= single[0] and pooled.f1 >= single[1]
                assert pooled.na_accuracy >= single[2]
