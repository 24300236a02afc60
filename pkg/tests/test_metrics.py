import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wafervit.errors import ContractError, UndefinedMetricError
from wafervit.metrics import (REPORT_SCHEMA, ConfusionCounts, EvalReport, accuracy, confusion,
                              evaluate, f1, f1_from, precision, predicted_masks, recall,
                              validate_report)
from wafervit.patterns import CLASS_MASKS, MASK_TO_INDEX

from helpers import brute_force_scores, textbook_metrics


def random_case(rng, n, valid_fraction=0.7):
    """Random targets from the 38 patterns and probabilities that sometimes match them."""
    targets = rng.choice(CLASS_MASKS, size=n)
    probs = rng.uniform(0, 1, size=(n, 8))
    hit = rng.random(n) < valid_fraction
    bits = (targets[:, None] >> np.arange(8)) & 1
    probs[hit] = np.where(bits[hit] == 1, rng.uniform(0.5, 1, (hit.sum(), 8)), rng.uniform(0, 0.5, (hit.sum(), 8)))
    return probs, targets


def brute_force_masks(probs, threshold):
    out = []
    for row in probs:
        m = 0
        for i, p in enumerate(row):
            if p >= threshold:
                m += 2 ** i
        out.append(m)
    return out


# -- scalar metrics --------------------------------------------------------

def test_accuracy_spot_cases():
    assert accuracy(ConfusionCounts(tp=50, tn=40, fp=5, fn=5)) == 0.90
    assert accuracy(ConfusionCounts(tp=3, tn=4)) == 1.0
    assert accuracy(ConfusionCounts(fp=2, fn=1)) == 0.0
    with pytest.raises(UndefinedMetricError):
        accuracy(ConfusionCounts())


def test_precision_recall_f1_spot_cases():
    assert precision(ConfusionCounts(tp=9, fp=1)) == 0.9
    assert recall(ConfusionCounts(tp=9, fn=1)) == 0.9
    assert f1(ConfusionCounts(tp=9, fp=1, fn=1)) == pytest.approx(0.9, abs=1e-15)
    assert f1_from(0.8, 0.6) == 2 * 0.8 * 0.6 / (0.8 + 0.6)
    assert abs(f1_from(0.8, 0.6) - 0.6857142857142857) < 1e-15
    # tp=12, fp=3, fn=8 gives P=0.8, R=0.6 exactly
    assert f1(ConfusionCounts(tp=12, fp=3, fn=8)) == f1_from(0.8, 0.6)


def test_zero_denominators_are_zero_and_flagged():
    from wafervit.metrics import MetricRow
    row = MetricRow.from_counts("C5", ConfusionCounts(tn=10))
    assert (row.precision, row.recall, row.f1) == (0.0, 0.0, 0.0)
    assert row.degenerate == ["precision", "recall", "f1"]
    assert row.accuracy == 1.0


def test_counts_must_be_non_negative():
    with pytest.raises(ContractError):
        ConfusionCounts(tp=-1)


def test_confusion_from_vectors():
    c = confusion([1, 1, 0, 0, 1], [1, 0, 1, 0, 1])
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_between_precision_and_recall(tp, fp, fn, tn):
    c = ConfusionCounts(tp, fp, fn, tn)
    p, r, f = precision(c), recall(c), f1(c)
    if tp > 0:
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
    if p == r:
        assert f == pytest.approx(p)
    for v in (p, r, f):
        assert 0 <= v <= 1


# -- evaluate ------------------------------------------------------------------

def test_predicted_masks_threshold_inclusive():
    probs = np.array([[0.5, 0.49, 1, 0, 0, 0, 0, 0]])
    assert predicted_masks(probs, 0.5)[0] == 0b101
    assert brute_force_masks(probs, 0.5) == [0b101]


def test_perfect_predictor():
    rng = np.random.default_rng(0)
    targets = rng.choice(CLASS_MASKS, size=100)
    probs = ((targets[:, None] >> np.arange(8)) & 1).astype(float)
    r = evaluate(probs, targets)
    assert r.invalid_count == 0 and r.exact_match_accuracy == 1.0
    assert all(v == 1.0 for v in r.macro.values())
    for row in r.present_classes:
        assert (row.precision, row.recall, row.f1, row.accuracy) == (1, 1, 1, 1)


def test_all_zero_predictor_on_normal_set():
    r = evaluate(np.zeros((20, 8)), np.zeros(20, dtype=int))
    assert all(row.accuracy == 1.0 and row.counts.tn == 20 for row in r.base_defects)
    assert [row.name for row in r.present_classes] == ["C1"]


def test_invalid_mask_counts_as_miss():
    # {NF, S, D} is not a pattern; truth C2 (Center)
    probs = np.zeros((1, 8))
    probs[0, [1, 5, 7]] = 1
    r = evaluate(probs, [0b1])
    assert r.invalid_count == 1
    c2 = r.classes[1].counts
    assert (c2.tp, c2.fn) == (0, 1)
    assert sum(row.counts.fp for row in r.classes) == 0


def test_multiclass_path():
    scores = np.eye(38)[[0, 5, 5]]
    r = evaluate(scores, [CLASS_MASKS[0], CLASS_MASKS[5], CLASS_MASKS[4]])
    assert r.mode == "multiclass" and r.threshold is None and r.invalid_count == 0
    assert r.exact_match_accuracy == pytest.approx(2 / 3)


def test_evaluate_rejects_bad_input():
    with pytest.raises(ContractError):
        evaluate(np.zeros((0, 8)), [])
    with pytest.raises(ContractError):
        evaluate(np.zeros((2, 8)), [0])
    with pytest.raises(ContractError):
        evaluate(np.zeros((1, 8)), [0b01110010])


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_scorer(seed):
    rng = np.random.default_rng(seed)
    probs, targets = random_case(rng, 200)
    r = evaluate(probs, targets, threshold=0.5)
    pm = brute_force_masks(probs, 0.5)
    ref = brute_force_scores(pm, targets, CLASS_MASKS)
    for k, row in enumerate(r.classes):
        assert (row.counts.tp, row.counts.fp, row.counts.fn, row.counts.tn) == ref[k]
        acc, p, rc, f = textbook_metrics(*ref[k])
        assert abs(row.accuracy - acc) <= 1e-12 and abs(row.precision - p) <= 1e-12
        assert abs(row.recall - rc) <= 1e-12 and abs(row.f1 - f) <= 1e-12
        assert row.counts.total == 200
    for i, row in enumerate(r.base_defects):
        pb = [(m >> i) & 1 for m in pm]
        tb = [(int(t) >> i) & 1 for t in targets]
        tp = sum(a and b for a, b in zip(pb, tb))
        fp = sum(a and not b for a, b in zip(pb, tb))
        fn = sum(b and not a for a, b in zip(pb, tb))
        assert (row.counts.tp, row.counts.fp, row.counts.fn) == (tp, fp, fn)
    assert r.invalid_count == sum(MASK_TO_INDEX[m] < 0 for m in pm)
    present = [k for k in range(38) if ref[k][0] + ref[k][2] > 0]
    assert r.macro["f1"] == pytest.approx(np.mean([textbook_metrics(*ref[k])[3] for k in present]), abs=1e-12)


def test_macro_invariant_to_sample_order():
    rng = np.random.default_rng(7)
    probs, targets = random_case(rng, 150)
    perm = rng.permutation(150)
    a, b = evaluate(probs, targets), evaluate(probs[perm], targets[perm])
    assert a.to_dict() == b.to_dict()


# -- serialization ----------------------------------------------------------------------

def test_report_json_schema_and_round_trip():
    probs, targets = random_case(np.random.default_rng(3), 120)
    r = evaluate(probs, targets)
    d = json.loads(r.to_json())
    jsonschema.validate(d, REPORT_SCHEMA)
    validate_report(d)
    assert EvalReport.from_dict(d).to_json() == r.to_json()
    bad = dict(d, sample_count=0)
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)


def test_csv_layout_with_all_classes_present():
    targets = np.repeat(CLASS_MASKS, 3)
    probs = ((targets[:, None] >> np.arange(8)) & 1).astype(float)
    lines = evaluate(probs, targets).to_csv().splitlines()
    assert lines[0] == "class,precision,recall,f1,accuracy"
    assert len(lines) == 1 + 38 + 1
    assert lines[1].startswith("C1,") and lines[-1].startswith("Average,")
