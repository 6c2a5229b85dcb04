import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capqe.errors import ConstantVector, KeyMismatch, LengthMismatch, NoPositives, TooFewPoints
from capqe.metrics import (Correctness as C, FineGrainedAnnotation, Helpfulness as H, PRPoint,
                           RaterJudgment, auc, average_ranks, evaluate, ext_good, load_annotations,
                           mse, pr_at_threshold, pr_curve, read_curve_csv, spearman,
                           write_curve_csv)
from capqe.dataio import Checkpoint
from capqe.model import ModelConfig, ModelParams, init_params

from conftest import make_samples
from oracles import pr_by_enumeration, pr_curve_by_enumeration, ranks_by_counting, spearman_oracle


# -- ranks and Spearman -----------------------------------------------------

@pytest.mark.parametrize("v, expected", [
    ([10, 20, 30], [1, 2, 3]),
    ([5, 5], [1.5, 1.5]),
    ([3, 1, 3, 2], [3.5, 1, 3.5, 2]),
    ([7], [1]),
])
def test_average_ranks_examples(v, expected):
    np.testing.assert_array_equal(average_ranks(v), expected)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30))
def test_average_ranks_match_counting(v):
    np.testing.assert_array_equal(average_ranks(v), ranks_by_counting(v))


@given(st.lists(st.integers(0, 8), min_size=1, max_size=30))
def test_rank_sum_is_triangular(v):
    n = len(v)
    assert average_ranks(v).sum() == n * (n + 1) / 2


def test_spearman_identity_and_reversal():
    y = [0.1, 0.7, 0.3, 0.9]
    assert spearman(y, y) == pytest.approx(1.0, abs=1e-15)
    assert spearman(y, [-v for v in y]) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_errors():
    with pytest.raises(ConstantVector):
        spearman([1, 2, 3], [0.5, 0.5, 0.5])
    with pytest.raises(ConstantVector):
        spearman([4, 4], [1, 2])
    with pytest.raises(LengthMismatch):
        spearman([1, 2, 3], [1, 2])
    with pytest.raises(LengthMismatch):
        spearman([1], [1])


def _tied_pair(rng):
    n = int(rng.integers(5, 60))
    y = rng.integers(0, 9, size=n) / 8
    yhat = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
    return y, yhat


def test_spearman_matches_oracle_on_tied_instances():
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 200:
        y, yhat = _tied_pair(rng)
        if len(set(y)) < 2 or len(set(yhat)) < 2:
            continue
        assert abs(spearman(y, yhat) - spearman_oracle(y, yhat)) < 1e-12
        checked += 1


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_spearman_invariant_to_increasing_transforms(seed):
    rng = np.random.default_rng(seed)
    y, yhat = _tied_pair(rng)
    if len(set(y)) < 2 or len(set(yhat)) < 2:
        return
    rho = spearman(y, yhat)
    assert spearman(np.exp(y), yhat) == pytest.approx(rho, abs=1e-12)
    assert spearman(y, 3.0 * yhat + 2.0) == pytest.approx(rho, abs=1e-12)
    assert spearman(y, yhat) == pytest.approx(spearman(yhat, y), abs=1e-15)
    assert -1.0 - 1e-12 <= rho <= 1.0 + 1e-12


def test_mse_examples():
    assert mse([0.5, 0.5], [0.0, 1.0]) == 0.25
    assert mse([0.2], [0.2]) == 0.0
    with pytest.raises(LengthMismatch):
        mse([], [])


# -- ExtGood ----------------------------------------------------------------

def _ann(*pairs):
    return FineGrainedAnnotation("s", tuple(RaterJudgment(c, h) for c, h in pairs))


def test_ext_good_examples():
    assert ext_good(_ann((C.CORRECT, H.HELPFUL), (C.CORRECT, H.HELPFUL), (C.CORRECT, H.HELPFUL)))
    for helpful in H:
        assert not ext_good(_ann((C.INCORRECT, helpful), (C.INCORRECT, helpful), (C.CORRECT, helpful)))
    assert ext_good(_ann((C.PARTIALLY_CORRECT, H.SOMEWHAT_USEFUL), (C.CORRECT, H.NOT_HELPFUL),
                         (C.INCORRECT, H.HELPFUL)))


def test_ext_good_majorities_are_independent():
    # rater 3 alone carries helpfulness for the second majority; still two per dimension
    assert ext_good(_ann((C.CORRECT, H.NOT_HELPFUL), (C.CORRECT, H.HELPFUL), (C.INCORRECT, H.HELPFUL)))
    assert not ext_good(_ann((C.CORRECT, H.NOT_HELPFUL), (C.CORRECT, H.NOT_HELPFUL),
                             (C.INCORRECT, H.HELPFUL)))


def test_annotation_needs_three_raters():
    with pytest.raises(ValueError):
        _ann((C.CORRECT, H.HELPFUL))


judgment = st.tuples(st.sampled_from(list(C)), st.sampled_from(list(H)))


@given(st.lists(judgment, min_size=3, max_size=3), st.integers(0, 2), st.booleans())
def test_ext_good_monotone_under_upgrade(raters, who, upgrade_correctness):
    before = ext_good(_ann(*raters))
    c, h = raters[who]
    if upgrade_correctness:
        c = C(min(c + 1, C.CORRECT))
    else:
        h = H(min(h + 1, H.HELPFUL))
    raters = list(raters)
    raters[who] = (c, h)
    assert ext_good(_ann(*raters)) >= before


def test_load_annotations(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text('{"sample_id": "x", "raters": [{"correctness": 2, "helpfulness": 1},'
                 ' {"correctness": 1, "helpfulness": 1}, {"correctness": 0, "helpfulness": 0}]}\n')
    anns = load_annotations(p)
    assert ext_good(anns["x"])


# -- precision / recall -----------------------------------------------------

SIX_SCORES = {"a": 0.9, "b": 0.8, "c": 0.8, "d": 0.4, "e": 0.2, "f": 0.1}
SIX_LABELS = {"a": True, "b": False, "c": True, "d": True, "e": False, "f": False}


def test_pr_serve_everything_and_nothing():
    everything = pr_at_threshold(SIX_SCORES, SIX_LABELS, 0.0)
    assert (everything.recall, everything.precision, everything.n_served) == (1.0, 0.5, 6)
    nothing = pr_at_threshold(SIX_SCORES, SIX_LABELS, 0.9)
    assert (nothing.recall, nothing.precision, nothing.n_served) == (0.0, None, 0)


def test_pr_six_sample_hand_case():
    # strictly above 0.8 serves only "a"; above 0.4 serves a, b, c
    assert pr_at_threshold(SIX_SCORES, SIX_LABELS, 0.8) == PRPoint(0.8, 1.0, 1 / 3, 1)
    assert pr_at_threshold(SIX_SCORES, SIX_LABELS, 0.4) == PRPoint(0.4, 2 / 3, 2 / 3, 3)
    for th in (0.05, 0.1, 0.3, 0.5, 0.85):
        p = pr_at_threshold(SIX_SCORES, SIX_LABELS, th)
        assert (p.precision, p.recall, p.n_served) == pr_by_enumeration(SIX_SCORES, SIX_LABELS, th)


def test_pr_key_mismatch():
    with pytest.raises(KeyMismatch):
        pr_at_threshold({"a": 1.0}, {"b": True}, 0.5)


def test_pr_curve_all_positive():
    scores = {str(i): s for i, s in enumerate([0.1, 0.5, 0.5, 0.9])}
    points = pr_curve(scores, {k: True for k in scores})
    assert all(p.precision == 1.0 for p in points if p.n_served)


def test_pr_curve_two_distinct_scores():
    points = pr_curve({"a": 0.3, "b": 0.7, "c": 0.7}, {"a": True, "b": False, "c": True})
    assert len(points) == 3
    assert [p.n_served for p in points] == [0, 2, 3]
    assert points[-1].threshold < 0.3


def test_pr_curve_no_positives():
    with pytest.raises(NoPositives):
        pr_curve({"a": 0.3}, {"a": False})


def _random_instance(rng, n):
    keys = [f"k{i}" for i in range(n)]
    scores = dict(zip(keys, (rng.integers(0, 6, size=n) / 5).tolist()))
    labels = dict(zip(keys, rng.random(n) < 0.5))
    if not any(labels.values()):
        labels[keys[0]] = True
    return scores, labels


def test_pr_curve_matches_exhaustive_sweep():
    rng = np.random.default_rng(20)
    for n in range(1, 21):
        for _ in range(10):
            scores, labels = _random_instance(rng, n)
            got = [(p.threshold, p.precision, p.recall, p.n_served) for p in pr_curve(scores, labels)]
            assert got == pr_curve_by_enumeration(scores, labels)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_pr_curve_monotone(seed, n):
    points = pr_curve(*_random_instance(np.random.default_rng(seed), n))
    assert all(a.threshold > b.threshold for a, b in zip(points, points[1:]))
    assert all(a.recall <= b.recall for a, b in zip(points, points[1:]))
    assert all(a.n_served <= b.n_served for a, b in zip(points, points[1:]))
    assert points[-1].recall == 1.0
    assert 0.0 <= auc(points) <= 1.0 if sum(p.precision is not None for p in points) >= 2 else True


def test_curve_csv_round_trip(tmp_path):
    points = pr_curve(SIX_SCORES, SIX_LABELS)
    write_curve_csv(points, tmp_path / "c.csv")
    assert read_curve_csv(tmp_path / "c.csv") == points


# -- AUC --------------------------------------------------------------------

def test_auc_unit_square():
    pts = [PRPoint(0.9, 1.0, 0.5, 2), PRPoint(0.1, 1.0, 1.0, 4)]
    assert auc(pts) == 1.0


@pytest.mark.parametrize("p", [0.25, 0.6, 0.875])
def test_auc_rectangle(p):
    pts = [PRPoint(0.9, p, 0.2, 5), PRPoint(0.5, p, 0.7, 9), PRPoint(0.1, p, 1.0, 12)]
    assert abs(auc(pts) - p) < 1e-12


def test_auc_hand_trapezoid():
    pts = [PRPoint(0.9, 1.0, 0.5, 1), PRPoint(0.1, 0.5, 1.0, 4)]
    assert abs(auc(pts) - 0.875) < 1e-12


def test_auc_ignores_undefined_precision():
    pts = [PRPoint(1.0, None, 0.0, 0), PRPoint(0.9, 1.0, 0.5, 1), PRPoint(0.1, 0.5, 1.0, 4)]
    assert abs(auc(pts) - 0.875) < 1e-12


def test_auc_too_few_points():
    with pytest.raises(TooFewPoints):
        auc([PRPoint(1.0, None, 0.0, 0), PRPoint(0.5, 1.0, 1.0, 1)])


# -- evaluate ---------------------------------------------------------------

def test_evaluate_zero_model_has_undefined_spearman(rng):
    cfg = ModelConfig(proj_dim=4, num_labels=2)
    report = evaluate(Checkpoint(ModelParams.zeros(cfg), cfg), make_samples(rng, 10, n_labels=2))
    assert report.spearman is None
    assert report.n == 10


def test_evaluate_exact_predictor(rng):
    from capqe.metrics import score_samples
    cfg = ModelConfig(proj_dim=4, num_labels=2)
    ckpt = Checkpoint(init_params(cfg, 3), cfg)
    samples = make_samples(rng, 12, n_labels=2)
    for s, v in zip(samples, score_samples(ckpt, samples)):
        s.target = float(v)
    report = evaluate(ckpt, samples)
    assert report.spearman == pytest.approx(1.0, abs=1e-12)
    assert report.mse == 0.0


def test_evaluate_matches_scripted_computation(rng, perturbed_params, small_config):
    from capqe.model import forward
    samples = make_samples(rng, 30)
    report = evaluate(Checkpoint(perturbed_params, small_config), samples)
    preds = [forward(perturbed_params, small_config, s) for s in samples]
    targets = [s.target for s in samples]
    assert report.spearman == pytest.approx(spearman_oracle(targets, preds), abs=1e-12)
    assert report.mse == pytest.approx(math.fsum((p - t) ** 2 for p, t in zip(preds, targets)) / 30,
                                       abs=1e-15)
