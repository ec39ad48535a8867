import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carnet.evaluation import (DEFAULT_THRESHOLDS, EvalError, PredictionPair, evaluate, ods, ois, pr_curve, pr_svg,
                               prf, write_pr_csv)
from oracles import ods_ois_brute_force as brute_force, ois_below_ods_count, random_eval_datasets


def random_pairs(rng, n=5, size=(12, 16), prevalence=None, noise=0.35):
    pairs = []
    for i in range(n):
        prev = prevalence if prevalence is not None else rng.uniform(0.03, 0.2)
        gt = (rng.random(size) < prev).astype(np.uint8)
        prob = np.clip(0.65 * gt + 0.15 + noise * rng.standard_normal(size), 0, 1)
        pairs.append(PredictionPair(prob, gt, f"img{i}"))
    return pairs


# -- prf -----------------------------------------------------------------------------

def test_prf_perfect():
    g = np.array([[0, 1], [1, 0]])
    assert prf(g, g) == (1.0, 1.0, 1.0)


def test_prf_half_half():
    pred = np.array([1, 1, 0, 0])
    gt = np.array([1, 0, 1, 0])
    assert prf(pred, gt) == (0.5, 0.5, 0.5)


def test_prf_conventions():
    assert prf(np.zeros(4), np.array([1, 0, 0, 0])) == (1.0, 0.0, 0.0)
    assert prf(np.zeros(4), np.zeros(4)) == (1.0, 1.0, 1.0)
    assert prf(np.array([1, 0, 0, 0]), np.zeros(4)) == (0.0, 1.0, 0.0)


def test_prf_rejects_non_binary_and_shape():
    with pytest.raises(EvalError):
        prf(np.array([0.5, 1]), np.array([0, 1]))
    with pytest.raises(EvalError):
        prf(np.array([0, 1]), np.array([0, 1, 1]))


def test_pair_validation():
    with pytest.raises(EvalError):
        PredictionPair(np.zeros((2, 2)), np.full((2, 2), 2))
    with pytest.raises(EvalError):
        PredictionPair(np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(EvalError):
        PredictionPair(np.zeros((2, 2)), np.zeros((2, 3)))


# -- ODS / OIS -------------------------------------------------------------------------

def test_threshold_grid():
    assert len(DEFAULT_THRESHOLDS) == 99
    assert DEFAULT_THRESHOLDS[0] == 0.01 and DEFAULT_THRESHOLDS[-1] == 0.99


def test_ods_perfect_single_pair():
    gt = (np.random.default_rng(0).random((8, 8)) < 0.3).astype(np.uint8)
    score, t = ods([PredictionPair(gt.astype(float), gt)])
    assert score == 1.0
    assert t == 0.01  # ties go to the lowest threshold


@pytest.mark.parametrize("seed", range(10))
def test_ods_ois_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng, 5, (int(rng.integers(4, 33)), int(rng.integers(4, 33))))
    # include values exactly on grid points to exercise the >= rule
    pairs[0].prob.ravel()[:5] = [0.5, 0.25, 0.01, 0.99, 0.07]
    t = DEFAULT_THRESHOLDS
    bf_ods, bf_t, bf_ois = brute_force(pairs, t)
    assert ods(pairs, t) == (bf_ods, bf_t)
    assert ois(pairs, t) == bf_ois
    rep = evaluate(pairs, t)
    assert (rep.ods, rep.ods_threshold, rep.ois) == (bf_ods, bf_t, bf_ois)


def test_ois_at_least_ods_on_random_datasets():
    bad = ois_below_ods_count(random_eval_datasets(2024, 100))
    if bad:
        pytest.xfail(f"OIS < ODS on {bad}/100 random datasets; the ordering is not a theorem")


def test_ois_below_ods_is_possible():
    # a large crack found perfectly plus a one-pixel crack that is missed
    big = np.zeros((20, 20), np.uint8)
    big[:, 5:15] = 1
    tiny = np.zeros((20, 20), np.uint8)
    tiny[3, 3] = 1
    pairs = [PredictionPair(big.astype(float), big), PredictionPair(np.zeros((20, 20)), tiny)]
    assert ois(pairs) == 0.5
    assert ods(pairs)[0] > 0.99


def test_identical_images_give_ois_equal_ods():
    pair = random_pairs(np.random.default_rng(3), 1)[0]
    pairs = [PredictionPair(pair.prob.copy(), pair.gt.copy(), str(i)) for i in range(4)]
    assert abs(ois(pairs) - ods(pairs)[0]) < 1e-12


def test_ois_is_mean_of_best():
    a = PredictionPair(np.array([0.9, 0.9, 0.1, 0.1, 0.1]), np.array([1, 0, 1, 1, 0]))  # best F1 is 0.5
    b = PredictionPair(np.array([0.9, 0.1, 0.1]), np.array([1, 1, 0]))  # best F1 is 2/3 at low t... check by brute
    expect = (brute_force([a], DEFAULT_THRESHOLDS)[2] + brute_force([b], DEFAULT_THRESHOLDS)[2]) / 2
    assert ois([a, b]) == expect


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    pairs = random_pairs(rng, 5)
    base = (ods(pairs), ois(pairs))
    for perm in itertools.islice(itertools.permutations(range(5)), 0, 120, 17):
        shuffled = [pairs[i] for i in perm]
        assert ods(shuffled)[0] == base[0][0]
        assert abs(ois(shuffled) - base[1]) < 1e-12


def test_recall_monotone_in_threshold():
    rep = evaluate(random_pairs(np.random.default_rng(6), 4))
    assert np.all(np.diff(rep.recall) <= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_scores_in_unit_interval(seed, n):
    rep = evaluate(random_pairs(np.random.default_rng(seed), n, (6, 6)))
    for arr in (rep.precision, rep.recall, rep.f1):
        assert np.all((arr >= 0) & (arr <= 1))
    assert 0 <= rep.ods <= 1 and 0 <= rep.ois <= 1


def test_threshold_validation():
    pairs = random_pairs(np.random.default_rng(0), 1)
    with pytest.raises(EvalError):
        ods(pairs, [0.5, 0.4])
    with pytest.raises(EvalError):
        ods(pairs, [])
    with pytest.raises(EvalError):
        ods([])


# -- PR curve --------------------------------------------------------------------------

def test_perfect_predictor_curve_is_one_point():
    gt = (np.random.default_rng(1).random((10, 10)) < 0.3).astype(np.uint8)
    rows = pr_curve([PredictionPair(gt.astype(float), gt)])
    assert {(p, r) for _, p, r, _ in rows} == {(1.0, 1.0)}


def test_random_predictor_precision_is_prevalence():
    rng = np.random.default_rng(8)
    pairs = []
    for _ in range(4):
        gt = (rng.random((64, 64)) < 0.5).astype(np.uint8)
        pairs.append(PredictionPair(rng.random((64, 64)), gt))
    prevalence = np.mean([p.gt.mean() for p in pairs])
    rows = pr_curve(pairs)
    for t, p, _, _ in rows:
        if t <= 0.95:
            assert abs(p - prevalence) < 0.05


def test_csv_and_svg(tmp_path):
    rows = pr_curve(random_pairs(np.random.default_rng(9), 2))
    write_pr_csv(tmp_path / "pr.csv", rows)
    with open(tmp_path / "pr.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["threshold", "precision", "recall", "f1"]
    assert len(table) - 1 == len(DEFAULT_THRESHOLDS)
    svg = pr_svg(rows, title="x")
    assert svg.startswith("<svg") and "<polyline" in svg and svg.count(",") >= 99


def test_report_json():
    rep = evaluate(random_pairs(np.random.default_rng(10), 3))
    doc = json.loads(rep.to_json())
    assert len(doc["per_threshold"]) == 99
    assert [d["id"] for d in doc["per_image"]] == ["img0", "img1", "img2"]
    assert doc["ods"] == rep.ods and doc["ois"] == rep.ois
