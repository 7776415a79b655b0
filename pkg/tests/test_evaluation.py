from __future__ import annotations

import numpy as np
import pytest

from atrialssm.evaluation import (
    BoxStats,
    EvalError,
    compactness,
    evaluate,
    generalization_loo,
    rmse,
    sample_seed,
    specificity,
    vertex_distances,
)
from atrialssm.pdm import PdmModel, build_pdm
from planted import planted_corpus


def test_identical_shapes_zero_distance():
    a = np.random.default_rng(0).normal(size=30)
    assert np.all(vertex_distances(a, a) == 0)


def test_three_four_five():
    a = np.random.default_rng(1).normal(size=(10, 3))
    b = a + np.array([3.0, 4.0, 0.0])
    assert np.allclose(vertex_distances(a.ravel(), b.ravel()), 5.0)


def test_rmse_direct_sum():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 60))
    total = 0.0
    for m in range(20):
        total += sum((a[3 * m + d] - b[3 * m + d]) ** 2 for d in range(3))
    assert rmse(a, b) == pytest.approx(np.sqrt(total / 20), rel=1e-12)


def test_distance_length_mismatch():
    with pytest.raises(EvalError):
        vertex_distances(np.zeros(6), np.zeros(9))


def test_box_stats():
    s = BoxStats.of(np.r_[np.arange(1.0, 11.0), 100.0])
    assert s.median == 6.0
    assert s.n_outliers == 1
    assert s.whisker_high == 10.0
    assert s.maximum == 100.0


def test_loo_in_span_shape():
    rng = np.random.default_rng(3)
    others = rng.normal(size=(5, 90))
    x = np.vstack([others, others.mean(axis=0)])
    res = generalization_loo(x)
    assert res.distances[-1].max() < 1e-6
    assert all(np.all(d >= 0) for d in res.distances)


def test_loo_planted():
    x, _, _ = planted_corpus()
    med = generalization_loo(x).medians
    assert np.median(med) < 0.3


def test_loo_needs_three():
    with pytest.raises(EvalError):
        generalization_loo(np.zeros((2, 6)))


def test_loo_parallel_matches_serial():
    x, _, _ = planted_corpus(n=8, m=50)
    a, b = generalization_loo(x), generalization_loo(x, jobs=3)
    for da, db in zip(a.distances, b.distances):
        assert np.array_equal(da, db)


def test_specificity_zero_bounds():
    x, _, _ = planted_corpus(n=10, m=50)
    m = build_pdm(x)
    res = specificity(m, x, n_samples=20, bounds=(0.0, 0.0))
    expected = min(rmse(m.mean, s) for s in x)
    assert np.allclose(res.rmse, expected)


def test_specificity_single_shape_zero_modes():
    s = np.random.default_rng(4).normal(size=30)
    m = PdmModel(s.copy(), np.zeros(0), np.zeros((0, 30)), np.zeros((0, 3), dtype=int))
    res = specificity(m, [s], n_samples=50)
    assert np.all(res.rmse == 0)


def test_specificity_closest_and_deterministic():
    x, _, _ = planted_corpus(n=10, m=50)
    m = build_pdm(x)
    a = specificity(m, x, n_samples=30, seed=9)
    b = specificity(m, x, n_samples=30, seed=9, jobs=3)
    assert np.array_equal(a.rmse, b.rmse)
    from atrialssm.pdm import sample

    _, s = sample(m, sample_seed(9, 4))
    d = [rmse(s, c) for c in x]
    assert a.rmse[4] == pytest.approx(min(d), rel=1e-12)
    assert a.closest[4] == int(np.argmin(d))
    assert a.minimum <= a.mean <= a.maximum


def _toy(eigs):
    k = len(eigs)
    return PdmModel(np.zeros(3 * k), np.asarray(eigs, float), np.eye(3 * k)[:k], np.zeros((0, 3), dtype=int))


def test_compactness_examples():
    assert compactness(_toy([5.0])).tolist() == [1.0]
    assert compactness(_toy([3.0, 1.0])).tolist() == [0.75, 1.0]
    with pytest.raises(EvalError):
        compactness(_toy([]))


def test_compactness_planted():
    x, _, _ = planted_corpus(noise=0.01)
    c = compactness(build_pdm(x))
    assert c[2] > 0.99  # curve[3] in one-based mode count
    assert c[-1] == 1.0


def test_report_files(tmp_path):
    x, _, _ = planted_corpus(n=8, m=40)
    rep = evaluate(build_pdm(x), x, n_samples=25, seed=1)
    paths = rep.write_csv(tmp_path)
    assert [p.name for p in paths] == ["generalization.csv", "specificity.csv", "compactness.csv"]
    assert len(paths[1].read_text().splitlines()) == 26
    text = rep.summary()
    assert "rmse_mean_mm" in text and "modes_90" in text
