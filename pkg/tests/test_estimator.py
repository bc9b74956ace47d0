import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from enetlts.data import Dataset
from enetlts.estimator import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_LAMBDA_GRID,
    BoundaryOptimumWarning,
    EnetLTSConfig,
    GridCell,
    SubsetState,
    _trimmed_score,
    cstep,
    csteps_converge,
    elemental_subset,
    fit_enet_cv,
    fit_enetlts,
    fit_subset,
    make_problem,
    random_starts,
    reweight,
    select_optimal,
    select_subset,
    trimmed_cv_score,
    warm_start_grid,
)
from enetlts.solver import PenaltyParams, predict_proba
from conftest import planted_data, three_group_data

SMALL = EnetLTSConfig(
    alpha_grid=(0.5, 1.0), lambda_grid=(0.02, 0.05, 0.1), n_starts=10, keep=2, mcd_starts=50
)
P = PenaltyParams(0.5, 0.05)


def quota_ok(prob, H):
    counts = np.bincount(prob.labels[H], minlength=prob.K + 1)[1:]
    return np.array_equal(counts, prob.quota.sizes)


def test_default_grids():
    assert len(DEFAULT_ALPHA_GRID) == 41 and DEFAULT_ALPHA_GRID[0] == 0 and DEFAULT_ALPHA_GRID[-1] == 1
    assert len(DEFAULT_LAMBDA_GRID) == 19
    assert DEFAULT_LAMBDA_GRID[0] == 0.05 and DEFAULT_LAMBDA_GRID[-1] == 0.95
    assert len(DEFAULT_ALPHA_GRID) * len(DEFAULT_LAMBDA_GRID) == 779


def test_config_validation():
    with pytest.raises(ValueError):
        EnetLTSConfig(alpha_grid=(0.5, 0.2))
    with pytest.raises(ValueError):
        EnetLTSConfig(h_fraction=0.4)
    with pytest.raises(ValueError):
        EnetLTSConfig(c2=0)


@pytest.mark.parametrize("n,h", [(180, 135), (500, 375)])
def test_subset_size_formula(n, h):
    labels = np.resize([1, 2, 3], n)
    data = Dataset(np.zeros((n, 1)), labels, 3)
    prob = make_problem(data, standardize=False)
    assert prob.quota.h == h == math.floor((n + 1) * 0.75)


def test_elemental_subset(rng):
    labels = np.repeat([1, 2, 3], [5, 7, 4])
    el = elemental_subset(labels, rng)
    assert el.size == 6
    np.testing.assert_array_equal(np.bincount(labels[el])[1:], [2, 2, 2])
    np.testing.assert_array_equal(elemental_subset(np.repeat([1, 2, 3], 2), rng), np.arange(6))
    with pytest.raises(ValueError):
        elemental_subset(np.array([1, 2, 2, 3, 3]), rng)


def test_cstep_respects_quota_and_fixed_point(rng):
    data, _ = three_group_data(0)
    prob = make_problem(data, SMALL)
    H, _ = select_subset(prob, fit_subset(prob, np.arange(data.n), P).coef, rng)
    state = fit_subset(prob, H, P)
    best, trace = csteps_converge(prob, state, P, rng)
    assert quota_ok(prob, best.H)
    again, trace2 = csteps_converge(prob, best, P, np.random.default_rng(1))
    assert trace2 == [best.Q]
    np.testing.assert_array_equal(again.H, best.H)


def test_cstep_excludes_planted_outliers(rng):
    data, out = planted_data(3)
    prob = make_problem(data, SMALL)
    start = fit_subset(prob, np.setdiff1d(np.arange(data.n), out), P)
    new = cstep(prob, start, P, rng)
    assert np.intersect1d(new.H, out).size == 0


def test_cstep_usually_descends():
    # n=9, K=3, h=6: distance-based selection need not decrease Q, but mostly does
    ok = 0
    for t in range(100):
        r = np.random.default_rng(t)
        labels = np.repeat([1, 2, 3], 3)
        X = r.standard_normal((9, 2)) + np.repeat([[2, 0], [0, 2], [-2, -2]], 3, axis=0)
        prob = make_problem(Dataset(X, labels, 3), replace(SMALL, h_fraction=0.65))
        assert prob.quota.sizes.tolist() == [2, 2, 2]
        H0 = np.sort(np.concatenate([r.choice(np.flatnonzero(labels == l), 2, replace=False) for l in (1, 2, 3)]))
        st = fit_subset(prob, H0, P)
        ok += cstep(prob, st, P, r).Q <= st.Q + 1e-12
    assert ok >= 95


def test_csteps_beat_random_subsets_refit_once():
    data, _ = three_group_data(5, n_per=10, p=2)
    prob = make_problem(data, SMALL)
    best, _, _ = random_starts(prob, P, seed=0)
    r = np.random.default_rng(9)
    for _ in range(200):
        H = np.sort(np.concatenate([r.choice(g, hl, replace=False) for g, hl in zip(prob.groups, prob.quota.sizes)]))
        assert best.Q <= fit_subset(prob, H, P).Q + 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_csteps_trace_strictly_decreasing(seed):
    data, _ = three_group_data(seed, n_per=12, p=3)
    prob = make_problem(data, SMALL)
    r = np.random.default_rng(seed)
    H = np.sort(np.concatenate([r.choice(g, hl, replace=False) for g, hl in zip(prob.groups, prob.quota.sizes)]))
    best, trace = csteps_converge(prob, fit_subset(prob, H, P), P, r, max_iter=50)
    assert len(trace) <= 51
    assert all(np.isfinite(trace))
    assert all(b < a for a, b in zip(trace, trace[1:]))
    assert best.Q == trace[-1]


def test_random_starts_deterministic_and_parallel_invariant():
    data, _ = planted_data(1)
    prob = make_problem(data, SMALL)
    a = random_starts(prob, P, seed=4, n_starts=8, keep=2)
    b = random_starts(prob, P, seed=4, n_starts=8, keep=2)
    c = random_starts(prob, P, seed=4, n_starts=8, keep=2, n_jobs=2)
    np.testing.assert_array_equal(a[0].H, b[0].H)
    np.testing.assert_array_equal(a[0].H, c[0].H)
    assert a[0].Q == b[0].Q == c[0].Q
    np.testing.assert_array_equal(a[0].coef, c[0].coef)


def test_warm_start_grid_cells():
    data, _ = three_group_data(2)
    prob = make_problem(data, SMALL)
    cells, _ = warm_start_grid(prob, SMALL.alpha_grid, SMALL.lambda_grid, seed=0)
    assert [len(r) for r in cells] == [3, 3]
    for a, row in enumerate(cells):
        for j, cell in enumerate(row):
            assert quota_ok(prob, cell.best.H)
            if a == 0 and j == 0:
                continue
            prev = cells[a][j - 1] if j > 0 else cells[a - 1][0]
            params = PenaltyParams(cell.alpha, cell.lam)
            assert cell.best.Q <= fit_subset(prob, prev.best.H, params, init=prev.best.coef).Q + 1e-12
    one, _ = warm_start_grid(prob, (0.5,), (0.05,), seed=0)
    rs = random_starts(prob, P, 0, SMALL.n_starts, SMALL.keep)[0]
    np.testing.assert_array_equal(one[0][0].best.H, rs.H)


def test_trimmed_score_examples():
    dev = np.array([1.0] * 9 + [100.0])
    assert _trimmed_score(dev, np.ones(10, int), 0.10) == 1.0
    dev = np.array([1.0, 2.0, 3.0, 10.0])
    labels = np.array([1, 1, 2, 2])
    assert _trimmed_score(dev, labels, 0.0) == pytest.approx((1.5 + 6.5) / 2)
    assert _trimmed_score(np.zeros(6), np.repeat([1, 2, 3], 2), 0.1) == 0.0


def test_trimmed_cv_score_separable_near_zero():
    data, _ = three_group_data(0, n_per=20, sep=12.0)
    prob = make_problem(data, SMALL)
    H = np.arange(data.n)[: prob.quota.h]
    H = np.sort(np.concatenate([g[:hl] for g, hl in zip(prob.groups, prob.quota.sizes)]))
    st = fit_subset(prob, H, PenaltyParams(1.0, 0.001))
    cell = GridCell(1.0, 0.001, st)
    assert trimmed_cv_score(prob, cell, 5, 0.1, np.random.default_rng(0)) < 0.05


def test_select_optimal_tie_rules():
    st = SubsetState(np.arange(3), np.zeros((2, 2)), 0.0)
    cells = [[GridCell(0.5, 0.1, st, 1.0), GridCell(0.5, 0.2, st, 1.0)],
             [GridCell(1.0, 0.1, st, 1.0), GridCell(1.0, 0.2, st, 2.0)]]
    win = select_optimal(cells)
    assert (win.alpha, win.lam) == (0.5, 0.2)
    assert select_optimal([[GridCell(0.3, 0.7, st, 5.0)]]).lam == 0.7
    cells[0][0].cv_score = 0.5
    assert (select_optimal(cells).alpha, select_optimal(cells).lam) == (0.5, 0.1)


def test_reweight_rule_and_outliers():
    data, out = planted_data(0)
    prob = make_problem(data, SMALL)
    best, _, _ = random_starts(prob, P, 0, 10, 2)
    w, lam_upd, coef, report, scores = reweight(prob, best, 0.5, SMALL.lambda_grid, 5.0, np.random.default_rng(0))
    np.testing.assert_array_equal(w == 0, report.rd_scaled > 5)
    assert lam_upd in SMALL.lambda_grid and len(scores) == 3
    assert np.mean(w[out] == 0) >= 0.8


def test_fit_enetlts_end_to_end_and_deterministic():
    data, out = planted_data(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryOptimumWarning)
        a = fit_enetlts(data, SMALL)
        b = fit_enetlts(data, SMALL)
    np.testing.assert_array_equal(a.subset, b.subset)
    assert (a.alpha_opt, a.lambda_opt, a.lambda_upd) == (b.alpha_opt, b.lambda_opt, b.lambda_upd)
    np.testing.assert_array_equal(a.coef, b.coef)
    assert np.intersect1d(a.subset, out).size == 0
    assert a.subset.size == a.h
    assert a.coef.shape == (data.p + 1, 3)
    # shifting a class-independent amount leaves probabilities unchanged
    Bs = a.coef + np.arange(data.p + 1)[:, None]
    np.testing.assert_allclose(a.predict_proba(data.X[:5]), predict_proba(Bs, data.X[:5]))
    assert a.alpha_opt in SMALL.alpha_grid and a.lambda_opt in SMALL.lambda_grid
    assert a.cv_scores.shape == (2, 3)
    np.testing.assert_array_equal(a.weights == 0, a.diagnostics.rd_scaled > 5)


def test_boundary_warning_emitted():
    data, _ = three_group_data(4)
    cfg = EnetLTSConfig(alpha_grid=(1.0,), lambda_grid=(0.01, 0.02), n_starts=5, keep=1, mcd_starts=30)
    with pytest.warns(BoundaryOptimumWarning):
        fit = fit_enetlts(data, cfg)
    assert fit.notes


def test_clean_separable_matches_classical():
    data, _ = three_group_data(6, n_per=30, p=3, sep=4.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        robust = fit_enetlts(data, SMALL)
    classical = fit_enet_cv(data, SMALL.alpha_grid, SMALL.lambda_grid)
    m_r = np.mean(robust.predict(data.X) != data.labels)
    m_c = np.mean(classical.predict(data.X) != data.labels)
    assert m_r <= m_c + 0.05


def sparse_truth(seed, n=90, p=30):
    """One informative predictor separating class 1 from class 2; class 3 is the baseline."""
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, p))
    Z = np.zeros((n, 3))
    Z[:, 0], Z[:, 1] = 1.5 * X[:, 0], -1.5 * X[:, 0]
    Pm = np.exp(Z - Z.max(axis=1, keepdims=True))
    Pm /= Pm.sum(axis=1, keepdims=True)
    labels = np.minimum(1 + (r.random(n)[:, None] > np.cumsum(Pm, axis=1)).sum(axis=1), 3)
    return Dataset(X, labels, 3)


@pytest.mark.slow
def test_sparse_truth_selects_interior_lambda():
    grid = (0.005, 0.02, 0.05, 0.1)
    wins = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for s in range(100):
            cfg = EnetLTSConfig(alpha_grid=(0.5, 1.0), lambda_grid=grid, n_starts=10, keep=2, mcd_starts=50, seed=s)
            wins += fit_enetlts(sparse_truth(s), cfg).lambda_opt > grid[0]
    assert wins >= 90, f"lambda above the grid minimum in {wins}/100 runs"
