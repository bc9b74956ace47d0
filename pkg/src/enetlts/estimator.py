"""The enet-LTS driver: random starts, C-steps, warm-start grid, trimmed CV and reweighting.

Internally every coefficient matrix lives on the robustly standardized
predictor scale (median/MAD). Each fit on a subset additionally standardizes
with the subset's mean and sd, fits there, and maps the result back, so the
penalty always acts on subset-standardized coefficients.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset, GroupQuota, indicator_matrix, stratified_folds, stratified_sizes
from .preprocess import ScalingInfo, backtransform, forward_transform, negligible_scale, robust_standardize
from .scores import OutlyingnessReport, groupwise_outlyingness
from .solver import (
    PenaltyParams,
    SolverControls,
    SolverError,
    deviances,
    fit_penalized,
    predict_proba,
)

DEFAULT_ALPHA_GRID = tuple(float(a) for a in np.linspace(0.0, 1.0, 41))
DEFAULT_LAMBDA_GRID = tuple(round(0.05 * k, 10) for k in range(1, 20))

TIE_DECIMALS = 9

_STAGE_GRID, _STAGE_STARTS, _STAGE_CV, _STAGE_REWEIGHT = 1, 2, 3, 4


class BoundaryOptimumWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EnetLTSConfig:
    alpha_grid: tuple = DEFAULT_ALPHA_GRID
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    h_fraction: float = 0.75
    folds: int = 5
    trim: float = 0.10
    n_starts: int = 500
    keep: int = 10
    c2: float = 5.0
    seed: int = 0
    init_csteps: int = 2
    max_csteps: int = 50
    mcd_starts: int = 500
    mcd_h_fraction: float = 0.75
    n_jobs: int = 1
    solver: SolverControls = SolverControls()

    def __post_init__(self):
        for name in ("alpha_grid", "lambda_grid"):
            grid = tuple(float(v) for v in getattr(self, name))
            if not grid:
                raise ValueError(f"{name} is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, grid)
        if not all(0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise ValueError("alpha values must lie in [0, 1]")
        if not all(v >= 0 for v in self.lambda_grid):
            raise ValueError("lambda values must be non-negative")
        if not 0.5 < self.h_fraction <= 1.0:
            raise ValueError("h_fraction must be in (0.5, 1]")
        if not 0.0 <= self.trim < 1.0:
            raise ValueError("trim must be in [0, 1)")
        if not self.c2 > 0:
            raise ValueError("c2 must be positive")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")

    def to_dict(self) -> dict:
        return {
            "alpha_grid": list(self.alpha_grid),
            "lambda_grid": list(self.lambda_grid),
            "h_fraction": self.h_fraction,
            "folds": self.folds,
            "trim": self.trim,
            "n_starts": self.n_starts,
            "keep": self.keep,
            "c2": self.c2,
            "seed": self.seed,
            "init_csteps": self.init_csteps,
            "max_csteps": self.max_csteps,
            "mcd_starts": self.mcd_starts,
            "mcd_h_fraction": self.mcd_h_fraction,
        }


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass
class SubsetState:
    H: np.ndarray
    coef: np.ndarray
    Q: float
    converged: bool = True


@dataclass
class GridCell:
    alpha: float
    lam: float
    best: SubsetState
    cv_score: float = math.nan
    trace: list = field(default_factory=list)


class _Problem:
    """Robustly standardized data plus the bookkeeping the C-steps need."""

    def __init__(self, X, labels, K, quota: GroupQuota | None, config: EnetLTSConfig):
        self.X = X
        self.labels = np.asarray(labels)
        self.K = K
        self.Y = indicator_matrix(self.labels, K)
        self.groups = tuple(np.flatnonzero(self.labels == l) for l in range(1, K + 1))
        self.quota = quota
        self.config = config

    @classmethod
    def from_dataset(cls, data: Dataset, config: EnetLTSConfig, X=None):
        X = data.X if X is None else X
        h = int(math.floor((data.n + 1) * config.h_fraction))
        quota = stratified_sizes(data.group_counts, min(h, data.n))
        return cls(X, data.labels, data.K, quota, config)

    def outlyingness(self, coef, rng) -> OutlyingnessReport:
        cfg = self.config
        return groupwise_outlyingness(
            coef, self.X, self.labels, rng, K=self.K,
            h_fraction=cfg.mcd_h_fraction, mcd_starts=cfg.mcd_starts,
        )


def make_problem(data: Dataset, config: EnetLTSConfig = EnetLTSConfig(), standardize: bool = True) -> _Problem:
    """Problem object used by the C-step machinery, robustly standardized by default."""
    X = robust_standardize(data.X)[0] if standardize else np.asarray(data.X, dtype=float)
    return _Problem.from_dataset(data, config, X=X)


def _fit_rows(prob: _Problem, rows, params: PenaltyParams, init=None):
    """Fit on ``rows`` after standardizing with their own mean/sd.

    Returns the solver result and the coefficients on the problem scale.
    """
    XH = prob.X[rows]
    centers = XH.mean(axis=0)
    scales = XH.std(axis=0, ddof=1)
    constant = negligible_scale(XH, scales)
    scales = np.where(constant, 1.0, scales)
    info = ScalingInfo(centers, scales, "classical", constant)
    Xs = (XH - centers) / scales
    if init is not None:
        init = forward_transform(init, info)
        init[1:][constant] = 0.0
    res = fit_penalized(Xs, prob.Y[rows], params, init=init, controls=prob.config.solver)
    coef = res.coef
    coef[1:][constant] = 0.0
    return res, backtransform(coef, info)


def fit_subset(prob: _Problem, H, params: PenaltyParams, init=None) -> SubsetState:
    H = np.sort(np.asarray(H, dtype=np.int64))
    res, coef = _fit_rows(prob, H, params, init)
    return SubsetState(H=H, coef=coef, Q=float(res.objective), converged=res.converged)


def elemental_subset(labels, rng: np.random.Generator, K=None) -> np.ndarray:
    """Two distinct random observations from every class."""
    labels = np.asarray(labels)
    K = int(labels.max()) if K is None else K
    picks = []
    for l in range(1, K + 1):
        g = np.flatnonzero(labels == l)
        if g.size < 2:
            raise ValueError(f"class {l} has {g.size} observations; elemental subsets need 2")
        picks.append(rng.choice(g, size=2, replace=False))
    return np.sort(np.concatenate(picks))


def select_subset(prob: _Problem, coef, rng, report: OutlyingnessReport | None = None):
    """Per group, the ``h_l`` observations with the smallest scaled distances.

    Ties (distances agreeing to ``TIE_DECIMALS`` decimals) are broken by
    smaller deviance, then smaller index.
    """
    if report is None:
        report = prob.outlyingness(coef, rng)
    dev = deviances(coef, prob.X, prob.Y)
    # distances equal up to rounding count as ties (e.g. r + 1 points in r dims)
    rkey = np.round(report.rd_scaled, TIE_DECIMALS)
    chosen = []
    for g, hl in zip(prob.groups, prob.quota.sizes):
        order = np.lexsort((g, dev[g], rkey[g]))
        chosen.append(g[order[:hl]])
    H = np.sort(np.concatenate(chosen))
    _check_quota(prob, H)
    return H, report


def _check_quota(prob: _Problem, H):
    counts = np.bincount(prob.labels[H], minlength=prob.K + 1)[1:]
    if not np.array_equal(counts, prob.quota.sizes):
        raise AssertionError(f"subset violates group quota: {counts} vs {prob.quota.sizes}")


def cstep(prob: _Problem, state: SubsetState, params: PenaltyParams, rng) -> SubsetState:
    """Re-rank all observations under ``state.coef`` and refit on the new h-subset."""
    H, _ = select_subset(prob, state.coef, rng)
    return fit_subset(prob, H, params, init=state.coef)


def csteps_converge(prob: _Problem, state: SubsetState, params: PenaltyParams, rng, max_iter=50):
    """Iterate C-steps while the objective decreases by more than 1e-10.

    Returns the best state visited and the (strictly decreasing) objective
    trace of the accepted states.
    """
    best = state
    trace = [state.Q]
    seen = {state.H.tobytes()}
    for _ in range(max_iter):
        new = cstep(prob, best, params, rng)
        key = new.H.tobytes()
        if key in seen or not new.Q < best.Q - 1e-10:
            break
        seen.add(key)
        best = new
        trace.append(new.Q)
    return best, trace


def _one_start(prob: _Problem, params: PenaltyParams, seed: int, s: int):
    rng = _rng(seed, _STAGE_STARTS, s)
    try:
        el = elemental_subset(prob.labels, rng, prob.K)
        _, coef = _fit_rows(prob, el, params)
        H, _ = select_subset(prob, coef, rng)
        state = fit_subset(prob, H, params, init=coef)
        for _ in range(prob.config.init_csteps):
            state = cstep(prob, state, params, rng)
    except (SolverError, np.linalg.LinAlgError, FloatingPointError):
        return None
    if not np.isfinite(state.Q):
        return None
    return state


def _start_chunk(args):
    prob, params, seed, idx = args
    with threadpool_limits(1):
        return [_one_start(prob, params, seed, s) for s in idx]


def random_starts(prob: _Problem, params: PenaltyParams, seed: int, n_starts=500, keep=10, n_jobs=1):
    """Elemental random starts, two C-steps each, then convergence of the best ``keep``.

    Every start draws from its own seed stream, so the result does not depend
    on ``n_jobs``. Failed starts are skipped; ``n_failed`` counts them.
    """
    if n_jobs > 1 and n_starts > 1:
        chunks = np.array_split(np.arange(n_starts), n_jobs)
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(_start_chunk, [(prob, params, seed, c) for c in chunks]))
        states = [st for part in parts for st in part]
    else:
        states = [_one_start(prob, params, seed, s) for s in range(n_starts)]
    ok = [(st.Q, s, st) for s, st in enumerate(states) if st is not None]
    n_failed = n_starts - len(ok)
    if not ok:
        raise RuntimeError(f"all {n_starts} random starts failed at alpha={params.alpha}, lambda={params.lam}")
    ok.sort(key=lambda t: (t[0], t[1]))
    best, best_trace, best_key = None, None, None
    for Q, s, st in ok[:keep]:
        rng = _rng(seed, _STAGE_STARTS, n_starts + s)
        cand, trace = csteps_converge(prob, st, params, rng, prob.config.max_csteps)
        if best is None or (cand.Q, s) < best_key:
            best, best_trace, best_key = cand, trace, (cand.Q, s)
    return best, best_trace, n_failed


def warm_start_grid(prob: _Problem, alpha_grid, lambda_grid, seed: int, n_jobs=1):
    """Solve every (alpha, lambda) cell, warm-starting from a solved neighbour.

    Cell (0, 0) comes from random starts; cells further along lambda start
    from their left neighbour, and the first cell of each alpha row from the
    first cell of the previous row.
    """
    cfg = prob.config
    cells = [[None] * len(lambda_grid) for _ in alpha_grid]
    n_failed = 0
    for a, alpha in enumerate(alpha_grid):
        for j, lam in enumerate(lambda_grid):
            params = PenaltyParams(alpha, lam)
            if a == 0 and j == 0:
                best, trace, n_failed = random_starts(
                    prob, params, seed, cfg.n_starts, cfg.keep, n_jobs
                )
            else:
                prev = cells[a][j - 1] if j > 0 else cells[a - 1][0]
                rng = _rng(seed, _STAGE_GRID, a, j)
                try:
                    start = fit_subset(prob, prev.best.H, params, init=prev.best.coef)
                    best, trace = csteps_converge(prob, start, params, rng, cfg.max_csteps)
                except Exception as exc:
                    raise RuntimeError(f"grid cell alpha={alpha}, lambda={lam}: {exc}") from exc
            cells[a][j] = GridCell(alpha, lam, best, trace=trace)
    return cells, n_failed


def _trimmed_score(dev, labels, trim: float, per_group: bool = True) -> float:
    if not per_group:
        return float(np.mean(dev))
    means = []
    for l in np.unique(labels):
        d = np.sort(dev[labels == l])
        drop = math.ceil(trim * d.size - 1e-9) if trim > 0 else 0
        kept = d[: d.size - drop] if drop < d.size else d[:1]
        means.append(kept.mean())
    return float(np.mean(means))


def trimmed_cv_score(prob: _Problem, cell: GridCell, k=5, trim=0.10, rng=None) -> float:
    """Stratified k-fold CV deviance on the cell's subset, trimmed per group.

    Per group the ``ceil(trim * count)`` largest held-out deviances are
    dropped; the score is the mean over groups of the remaining means.
    """
    H = cell.best.H
    folds = stratified_folds(prob.labels[H], k, rng)
    params = PenaltyParams(cell.alpha, cell.lam)
    dev = np.empty(H.size)
    for f in range(k):
        train, test = H[folds != f], H[folds == f]
        _, coef = _fit_rows(prob, train, params, init=cell.best.coef)
        dev[folds == f] = deviances(coef, prob.X[test], prob.Y[test])
    return _trimmed_score(dev, prob.labels[H], trim)


def select_optimal(cells):
    """Cell with the minimal CV score; ties go to larger lambda, then larger alpha."""
    flat = [c for row in cells for c in row]
    return min(flat, key=lambda c: (c.cv_score, -c.lam, -c.alpha))


def _cv_lambda_path(prob, rows, alpha, lambda_grid, init, k, trim, rng, per_group=True):
    """CV score for each lambda at fixed alpha on ``rows`` (one shared fold split)."""
    folds = stratified_folds(prob.labels[rows], k, rng)
    scores = []
    fold_init = [init] * k
    for lam in lambda_grid:
        params = PenaltyParams(alpha, lam)
        dev = np.empty(rows.size)
        for f in range(k):
            train, test = rows[folds != f], rows[folds == f]
            _, coef = _fit_rows(prob, train, params, init=fold_init[f])
            fold_init[f] = coef
            dev[folds == f] = deviances(coef, prob.X[test], prob.Y[test])
        scores.append(_trimmed_score(dev, prob.labels[rows], trim, per_group))
    return np.array(scores)


def reweight(prob: _Problem, raw: SubsetState, alpha_opt: float, lambda_grid, c2=5.0, rng=None, k=5, trim=0.10):
    """Hard-rejection reweighting and refit with an updated lambda.

    Returns ``(weights, lambda_upd, coef, report, lambda_scores)``; ``coef``
    is on the problem scale.
    """
    report = prob.outlyingness(raw.coef, rng)
    w = (report.rd_scaled <= c2).astype(float)
    rows = np.flatnonzero(w)
    counts = np.bincount(prob.labels[rows], minlength=prob.K + 1)[1:]
    if rows.size < 2 * prob.K or np.any(counts < 2):
        raise ValueError(f"only {rows.size} observations survive reweighting (per class {counts.tolist()})")
    if np.any(counts < k):
        raise ValueError(f"a class keeps fewer than {k} observations after reweighting: {counts.tolist()}")
    scores = _cv_lambda_path(prob, rows, alpha_opt, lambda_grid, raw.coef, k, trim, rng)
    best = min(range(len(lambda_grid)), key=lambda j: (scores[j], -lambda_grid[j]))
    lam_upd = float(lambda_grid[best])
    _, coef = _fit_rows(prob, rows, PenaltyParams(alpha_opt, lam_upd), init=raw.coef)
    return w, lam_upd, coef, report, scores


@dataclass
class ModelFit:
    alpha_opt: float
    lambda_opt: float
    lambda_upd: float
    subset: np.ndarray
    coef_raw: np.ndarray
    coef: np.ndarray
    weights: np.ndarray
    diagnostics: OutlyingnessReport
    scaling: ScalingInfo
    cv_scores: np.ndarray
    lambda_upd_scores: np.ndarray
    config: EnetLTSConfig
    h: int
    n_failed_starts: int = 0
    converged: bool = True
    notes: list = field(default_factory=list)

    @property
    def n_w(self) -> int:
        return int(np.count_nonzero(self.weights))

    def predict_proba(self, X, raw: bool = False) -> np.ndarray:
        return predict_proba(self.coef_raw if raw else self.coef, X)

    def predict(self, X, raw: bool = False) -> np.ndarray:
        return np.argmax(self.predict_proba(X, raw), axis=1) + 1


def fit_enetlts(data: Dataset, config: EnetLTSConfig = EnetLTSConfig()) -> ModelFit:
    """Robust sparse multinomial fit.

    Robust standardization, warm-started grid of best h-subsets, trimmed CV
    selection of (alpha, lambda), and a reweighting step. Coefficients of the
    returned fit are on the original predictor scale.
    """
    with threadpool_limits(1):
        return _fit_enetlts(data, config)


def _fit_enetlts(data: Dataset, config: EnetLTSConfig) -> ModelFit:
    Xr, rscale = robust_standardize(data.X)
    prob = _Problem.from_dataset(data, config, X=Xr)
    seed = config.seed
    cells, n_failed = warm_start_grid(prob, config.alpha_grid, config.lambda_grid, seed, config.n_jobs)
    cv = np.empty((len(config.alpha_grid), len(config.lambda_grid)))
    for a, row in enumerate(cells):
        for j, cell in enumerate(row):
            try:
                cell.cv_score = trimmed_cv_score(prob, cell, config.folds, config.trim, _rng(seed, _STAGE_CV, a, j))
            except Exception as exc:
                raise RuntimeError(f"cross-validation at alpha={cell.alpha}, lambda={cell.lam}: {exc}") from exc
            cv[a, j] = cell.cv_score
    win = select_optimal(cells)
    params = PenaltyParams(win.alpha, win.lam)
    raw = fit_subset(prob, win.best.H, params, init=win.best.coef)
    notes = []
    lg = config.lambda_grid
    if len(lg) > 1 and win.lam in (lg[0], lg[-1]):
        msg = f"optimal lambda {win.lam} lies on the grid boundary"
        notes.append(msg)
        warnings.warn(msg, BoundaryOptimumWarning, stacklevel=2)
    try:
        w, lam_upd, coef_rw, report, lam_scores = reweight(
            prob, raw, win.alpha, lg, config.c2, _rng(seed, _STAGE_REWEIGHT), config.folds, config.trim
        )
    except Exception as exc:
        raise RuntimeError(f"reweighting step: {exc}") from exc
    if np.count_nonzero(w) < prob.quota.h:
        notes.append(f"reweighting keeps {int(np.count_nonzero(w))} observations, fewer than h={prob.quota.h}")
    converged = all(c.best.converged for row in cells for c in row) and raw.converged
    return ModelFit(
        alpha_opt=win.alpha,
        lambda_opt=win.lam,
        lambda_upd=lam_upd,
        subset=raw.H,
        coef_raw=backtransform(raw.coef, rscale),
        coef=backtransform(coef_rw, rscale),
        weights=w,
        diagnostics=report,
        scaling=rscale,
        cv_scores=cv,
        lambda_upd_scores=lam_scores,
        config=config,
        h=prob.quota.h,
        n_failed_starts=n_failed,
        converged=converged,
        notes=notes,
    )


@dataclass
class EnetCVFit:
    alpha_opt: float
    lambda_opt: float
    coef: np.ndarray
    cv_scores: np.ndarray

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self.coef, X)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1) + 1


def fit_enet_cv(data: Dataset, alpha_grid=DEFAULT_ALPHA_GRID, lambda_grid=DEFAULT_LAMBDA_GRID, folds=5, seed=0) -> EnetCVFit:
    """Non-robust elastic net with full-data k-fold CV (untrimmed mean deviance)."""
    with threadpool_limits(1):
        cfg = EnetLTSConfig(alpha_grid=alpha_grid, lambda_grid=lambda_grid, folds=folds, seed=seed)
        prob = _Problem(np.asarray(data.X, dtype=float), data.labels, data.K, None, cfg)
        rows = np.arange(data.n)
        cv = np.empty((len(cfg.alpha_grid), len(cfg.lambda_grid)))
        for a, alpha in enumerate(cfg.alpha_grid):
            rng = _rng(seed, _STAGE_CV, 0)  # same split for every alpha
            cv[a] = _cv_lambda_path(prob, rows, alpha, cfg.lambda_grid, None, folds, 0.0, rng, per_group=False)
        a, j = min(
            ((a, j) for a in range(cv.shape[0]) for j in range(cv.shape[1])),
            key=lambda t: (cv[t], -cfg.lambda_grid[t[1]], -cfg.alpha_grid[t[0]]),
        )
        params = PenaltyParams(cfg.alpha_grid[a], cfg.lambda_grid[j])
        _, coef = _fit_rows(prob, rows, params)
        return EnetCVFit(params.alpha, params.lam, coef, cv)
