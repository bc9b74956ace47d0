"""Simulation designs, contamination, evaluation metrics and replication studies."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import toeplitz

from .data import Dataset
from .estimator import EnetLTSConfig, fit_enet_cv, fit_enetlts

K = 3
NONZERO_TOL = 1e-10
METHODS = ("enetlts", "classical-enet")
SCENARIOS = ("info", "both")
METRICS = ("mcr", "precision_inf", "precision_uninf", "fpr", "fnr")
RESULT_HEADER = ("setting", "epsilon", "scenario", "method", "rep") + METRICS

# (p_a, p_b, n)
_TABLE = {
    1: (130, 30, 500),
    2: (250, 250, 300),
    3: (50, 100, 180),
    4: (5, 50, 180),
    5: (50, 950, 180),
}


@dataclass(frozen=True)
class SimulationSetting:
    id: int
    p_a: int
    p_b: int
    n: int
    rho_a: float = 0.5
    rho_b: float = 0.5

    @property
    def p(self) -> int:
        return self.p_a + self.p_b

    @property
    def means(self) -> np.ndarray:
        M = np.zeros((K, self.p))
        M[:, :2] = [[3, 3], [3, -3], [-3, -3]]
        return M

    @property
    def coef(self) -> np.ndarray:
        """True ``(p + 1, 3)`` coefficients: zero intercepts and zero noise block."""
        B = np.zeros((self.p + 1, K))
        B[1 : self.p_a + 1, 0] = 0.5
        B[1 : self.p_a + 1, 1] = np.where(np.arange(self.p_a) % 2 == 0, 1.0, -1.0)
        B[1 : self.p_a + 1, 2] = -1.0
        return B

    def covariance(self) -> np.ndarray:
        S = np.zeros((self.p, self.p))
        S[: self.p_a, : self.p_a] = toeplitz(self.rho_a ** np.arange(self.p_a))
        S[self.p_a :, self.p_a :] = toeplitz(self.rho_b ** np.arange(self.p_b))
        return S


def make_setting(id: int, rho_a: float = 0.5, rho_b: float = 0.5) -> SimulationSetting:
    if id not in _TABLE:
        raise ValueError(f"unknown simulation setting {id!r}; choose from {sorted(_TABLE)}")
    p_a, p_b, n = _TABLE[id]
    return SimulationSetting(id, p_a, p_b, n, rho_a, rho_b)


@dataclass(frozen=True)
class ContaminationSpec:
    epsilon: float = 0.0
    scenario: str = "info"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")


@dataclass(frozen=True)
class SimulatedData:
    data: Dataset
    location_group: np.ndarray
    outliers: np.ndarray


def group_sizes(n: int) -> list:
    base = n // K
    return [base] * (K - 1) + [n - base * (K - 1)]


def _block_chol(setting: SimulationSetting):
    La = np.linalg.cholesky(toeplitz(setting.rho_a ** np.arange(setting.p_a)))
    Lb = np.linalg.cholesky(toeplitz(setting.rho_b ** np.arange(setting.p_b)))
    return La, Lb


def generate(setting: SimulationSetting, rng: np.random.Generator, n=None) -> SimulatedData:
    """Draw ``n`` observations: normal clusters with block covariance, multinomial labels."""
    n = setting.n if n is None else n
    sizes = group_sizes(n)
    loc = np.repeat(np.arange(1, K + 1), sizes)
    La, Lb = _block_chol(setting)
    E = rng.standard_normal((n, setting.p))
    X = np.empty((n, setting.p))
    X[:, : setting.p_a] = E[:, : setting.p_a] @ La.T
    X[:, setting.p_a :] = E[:, setting.p_a :] @ Lb.T
    X += setting.means[loc - 1]
    B = setting.coef
    Z = B[0] + X @ B[1:]
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(n)
    labels = 1 + np.minimum((u[:, None] > np.cumsum(P, axis=1)).sum(axis=1), K - 1)
    data = Dataset(X=X, labels=labels, K=K)
    return SimulatedData(data=data, location_group=loc, outliers=np.array([], dtype=np.int64))


def contaminate(X, setting: SimulationSetting, spec: ContaminationSpec, rng: np.random.Generator):
    """Replace the first ``floor(eps * n)`` rows of the chosen block(s) by N(10, 1) draws.

    Returns the contaminated copy and the 0-based indexes of the affected rows.
    """
    X = np.array(X, dtype=float, copy=True)
    m = int(math.floor(spec.epsilon * X.shape[0] + 1e-9))
    cols = setting.p_a if spec.scenario == "info" else setting.p
    if m > 0:
        X[:m, :cols] = rng.normal(10.0, 1.0, size=(m, cols))
    return X, np.arange(m)


def mcr(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and true labels differ in length")
    return float(np.mean(predicted != truth))


def coef_metrics(B_hat, B_true, p_a: int, p_b: int):
    """(precision_inf, precision_uninf, fpr, fnr) over the slope rows."""
    B_hat = np.asarray(B_hat, dtype=float)
    B_true = np.asarray(B_true, dtype=float)
    if B_hat.shape != B_true.shape or B_hat.shape[0] != p_a + p_b + 1:
        raise ValueError(f"coefficient shapes {B_hat.shape} and {B_true.shape} do not match p_a + p_b + 1")
    Kc = B_hat.shape[1]
    inf = slice(1, p_a + 1)
    uninf = slice(p_a + 1, p_a + p_b + 1)
    prec_inf = math.sqrt(np.sum((B_true[inf] - B_hat[inf]) ** 2) / (p_a * Kc)) if p_a else 0.0
    prec_uninf = math.sqrt(np.sum((B_true[uninf] - B_hat[uninf]) ** 2) / (p_b * Kc)) if p_b else 0.0
    est_nz = np.abs(B_hat[1:]) > NONZERO_TOL
    true_nz = B_true[1:] != 0
    fpr = np.sum(est_nz & ~true_nz) / (p_b * Kc) if p_b else 0.0
    fnr = np.sum(~est_nz & true_nz) / (p_a * Kc) if p_a else 0.0
    return prec_inf, prec_uninf, float(fpr), float(fnr)


def _rep_seed(seed, setting_id, rep):
    return np.random.SeedSequence(seed, spawn_key=(int(setting_id), int(rep)))


def _evaluate(method, train: Dataset, test: SimulatedData, setting, config: EnetLTSConfig, fit_seed: int):
    if method == "enetlts":
        fit = fit_enetlts(train, replace(config, seed=fit_seed))
        coef = fit.coef
    elif method == "classical-enet":
        fit = fit_enet_cv(train, config.alpha_grid, config.lambda_grid, config.folds, fit_seed)
        coef = fit.coef
    else:
        raise ValueError(f"unknown method {method!r}")
    pred = fit.predict(test.data.X)
    return (mcr(pred, test.data.labels),) + coef_metrics(coef, setting.coef, setting.p_a, setting.p_b)


def run_replication(args):
    """All (epsilon, scenario, method) rows for one (setting, rep)."""
    setting_id, rep, epsilons, scenarios, methods, seed, config = args
    setting = make_setting(setting_id)
    ss = _rep_seed(seed, setting_id, rep)
    s_train, s_test, s_cont, s_fit = ss.spawn(4)
    train = generate(setting, np.random.default_rng(s_train))
    test = generate(setting, np.random.default_rng(s_test))
    fit_seed = int(s_fit.generate_state(1)[0])
    rows = []
    clean_cache = {}
    for eps in epsilons:
        for scen in scenarios:
            spec = ContaminationSpec(eps, scen)
            Xc, _ = contaminate(train.data.X, setting, spec, _cont_rng(s_cont, scen))
            data = Dataset(X=Xc, labels=train.data.labels, K=K)
            for method in methods:
                key = (method,) if eps == 0 else None
                try:
                    if key is not None and key in clean_cache:
                        vals = clean_cache[key]
                    else:
                        vals = _evaluate(method, data, test, setting, config, fit_seed)
                        if key is not None:
                            clean_cache[key] = vals
                    status = ""
                except Exception as exc:  # a failed replication is recorded, not fatal
                    vals = (math.nan,) * len(METRICS)
                    status = f"{type(exc).__name__}: {exc}"
                rows.append(
                    dict(zip(RESULT_HEADER, (setting_id, eps, scen, method, rep) + tuple(vals)), error=status)
                )
    return rows


def _cont_rng(s_cont, scenario):
    return np.random.default_rng(np.random.SeedSequence(s_cont.entropy, spawn_key=s_cont.spawn_key + (SCENARIOS.index(scenario),)))


def run_study(setting_ids, epsilons, scenarios=("info",), n_reps=1, seed=0, methods=METHODS, config=None, n_jobs=1):
    """Replication study; returns one row dict per (setting, eps, scenario, method, rep).

    Test data are always clean. For a given (setting, rep) the same clean
    training sample is contaminated at every epsilon, so conditions are paired.
    """
    config = EnetLTSConfig() if config is None else config
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    for s in setting_ids:
        make_setting(s)
    tasks = [
        (s, r, tuple(epsilons), tuple(scenarios), tuple(methods), seed, replace(config, n_jobs=1))
        for s in setting_ids
        for r in range(n_reps)
    ]
    if n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(run_replication, tasks))
    else:
        parts = [run_replication(t) for t in tasks]
    rows = [row for part in parts for row in part]
    order = {m: i for i, m in enumerate(methods)}
    rows.sort(key=lambda r: (r["setting"], r["epsilon"], SCENARIOS.index(r["scenario"]), order[r["method"]], r["rep"]))
    return rows


def aggregate(rows):
    """Mean and standard error of every metric per (setting, epsilon, scenario, method)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["setting"], r["epsilon"], r["scenario"], r["method"]), []).append(r)
    out = []
    for key, rs in groups.items():
        rec = dict(zip(("setting", "epsilon", "scenario", "method"), key))
        rec["n_reps"] = len(rs)
        for m in METRICS:
            v = np.array([r[m] for r in rs], dtype=float)
            v = v[np.isfinite(v)]
            rec[f"{m}_mean"] = float(v.mean()) if v.size else math.nan
            rec[f"{m}_se"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        out.append(rec)
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def write_rows(path, rows, header):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])
