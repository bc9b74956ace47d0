"""Elastic-net penalized multinomial likelihood.

Coefficient matrices are ``(p + 1, K)`` arrays; row 0 holds the intercepts,
which are never penalized. The objective minimized everywhere is

    Q(B) = (1 / sum(w)) * sum_i w_i d_i(B) + lam * P_alpha(B)

with ``d_i`` the multinomial deviance contribution (negative log-probability
of the observed class) and ``P_alpha`` the elastic net penalty on the slopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-300


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class PenaltyParams:
    alpha: float
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if not self.lam >= 0.0:
            raise ValueError(f"lambda={self.lam} must be non-negative")


@dataclass(frozen=True)
class SolverControls:
    kkt_tol: float = 1e-6
    rel_tol: float = 1e-15
    max_iter: int = 10_000


@dataclass
class SolverResult:
    coef: np.ndarray
    converged: bool
    n_iter: int
    objective: float
    kkt: float
    trace: list | None = None


def add_intercept(X: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((X.shape[0], 1)), X])


def penalty_value(B, alpha: float) -> float:
    S = np.asarray(B)[1:]
    return float((1.0 - alpha) * 0.5 * np.sum(S * S) + alpha * np.sum(np.abs(S)))


def _log_softmax(Z):
    zmax = Z.max(axis=1, keepdims=True)
    shifted = Z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def predict_proba(B, X) -> np.ndarray:
    B = np.asarray(B, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != B.shape[0] - 1:
        raise ValueError(f"X has {X.shape[1]} columns, coefficients expect {B.shape[0] - 1}")
    Z = B[0] + X @ B[1:]
    if not np.all(np.isfinite(Z)):
        row = int(np.flatnonzero(~np.all(np.isfinite(Z), axis=1))[0])
        raise FloatingPointError(f"non-finite linear score in row {row}")
    zmax = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - zmax)
    return E / E.sum(axis=1, keepdims=True)


def deviances(B, X, Y) -> np.ndarray:
    P = predict_proba(B, X)
    return -np.log(np.maximum(np.sum(P * Y, axis=1), PROB_FLOOR))


def objective_value(X, Y, B, params: PenaltyParams, subset=None) -> float:
    d = deviances(B, X, Y)
    if subset is not None:
        subset = np.asarray(subset)
        if subset.size == 0:
            raise ValueError("subset is empty")
        d = d[subset]
    return float(d.mean() + params.lam * penalty_value(B, params.alpha))


def _prepare_weights(Y, weights):
    n, K = Y.shape
    if weights is None:
        return None, n
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise SolverError("weights must have one entry per observation")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise SolverError("weights must be finite and non-negative")
    nw = int(np.count_nonzero(w))
    return w, nw


def nll_gradient(B, X1, Y, w=None):
    """Weighted mean NLL and its gradient; ``X1`` includes the intercept column."""
    Z = X1 @ B
    logP = _log_softmax(Z)
    P = np.exp(logP)
    R = P - Y
    if w is None:
        m = X1.shape[0]
        f = -np.sum(logP * Y) / m
        G = X1.T @ R / m
    else:
        sw = w.sum()
        f = -np.sum((logP * Y).sum(axis=1) * w) / sw
        G = X1.T @ (R * w[:, None]) / sw
    return f, G


def _kkt(B, G, lam, alpha):
    """Subgradient-condition violation given the NLL gradient ``G``."""
    S = B[1:]
    GS = G[1:] + lam * (1.0 - alpha) * S
    thr = lam * alpha
    nz = S != 0
    viol = np.where(nz, np.abs(GS + thr * np.sign(S)), np.maximum(0.0, np.abs(GS) - thr))
    res = float(viol.max()) if viol.size else 0.0
    return max(res, float(np.abs(G[0]).max()))


def kkt_residual(X, Y, B, params: PenaltyParams, weights=None) -> float:
    X1 = add_intercept(np.asarray(X, dtype=float))
    w, _ = _prepare_weights(Y, weights)
    _, G = nll_gradient(np.asarray(B, dtype=float), X1, np.asarray(Y, dtype=float), w)
    return _kkt(np.asarray(B, dtype=float), G, params.lam, params.alpha)


def null_coef(Y, p: int, weights=None) -> np.ndarray:
    """Intercept-only coefficients reproducing the (weighted) class proportions."""
    Y = np.asarray(Y, dtype=float)
    w = np.ones(Y.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    props = w @ Y
    if np.any(props <= 0):
        l = int(np.flatnonzero(props <= 0)[0]) + 1
        raise SolverError(f"class {l} has no observation with positive weight")
    b0 = np.log(props / props.sum())
    B = np.zeros((p + 1, Y.shape[1]))
    B[0] = b0 - b0.mean()
    return B


def lambda_max(X, Y, alpha: float, weights=None) -> float:
    """Smallest lambda at which the all-zero-slope model satisfies the KKT conditions."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    B0 = null_coef(Y, X.shape[1], weights)
    w, _ = _prepare_weights(Y, weights)
    _, G = nll_gradient(B0, add_intercept(X), Y, w)
    gmax = float(np.abs(G[1:]).max()) if X.shape[1] else 0.0
    return gmax / max(alpha, 1e-3)


def _soft_threshold(V, t):
    return np.sign(V) * np.maximum(np.abs(V) - t, 0.0)


def fit_penalized(
    X,
    Y,
    params: PenaltyParams,
    weights=None,
    init=None,
    controls: SolverControls = SolverControls(),
    record_trace: bool = False,
) -> SolverResult:
    """Minimize the weighted elastic-net multinomial objective.

    Accelerated proximal gradient with function-value restarts: every
    accepted iterate has an objective no larger than the previous one. The
    step size adapts by backtracking on the quadratic upper bound of the
    smooth part (mean NLL plus ridge term), with a mild optimistic increase
    after each successful step.

    Returns the final iterate with intercepts re-centered to sum to zero;
    ``converged`` is false if ``max_iter`` was hit first.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    K = Y.shape[1]
    w, nw = _prepare_weights(Y, weights)
    if nw < 2 * K:
        raise SolverError(f"{nw} observations with nonzero weight; need at least {2 * K}")
    if w is not None:
        keep = w > 0
        X, Y, w = X[keep], Y[keep], w[keep]
        if np.all(w == 1.0):
            w = None
    X1 = add_intercept(X)
    lam, alpha = params.lam, params.alpha
    ridge = lam * (1.0 - alpha)
    thr = lam * alpha

    if init is None:
        B = null_coef(Y, p, w)
    else:
        B = np.array(init, dtype=float, copy=True)
        if B.shape != (p + 1, K):
            raise SolverError(f"warm start has shape {B.shape}, expected {(p + 1, K)}")
        if not np.all(np.isfinite(B)):
            raise SolverError("warm start contains non-finite entries")

    def smooth(Bv):
        f, G = nll_gradient(Bv, X1, Y, w)
        S = Bv[1:]
        f += 0.5 * ridge * float(np.sum(S * S))
        G[1:] += ridge * S
        return f, G

    def prox(V, step):
        out = V.copy()
        out[1:] = _soft_threshold(V[1:], step * thr)
        return out

    fx, Gx = smooth(B)
    Fx = fx + thr * float(np.abs(B[1:]).sum())
    kkt = _kkt_from_smooth(B, Gx, thr)
    trace = [Fx] if record_trace else None
    if kkt <= controls.kkt_tol:
        return SolverResult(_center(B), True, 0, Fx, kkt, trace)

    # curvature bound of the multinomial NLL: 0.5 * ||X1||_2^2 / m
    if w is None:
        L = 0.5 * np.linalg.norm(X1, 2) ** 2 / X1.shape[0] + ridge
    else:
        L = 0.5 * np.linalg.norm(X1 * np.sqrt(w / w.sum())[:, None], 2) ** 2 + ridge
    L = max(L * 0.25, 1e-12)

    x = B
    y_pt, fy, Gy = B, fx, Gx
    t = 1.0
    converged = False
    it = 0
    for it in range(1, controls.max_iter + 1):
        while True:
            z = prox(y_pt - Gy / L, 1.0 / L)
            D = z - y_pt
            fz, Gz = smooth(z)
            if fz <= fy + float(np.sum(Gy * D)) + 0.5 * L * float(np.sum(D * D)) + 1e-15 * abs(fy):
                break
            L *= 2.0
        Fz = fz + thr * float(np.abs(z[1:]).sum())
        if Fz > Fx:
            # restart the momentum from the last accepted point
            t = 1.0
            y_pt, fy, Gy = x, fx, Gx
            if np.sum(D * D) == 0.0:
                break
            continue
        rel = abs(Fx - Fz) / max(abs(Fx), 1e-300)
        x_prev = x
        x, fx, Gx, Fx = z, fz, Gz, Fz
        if record_trace:
            trace.append(Fx)
        kkt = _kkt_from_smooth(x, Gx, thr)
        if kkt <= controls.kkt_tol:
            converged = True
            break
        if rel <= controls.rel_tol:
            # objective at machine precision; no further progress possible
            converged = kkt <= 100.0 * controls.kkt_tol
            break
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y_pt = x + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        fy, Gy = smooth(y_pt)
        L *= 0.9
    return SolverResult(_center(x), converged, it, Fx, kkt, trace)


def _kkt_from_smooth(B, G_smooth, thr):
    S = B[1:]
    GS = G_smooth[1:]
    nz = S != 0
    viol = np.where(nz, np.abs(GS + thr * np.sign(S)), np.maximum(0.0, np.abs(GS) - thr))
    res = float(viol.max()) if viol.size else 0.0
    return max(res, float(np.abs(G_smooth[0]).max()))


def _center(B):
    B = B.copy()
    B[0] -= B[0].mean()
    return B
