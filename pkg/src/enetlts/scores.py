"""Score-space outlyingness per group: rank reduction, MCD and scaled robust distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.stats import chi2

RANK_TOL = 1e-8
RANK_FLOOR = 1e-12


class RankZeroError(ValueError):
    pass


class DegenerateDistanceError(ValueError):
    pass


class McdPreconditionError(ValueError):
    pass


def chi2_median(r: int) -> float:
    return float(chi2.ppf(0.5, r))


def score_matrix(B, X) -> np.ndarray:
    """Linear scores ``B[0] + X @ B[1:]`` (no softmax)."""
    B = np.asarray(B, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[1] != B.shape[0] - 1:
        raise ValueError("score_matrix: dimensions of X and B disagree")
    return B[0] + X @ B[1:]


@dataclass(frozen=True)
class ReducedScores:
    U: np.ndarray
    rank: int
    basis: np.ndarray
    center: np.ndarray
    singular_values: np.ndarray

    def project(self, Z) -> np.ndarray:
        return (np.asarray(Z, dtype=float) - self.center) @ self.basis


def reduce_rank(Z_group) -> ReducedScores:
    """SVD of a group's centered score block, keeping the non-negligible directions.

    ``U`` is returned as left singular vectors times singular values, that is
    the coordinates of each centered row in the retained right-singular basis,
    so Euclidean geometry of the rows is preserved on that subspace.
    """
    Z = np.asarray(Z_group, dtype=float)
    if Z.shape[0] < 2:
        raise ValueError("rank reduction needs at least two rows")
    center = Z.mean(axis=0)
    Zc = Z - center
    _, s, Vt = np.linalg.svd(Zc, full_matrices=False)
    scale = max(1.0, float(np.abs(Z).max()))
    if s[0] <= RANK_FLOOR * scale:
        raise RankZeroError("score block has no spread")
    r = int(np.sum(s > RANK_TOL * s[0]))
    V = Vt[:r].T
    return ReducedScores(U=Zc @ V, rank=r, basis=V, center=center, singular_values=s)


@dataclass(frozen=True)
class McdEstimate:
    location: np.ndarray
    scatter: np.ndarray
    support: np.ndarray
    det: float
    repaired: bool = False
    method: str = "mcd"


@njit(cache=True)
def _subset_moments(U, sel, mu, C):
    m, r = sel.size, U.shape[1]
    mu[:] = 0.0
    C[:, :] = 0.0
    for a in range(m):
        for i in range(r):
            mu[i] += U[sel[a], i]
    for i in range(r):
        mu[i] /= m
    for a in range(m):
        k = sel[a]
        for i in range(r):
            di = U[k, i] - mu[i]
            for j in range(i + 1):
                C[i, j] += di * (U[k, j] - mu[j])
    for i in range(r):
        for j in range(i + 1):
            C[i, j] /= m - 1
            C[j, i] = C[i, j]


@njit(cache=True)
def _cholesky(C, ridge, Lw):
    """Lower Cholesky factor of ``C + ridge*I`` into ``Lw``; returns log-det or -inf."""
    r = C.shape[0]
    ld = 0.0
    for j in range(r):
        s = C[j, j] + ridge
        for k in range(j):
            s -= Lw[j, k] * Lw[j, k]
        if not s > 0.0:
            return -np.inf
        Lw[j, j] = np.sqrt(s)
        ld += np.log(s)
        for i in range(j + 1, r):
            t = C[i, j]
            for k in range(j):
                t -= Lw[i, k] * Lw[j, k]
            Lw[i, j] = t / Lw[j, j]
    return ld


@njit(cache=True)
def _kth_smallest(buf, k):
    """k-th smallest value (0-based) of ``buf``; reorders ``buf`` in place."""
    lo, hi = 0, buf.size - 1
    while lo < hi:
        pivot = buf[(lo + hi) // 2]
        i, j = lo, hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                buf[i], buf[j] = buf[j], buf[i]
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            return buf[k]
    return buf[k]


@njit(cache=True)
def _moments2(U, sel):
    m = sel.size
    m0 = 0.0
    m1 = 0.0
    for a in range(m):
        m0 += U[sel[a], 0]
        m1 += U[sel[a], 1]
    m0 /= m
    m1 /= m
    c00 = 0.0
    c01 = 0.0
    c11 = 0.0
    for a in range(m):
        d0 = U[sel[a], 0] - m0
        d1 = U[sel[a], 1] - m1
        c00 += d0 * d0
        c01 += d0 * d1
        c11 += d1 * d1
    f = 1.0 / (m - 1)
    return m0, m1, c00 * f, c01 * f, c11 * f


@njit(cache=True)
def _select_h(d2, buf, h, out):
    # h smallest distances, ties resolved toward smaller index
    n = d2.size
    buf[:] = d2
    thr = _kth_smallest(buf, h - 1)
    below = 0
    for i in range(n):
        if d2[i] < thr:
            below += 1
    need_eq = h - below
    c = 0
    for i in range(n):
        v = d2[i]
        if v < thr or (v == thr and need_eq > 0):
            if v == thr:
                need_eq -= 1
            out[c] = i
            c += 1


@njit(cache=True)
def _cstep_one(U, sel, h, ridge, out, d2, buf, mu, C, Lw, y):
    """Concentrate one subset: rows of ``U`` closest to the moments of ``sel``.

    Writes the new sorted ``h``-subset into ``out`` and returns the
    log-determinant of its covariance (``-inf`` when singular).
    """
    n, r = U.shape
    if r == 2:
        m0, m1, c00, c01, c11 = _moments2(U, sel)
        a00 = c00 + ridge
        a11 = c11 + ridge
        det = a00 * a11 - c01 * c01
        for i in range(n):
            d0 = U[i, 0] - m0
            d1 = U[i, 1] - m1
            d2[i] = (a11 * d0 * d0 - 2.0 * c01 * d0 * d1 + a00 * d1 * d1) / det
        _select_h(d2, buf, h, out)
        m0, m1, c00, c01, c11 = _moments2(U, out)
        det = c00 * c11 - c01 * c01
        if c00 > 0.0 and det > 0.0:
            return np.log(det)
        return -np.inf
    _subset_moments(U, sel, mu, C)
    _cholesky(C, ridge, Lw)
    for i in range(n):
        # squared norm of L^{-1}(u - mu) by forward substitution
        acc = 0.0
        for a in range(r):
            t = U[i, a] - mu[a]
            for b in range(a):
                t -= Lw[a, b] * y[b]
            y[a] = t / Lw[a, a]
            acc += y[a] * y[a]
        d2[i] = acc
    _select_h(d2, buf, h, out)
    _subset_moments(U, out, mu, C)
    return _cholesky(C, 0.0, Lw)


@njit(cache=True)
def _mcd_search(U, starts, h, ridge, n_init_steps, n_keep, max_steps):
    S = starts.shape[0]
    n, r = U.shape
    d2 = np.empty(n)
    buf = np.empty(n)
    mu = np.empty(r)
    C = np.empty((r, r))
    Lw = np.zeros((r, r))
    y = np.empty(r)
    subs = np.empty((S, h), dtype=np.int64)
    tmp = np.empty(h, dtype=np.int64)
    ld = np.empty(S)
    for s in range(S):
        ld[s] = _cstep_one(U, starts[s], h, ridge, subs[s], d2, buf, mu, C, Lw, y)
        for _ in range(n_init_steps):
            tmp[:] = subs[s]
            ld[s] = _cstep_one(U, tmp, h, ridge, subs[s], d2, buf, mu, C, Lw, y)
    order = np.argsort(ld, kind="mergesort")
    # the n_keep best distinct candidates
    keep = np.empty((n_keep, h), dtype=np.int64)
    keep_ld = np.empty(n_keep)
    m = 0
    for s in order:
        dup = False
        for q in range(m):
            same = True
            for a in range(h):
                if keep[q, a] != subs[s, a]:
                    same = False
                    break
            if same:
                dup = True
                break
        if not dup:
            keep[m] = subs[s]
            keep_ld[m] = ld[s]
            m += 1
            if m == n_keep:
                break
    nxt = np.empty(h, dtype=np.int64)
    for q in range(m):
        for _ in range(max_steps):
            ldn = _cstep_one(U, keep[q], h, ridge, nxt, d2, buf, mu, C, Lw, y)
            same = True
            for a in range(h):
                if nxt[a] != keep[q, a]:
                    same = False
                    break
            if same or not ldn < keep_ld[q]:
                break
            keep[q] = nxt
            keep_ld[q] = ldn
    best = 0
    for q in range(1, m):
        if keep_ld[q] < keep_ld[best]:
            best = q
    return keep[best].copy()


def mcd_estimate(
    U,
    h_fraction: float = 0.75,
    rng: np.random.Generator | None = None,
    n_starts: int = 500,
    n_keep: int = 10,
    n_init_steps: int = 2,
    max_steps: int = 100,
) -> McdEstimate:
    """Approximate MCD by elemental resampling and concentration steps.

    ``n_starts`` random ``(r + 1)``-point subsets are grown to ``h`` points by
    Mahalanobis ranking and then concentrated ``n_init_steps`` times; the
    ``n_keep`` candidates with the smallest covariance determinant are then
    concentrated until the determinant stops decreasing. The support size is
    ``h = floor((n + 1) * h_fraction)``. No consistency factor is applied to
    the scatter.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    n, r = U.shape
    h = int(math.floor((n + 1) * h_fraction))
    h = min(h, n)
    if n <= r + 1 or h < r + 1:
        raise McdPreconditionError(f"MCD needs n > r + 1 and h >= r + 1 (n={n}, r={r}, h={h})")
    rng = np.random.default_rng() if rng is None else rng
    total = np.cov(U, rowvar=False, ddof=1).reshape(r, r)
    tr = float(np.trace(total))
    ridge = 1e-10 * (tr / r if tr > 0 else 1.0)

    if h == n:
        support = np.arange(n)
    else:
        starts = np.argpartition(rng.random((n_starts, n)), r, axis=1)[:, : r + 1]
        support = _mcd_search(
            U, np.ascontiguousarray(starts, dtype=np.int64), h, ridge, n_init_steps, n_keep, max_steps
        )

    sub = U[support]
    t = sub.mean(axis=0)
    C = np.cov(sub, rowvar=False, ddof=1).reshape(r, r)
    C = 0.5 * (C + C.T)
    det = float(np.linalg.det(C))
    repaired = False
    if not np.linalg.eigvalsh(C)[0] > 1e-14 * max(float(np.trace(C)), 1e-300):
        trC = float(np.trace(C))
        C = C + 1e-10 * (trC / r if trC > 0 else 1.0) * np.eye(r)
        repaired = True
    return McdEstimate(location=t, scatter=C, support=support, det=det, repaired=repaired)


def classical_estimate(U) -> McdEstimate:
    """Mean and covariance of all rows, ridge-repaired if singular."""
    U = np.asarray(U, dtype=float)
    n, r = U.shape
    t = U.mean(axis=0)
    C = np.cov(U, rowvar=False, ddof=1).reshape(r, r) if n > 1 else np.zeros((r, r))
    det = float(np.linalg.det(C))
    repaired = False
    if not np.linalg.eigvalsh(C)[0] > 1e-14 * max(float(np.trace(C)), 1e-300):
        trC = float(np.trace(C))
        C = C + 1e-10 * (trC / r if trC > 0 else 1.0) * np.eye(r)
        repaired = True
    return McdEstimate(t, C, np.arange(n), det, repaired, method="classical")


def mahalanobis(U, location, scatter) -> np.ndarray:
    D = np.asarray(U, dtype=float) - location
    sol = np.linalg.solve(scatter, D.T).T
    return np.sqrt(np.maximum(np.sum(D * sol, axis=1), 0.0))


def scaled_outlyingness(rd, r: int) -> np.ndarray:
    """Rescale distances so their median equals ``sqrt(chi2_{r, 0.5})``."""
    rd = np.asarray(rd, dtype=float)
    if rd.size == 0:
        raise ValueError("no distances to scale")
    if r < 1:
        raise ValueError("degrees of freedom must be >= 1")
    med = float(np.median(rd))
    if not med > 0:
        raise DegenerateDistanceError("median robust distance is zero")
    return rd * (math.sqrt(chi2_median(r)) / med)


@dataclass(frozen=True)
class GroupDistanceModel:
    """Everything needed to score new rows of one group in its reduced space."""

    rank: int
    center: np.ndarray
    basis: np.ndarray
    location: np.ndarray
    scatter: np.ndarray
    median_rd: float
    method: str = "mcd"
    repaired: bool = False

    @property
    def degenerate(self) -> bool:
        return self.rank == 0 or not self.median_rd > 0

    def distances(self, Zc):
        Zc = np.asarray(Zc, dtype=float)
        if self.rank == 0:
            z = np.zeros(Zc.shape[0])
            return z, z.copy()
        U = (Zc - self.center) @ self.basis
        rd = mahalanobis(U, self.location, self.scatter)
        if not self.median_rd > 0:
            return rd, np.zeros_like(rd)
        return rd, rd * (math.sqrt(chi2_median(self.rank)) / self.median_rd)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "center": self.center.tolist(),
            "basis": self.basis.tolist(),
            "location": self.location.tolist(),
            "scatter": self.scatter.tolist(),
            "median_rd": self.median_rd,
            "method": self.method,
            "repaired": self.repaired,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupDistanceModel":
        r = int(d["rank"])
        K = len(d["center"])
        return cls(
            rank=r,
            center=np.asarray(d["center"], dtype=float),
            basis=np.asarray(d["basis"], dtype=float).reshape(K, r),
            location=np.asarray(d["location"], dtype=float).reshape(r),
            scatter=np.asarray(d["scatter"], dtype=float).reshape(r, r),
            median_rd=float(d["median_rd"]),
            method=d.get("method", "mcd"),
            repaired=bool(d.get("repaired", False)),
        )


@dataclass(frozen=True)
class OutlyingnessReport:
    rd: np.ndarray
    rd_scaled: np.ndarray
    group: np.ndarray
    models: tuple = field(default=())


def centered_scores(B, X) -> np.ndarray:
    # removing each row's mean leaves the softmax unchanged and puts scores in
    # the (K - 1)-dimensional sum-zero subspace
    Z = score_matrix(B, X)
    return Z - Z.mean(axis=1, keepdims=True)


def group_distance_model(Zc_group, rng, h_fraction=0.75, mcd_starts=500) -> GroupDistanceModel:
    K = Zc_group.shape[1]
    try:
        red = reduce_rank(Zc_group)
    except RankZeroError:
        return GroupDistanceModel(0, np.zeros(K), np.zeros((K, 0)), np.zeros(0), np.zeros((0, 0)), 0.0)
    try:
        est = mcd_estimate(red.U, h_fraction, rng, n_starts=mcd_starts)
    except McdPreconditionError:
        est = classical_estimate(red.U)
    rd = mahalanobis(red.U, est.location, est.scatter)
    return GroupDistanceModel(
        rank=red.rank,
        center=red.center,
        basis=red.basis,
        location=est.location,
        scatter=est.scatter,
        median_rd=float(np.median(rd)),
        method=est.method,
        repaired=est.repaired,
    )


def groupwise_outlyingness(B, X, labels, rng, K=None, h_fraction=0.75, mcd_starts=500) -> OutlyingnessReport:
    """Robust and scaled robust distances of every observation within its own group.

    Groups whose score block has no spread, or whose median distance is
    zero, get all scaled distances equal to zero.
    """
    labels = np.asarray(labels)
    K = int(labels.max()) if K is None else K
    Zc = centered_scores(B, X)
    n = Zc.shape[0]
    rd = np.zeros(n)
    rds = np.zeros(n)
    models = []
    for l in range(1, K + 1):
        g = np.flatnonzero(labels == l)
        if g.size < 3:
            raise ValueError(f"group {l} has {g.size} observations; need more than 2")
        model = group_distance_model(Zc[g], rng, h_fraction, mcd_starts)
        rd[g], rds[g] = model.distances(Zc[g])
        models.append(model)
    return OutlyingnessReport(rd=rd, rd_scaled=rds, group=labels.copy(), models=tuple(models))
