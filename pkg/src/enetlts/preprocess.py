"""Column standardization and coefficient back-transformation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAD_CONSISTENCY = 1.4826
SCALE_EPS = 1e-12


@dataclass(frozen=True)
class ScalingInfo:
    centers: np.ndarray
    scales: np.ndarray
    kind: str
    constant: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.centers) / self.scales

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "centers": self.centers.tolist(),
            "scales": self.scales.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingInfo":
        return cls(
            centers=np.asarray(d["centers"], dtype=float),
            scales=np.asarray(d["scales"], dtype=float),
            kind=d["kind"],
            constant=np.asarray(d["constant"], dtype=bool),
        )


def negligible_scale(X, scales):
    """True where a column's scale is zero up to rounding of its values."""
    mag = np.abs(X).max(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    return ~(scales > SCALE_EPS * mag)


def _finish(X, centers, scales, kind):
    # zero scale: fall back to the sample sd, then to 1 with a constant flag
    bad = negligible_scale(X, scales)
    if np.any(bad):
        sd = X[:, bad].std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(bad.sum())
        scales = scales.copy()
        scales[bad] = sd
    constant = negligible_scale(X, scales)
    scales = np.where(constant, 1.0, scales)
    info = ScalingInfo(centers=centers, scales=scales, kind=kind, constant=constant)
    return info


def robust_standardize(X):
    """Center columns by the median and scale by the (normal-consistent) MAD."""
    X = np.asarray(X, dtype=float)
    centers = np.median(X, axis=0)
    scales = MAD_CONSISTENCY * np.median(np.abs(X - centers), axis=0)
    info = _finish(X, centers, scales, "robust")
    return info.apply(X), info


def subset_standardize(X, H):
    """Mean/sd standardization with statistics taken from rows ``H`` only.

    The transform is applied to every row of ``X``.
    """
    X = np.asarray(X, dtype=float)
    H = np.asarray(H)
    if H.size < 2:
        raise ValueError("subset standardization needs at least 2 rows")
    XH = X[H]
    centers = XH.mean(axis=0)
    scales = XH.std(axis=0, ddof=1)
    info = _finish(XH, centers, scales, "classical")
    return info.apply(X), info


def backtransform(beta_std, info: ScalingInfo) -> np.ndarray:
    """Map coefficients fitted on standardized predictors to the raw scale.

    Row 0 holds intercepts. The linear scores are preserved exactly:
    ``[1, x] @ B_raw == [1, (x - c) / s] @ B_std`` for every ``x``.
    """
    beta_std = np.asarray(beta_std, dtype=float)
    if beta_std.shape[0] != info.scales.size + 1:
        raise ValueError(
            f"coefficient matrix has {beta_std.shape[0] - 1} slope rows, "
            f"scaling has {info.scales.size} columns"
        )
    slopes = beta_std[1:] / info.scales[:, None]
    intercept = beta_std[0] - info.centers @ slopes
    return np.vstack([intercept, slopes])


def forward_transform(beta_raw, info: ScalingInfo) -> np.ndarray:
    """Inverse of :func:`backtransform`."""
    beta_raw = np.asarray(beta_raw, dtype=float)
    if beta_raw.shape[0] != info.scales.size + 1:
        raise ValueError("dimension mismatch between coefficients and scaling")
    slopes = beta_raw[1:] * info.scales[:, None]
    intercept = beta_raw[0] + info.centers @ beta_raw[1:]
    return np.vstack([intercept, slopes])
