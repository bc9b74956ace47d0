"""Dataset container, indicator responses and group-stratified bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidLabelError(ValueError):
    pass


class InfeasibleQuotaError(ValueError):
    pass


class DegenerateFoldError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Predictor matrix with 1-based integer class labels.

    ``group_indexes[l]`` holds the row indexes of class ``l + 1``.
    """

    X: np.ndarray
    labels: np.ndarray
    K: int
    group_counts: np.ndarray = field(init=False)
    group_indexes: tuple = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        labels = np.asarray(self.labels)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if labels.shape != (X.shape[0],):
            raise ValueError("labels must have one entry per row of X")
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise ValueError(f"non-finite entry in X at row {bad[0]}, column {bad[1]}")
        _check_labels(labels, self.K)
        labels = labels.astype(np.int64)
        groups = tuple(np.flatnonzero(labels == l) for l in range(1, self.K + 1))
        counts = np.array([len(g) for g in groups], dtype=np.int64)
        if np.any(counts == 0):
            empty = int(np.flatnonzero(counts == 0)[0]) + 1
            raise InvalidLabelError(f"class {empty} has no observations")
        X.setflags(write=False)
        labels.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "group_counts", counts)
        object.__setattr__(self, "group_indexes", groups)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_arrays(cls, X, labels, K=None) -> "Dataset":
        labels = np.asarray(labels)
        if K is None:
            K = int(labels.max())
        return cls(X=X, labels=labels, K=K)


def _check_labels(labels: np.ndarray, K: int) -> None:
    if labels.size == 0:
        raise InvalidLabelError("labels are empty")
    as_int = np.asarray(labels)
    if not np.issubdtype(as_int.dtype, np.integer):
        if not np.all(np.mod(as_int, 1) == 0):
            i = int(np.flatnonzero(np.mod(as_int, 1) != 0)[0])
            raise InvalidLabelError(f"label at index {i} is not an integer: {labels[i]!r}")
    bad = np.flatnonzero((as_int < 1) | (as_int > K))
    if bad.size:
        i = int(bad[0])
        raise InvalidLabelError(f"label at index {i} is {labels[i]!r}, outside 1..{K}")


def indicator_matrix(labels, K: int) -> np.ndarray:
    """0/1 matrix with ``Y[i, l-1] == 1`` iff ``labels[i] == l``."""
    labels = np.asarray(labels)
    _check_labels(labels, K)
    Y = np.zeros((labels.size, K))
    Y[np.arange(labels.size), labels.astype(np.int64) - 1] = 1.0
    return Y


@dataclass(frozen=True)
class GroupQuota:
    h: int
    sizes: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.int64)
        sizes.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)


def stratified_sizes(group_counts, h: int) -> GroupQuota:
    """Per-group subset sizes ``floor((n_l + 1) h / n)``, adjusted to sum to ``h``.

    Each size is capped at the group's count; the last group absorbs the
    remainder, and any excess over its count goes back to the earlier groups
    in order, up to their counts.

    Raises
    ------
    InfeasibleQuotaError
        If any group ends up with fewer than one observation.
    """
    counts = np.asarray(group_counts, dtype=np.int64)
    n = int(counts.sum())
    if counts.size < 2:
        raise ValueError("at least two groups are required")
    if not 1 <= h <= n:
        raise ValueError(f"subset size h={h} outside 1..{n}")
    sizes = np.minimum((counts + 1) * h // n, counts)
    sizes[-1] = h - sizes[:-1].sum()
    excess = sizes[-1] - counts[-1]
    if excess > 0:
        sizes[-1] = counts[-1]
        for l in range(counts.size - 1):
            add = min(excess, counts[l] - sizes[l])
            sizes[l] += add
            excess -= add
    if np.any(sizes < 1):
        l = int(np.flatnonzero(sizes < 1)[0]) + 1
        raise InfeasibleQuotaError(
            f"group {l} receives quota {sizes[l - 1]} for h={h}; increase h"
        )
    return GroupQuota(h=int(h), sizes=sizes)


def stratified_folds(subset_labels, k: int, rng: np.random.Generator) -> np.ndarray:
    """Assign each observation to one of ``k`` folds (0-based), stratified by label.

    Within each group the members are shuffled and dealt round-robin onto a
    shuffled fold order, so per-group fold counts differ by at most one.
    """
    subset_labels = np.asarray(subset_labels)
    if k < 2:
        raise ValueError("need at least 2 folds")
    folds = np.empty(subset_labels.size, dtype=np.int64)
    for lab in np.unique(subset_labels):
        members = np.flatnonzero(subset_labels == lab)
        if members.size < k:
            raise DegenerateFoldError(
                f"group {lab} has {members.size} members, fewer than {k} folds"
            )
        order = rng.permutation(k)
        members = rng.permutation(members)
        folds[members] = order[np.arange(members.size) % k]
    return folds
