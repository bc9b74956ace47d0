"""CSV ingestion, prediction/diagnostic tables and the JSON model file."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .estimator import ModelFit
from .preprocess import ScalingInfo
from .scores import GroupDistanceModel, centered_scores
from .solver import deviances, predict_proba

SCHEMA = "enetlts-model/1"


class CsvFormatError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Table:
    columns: list
    rows: list


def read_table(path) -> Table:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        if len(set(header)) != len(header):
            dup = sorted({c for c in header if header.count(c) > 1})
            raise CsvFormatError(f"{path}: duplicate column names {dup}")
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise CsvFormatError(f"{path}: data row {i} has {len(rec)} fields, header has {len(header)}")
            rows.append([c.strip() for c in rec])
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return Table(header, rows)


def numeric_block(table: Table, columns, path="<data>") -> np.ndarray:
    idx = [table.columns.index(c) for c in columns]
    X = np.empty((len(table.rows), len(idx)))
    for i, rec in enumerate(table.rows):
        for j, k in enumerate(idx):
            try:
                v = float(rec[k])
            except ValueError:
                raise CsvFormatError(
                    f"{path}: non-numeric value {rec[k]!r} at data row {i + 1}, column {columns[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise CsvFormatError(f"{path}: non-finite value at data row {i + 1}, column {columns[j]!r}")
            X[i, j] = v
    return X


def label_mapping(values) -> list:
    """Distinct label strings in order of first appearance; position + 1 is the class code."""
    return list(dict.fromkeys(values))


def load_training(path, label_column: str):
    """Read a training CSV; returns (Dataset, feature names, label strings)."""
    table = read_table(path)
    if label_column not in table.columns:
        raise SchemaMismatchError(f"{path}: label column {label_column!r} not found; columns are {table.columns}")
    features = [c for c in table.columns if c != label_column]
    if not features:
        raise SchemaMismatchError(f"{path}: no predictor columns besides {label_column!r}")
    X = numeric_block(table, features, path)
    li = table.columns.index(label_column)
    raw = [rec[li] for rec in table.rows]
    for i, v in enumerate(raw, start=1):
        if v == "":
            raise CsvFormatError(f"{path}: empty label at data row {i}, column {label_column!r}")
    classes = label_mapping(raw)
    code = {v: k + 1 for k, v in enumerate(classes)}
    labels = np.array([code[v] for v in raw], dtype=np.int64)
    counts = np.bincount(labels, minlength=len(classes) + 1)[1:]
    for c, cnt in zip(classes, counts):
        if cnt < 2:
            raise CsvFormatError(f"{path}: class {c!r} has {cnt} observation; at least 2 are required")
    return Dataset(X=X, labels=labels, K=len(classes)), features, classes


def load_features(path, features, label_column=None, need_labels=False, classes=None):
    """Read new data in the training schema; returns (X, labels or None)."""
    table = read_table(path)
    allowed = set(features) | ({label_column} if label_column else set())
    missing = [c for c in features if c not in table.columns]
    extra = [c for c in table.columns if c not in allowed]
    if missing or extra:
        raise SchemaMismatchError(f"{path}: columns do not match the model; missing {missing}, extra {extra}")
    X = numeric_block(table, features, path)
    labels = None
    if label_column in table.columns and classes is not None:
        li = table.columns.index(label_column)
        code = {v: k + 1 for k, v in enumerate(classes)}
        labels = np.empty(len(table.rows), dtype=np.int64)
        for i, rec in enumerate(table.rows):
            if rec[li] not in code:
                raise CsvFormatError(f"{path}: unknown label {rec[li]!r} at data row {i + 1}, column {label_column!r}")
            labels[i] = code[rec[li]]
    if need_labels and labels is None:
        raise SchemaMismatchError(f"{path}: label column {label_column!r} is required")
    return X, labels


def _fmt(v) -> str:
    # repr of a float round-trips exactly (17 significant digits at most)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def atomic_write_text(path, text: str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class StoredModel:
    """A fitted model as read back from disk: enough to predict and score."""

    classes: list
    features: list
    label_column: str
    coef: np.ndarray
    coef_raw: np.ndarray
    alpha_opt: float
    lambda_opt: float
    lambda_upd: float
    weights: np.ndarray
    rd: np.ndarray
    rd_scaled: np.ndarray
    subset: np.ndarray
    scaling: ScalingInfo
    group_models: tuple
    c2: float
    converged: bool
    config: dict
    seed: int
    notes: list

    @property
    def K(self) -> int:
        return len(self.classes)

    def predict_proba(self, X, raw=False) -> np.ndarray:
        return predict_proba(self.coef_raw if raw else self.coef, X)

    def predict(self, X, raw=False) -> np.ndarray:
        return np.argmax(self.predict_proba(X, raw), axis=1) + 1

    def outlyingness(self, X, labels):
        """(rd, rd_scaled, weights, deviance) for rows with known labels, at the raw fit."""
        Zc = centered_scores(self.coef_raw, X)
        rd = np.zeros(X.shape[0])
        rds = np.zeros(X.shape[0])
        for l, model in enumerate(self.group_models, start=1):
            g = np.flatnonzero(labels == l)
            if g.size:
                rd[g], rds[g] = model.distances(Zc[g])
        w = (rds <= self.c2).astype(float)
        Y = np.eye(self.K)[labels - 1]
        return rd, rds, w, deviances(self.coef_raw, X, Y)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "classes": list(self.classes),
            "label_column": self.label_column,
            "features": list(self.features),
            "alpha_opt": self.alpha_opt,
            "lambda_opt": self.lambda_opt,
            "lambda_upd": self.lambda_upd,
            "coef": self.coef.tolist(),
            "coef_raw": self.coef_raw.tolist(),
            "weights": self.weights.tolist(),
            "rd": self.rd.tolist(),
            "rd_scaled": self.rd_scaled.tolist(),
            "subset": [int(i) for i in self.subset],
            "scaling": self.scaling.to_dict(),
            "group_models": [m.to_dict() for m in self.group_models],
            "c2": self.c2,
            "converged": bool(self.converged),
            "config": self.config,
            "seed": self.seed,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StoredModel":
        if d.get("schema") != SCHEMA:
            raise SchemaMismatchError(f"unsupported model schema {d.get('schema')!r}; expected {SCHEMA!r}")
        K = len(d["classes"])
        p = len(d["features"])
        coef = np.asarray(d["coef"], dtype=float).reshape(p + 1, K)
        coef_raw = np.asarray(d["coef_raw"], dtype=float).reshape(p + 1, K)
        return cls(
            classes=list(d["classes"]),
            features=list(d["features"]),
            label_column=d["label_column"],
            coef=coef,
            coef_raw=coef_raw,
            alpha_opt=float(d["alpha_opt"]),
            lambda_opt=float(d["lambda_opt"]),
            lambda_upd=float(d["lambda_upd"]),
            weights=np.asarray(d["weights"], dtype=float),
            rd=np.asarray(d["rd"], dtype=float),
            rd_scaled=np.asarray(d["rd_scaled"], dtype=float),
            subset=np.asarray(d["subset"], dtype=np.int64),
            scaling=ScalingInfo.from_dict(d["scaling"]),
            group_models=tuple(GroupDistanceModel.from_dict(m) for m in d["group_models"]),
            c2=float(d["c2"]),
            converged=bool(d["converged"]),
            config=d["config"],
            seed=int(d["seed"]),
            notes=list(d.get("notes", [])),
        )

    @classmethod
    def from_fit(cls, fit: ModelFit, classes, features, label_column) -> "StoredModel":
        rep = fit.diagnostics
        return cls(
            classes=list(classes),
            features=list(features),
            label_column=label_column,
            coef=fit.coef,
            coef_raw=fit.coef_raw,
            alpha_opt=fit.alpha_opt,
            lambda_opt=fit.lambda_opt,
            lambda_upd=fit.lambda_upd,
            weights=fit.weights,
            rd=rep.rd,
            rd_scaled=rep.rd_scaled,
            subset=fit.subset,
            scaling=fit.scaling,
            # raw-fit scores on original X equal those on the robust scale
            group_models=tuple(rep.models),
            c2=fit.config.c2,
            converged=fit.converged,
            config=fit.config.to_dict(),
            seed=fit.config.seed,
            notes=list(fit.notes),
        )


def write_model(path, model: StoredModel):
    atomic_write_text(path, json.dumps(model.to_dict(), indent=1) + "\n")


def read_model(path) -> StoredModel:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatchError(f"{path}: not a model file ({exc})") from None
    return StoredModel.from_dict(d)
