"""Prediction logs, feature matrices and their on-disk formats.

predictions.csv::

    id,y_true,y_pred,conf,group[,p0,...,p{m-1}]

features.csv::

    id,f0,...,f{d-1}

A raw float32 feature file is row-major little-endian with a JSON sidecar
``{"n": N, "d": D}``; rows follow prediction order.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PRED_COLUMNS = ("id", "y_true", "y_pred", "conf", "group")
SIMPLEX_TOL = 1e-6


class SchemaError(ValueError):
    """A required column is missing or the header is malformed."""


class ValidationError(ValueError):
    """A value violates a data invariant."""


class AlignmentError(ValidationError):
    """Feature rows and prediction records do not line up."""


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    y_true: int
    y_pred: int
    conf: float
    probs: tuple[float, ...] | None = None
    group: str | None = None

    @property
    def correct(self) -> bool:
        return self.y_true == self.y_pred


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(v)):
            bad = int(np.argwhere(~np.isfinite(v))[0, 0])
            raise ValidationError(f"non-finite feature value in row {bad}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable view of a prediction log.

    ``features`` is optional because global metrics and most baselines never
    look at it.
    """

    ids: tuple[str, ...]
    y_true: np.ndarray
    y_pred: np.ndarray
    conf: np.ndarray
    m: int
    probs: np.ndarray | None = None
    groups: tuple[str | None, ...] | None = None
    features: FeatureMatrix | None = None
    _id_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        yt = np.asarray(self.y_true, dtype=np.int64)
        yp = np.asarray(self.y_pred, dtype=np.int64)
        c = np.asarray(self.conf, dtype=np.float64)
        if yt.shape != (n,) or yp.shape != (n,) or c.shape != (n,):
            raise ValueError("label and confidence arrays must match ids in length")
        index = {}
        for i, rid in enumerate(self.ids):
            if rid in index:
                raise ValidationError(f"duplicate id {rid!r}")
            index[rid] = i
        if np.any(~((c >= 0.0) & (c <= 1.0))):
            i = int(np.argwhere(~((c >= 0.0) & (c <= 1.0)))[0, 0])
            raise ValidationError(f"conf outside [0,1] for id {self.ids[i]!r}")
        if n and (yt.min() < 0 or yp.min() < 0 or yt.max() >= self.m or yp.max() >= self.m):
            raise ValidationError(f"class index outside 0..{self.m - 1}")
        probs = self.probs
        if probs is not None:
            probs = np.asarray(probs, dtype=np.float64)
            if probs.shape != (n, self.m):
                raise ValueError(f"probs must have shape ({n}, {self.m})")
            probs.setflags(write=False)
        groups = tuple(self.groups) if self.groups is not None else (None,) * n
        if len(groups) != n:
            raise ValueError("groups must match ids in length")
        if self.features is not None and self.features.n != n:
            raise AlignmentError(f"{self.features.n} feature rows for {n} records")
        for a in (yt, yp, c):
            a.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "y_true", yt)
        object.__setattr__(self, "y_pred", yp)
        object.__setattr__(self, "conf", c)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "_id_index", index)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def correct(self) -> np.ndarray:
        """Accuracy indicator per record, as float64 0/1."""
        return (self.y_true == self.y_pred).astype(np.float64)

    @property
    def has_groups(self) -> bool:
        return any(g is not None for g in self.groups)

    def index_of(self, rid: str) -> int:
        return self._id_index[rid]

    def records(self) -> list[PredictionRecord]:
        out = []
        for i, rid in enumerate(self.ids):
            p = tuple(float(x) for x in self.probs[i]) if self.probs is not None else None
            out.append(PredictionRecord(rid, int(self.y_true[i]), int(self.y_pred[i]),
                                        float(self.conf[i]), p, self.groups[i]))
        return out

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        feats = FeatureMatrix(self.features.values[idx]) if self.features is not None else None
        return Dataset(
            ids=tuple(self.ids[i] for i in idx),
            y_true=self.y_true[idx],
            y_pred=self.y_pred[idx],
            conf=self.conf[idx],
            m=self.m,
            probs=self.probs[idx] if self.probs is not None else None,
            groups=tuple(self.groups[i] for i in idx),
            features=feats,
        )

    def with_conf(self, conf, probs=None) -> "Dataset":
        return replace(self, conf=np.asarray(conf, dtype=np.float64),
                       probs=self.probs if probs is None else probs, _id_index=None)

    def with_features(self, features: FeatureMatrix | np.ndarray | None) -> "Dataset":
        if features is not None and not isinstance(features, FeatureMatrix):
            features = FeatureMatrix(features)
        return replace(self, features=features, _id_index=None)


def dataset_from_records(records: Sequence[PredictionRecord], m: int | None = None,
                         features=None) -> Dataset:
    """Build a :class:`Dataset`, validating each record."""
    has_probs = bool(records) and all(r.probs is not None for r in records)
    if m is None:
        if has_probs:
            m = len(records[0].probs)
        else:
            m = max([2] + [max(r.y_true, r.y_pred) + 1 for r in records])
    for r in records:
        _check_record(r, m)
    probs = np.array([r.probs for r in records], dtype=np.float64) if has_probs else None
    if features is not None and not isinstance(features, FeatureMatrix):
        features = FeatureMatrix(features)
    return Dataset(
        ids=tuple(r.id for r in records),
        y_true=np.array([r.y_true for r in records], dtype=np.int64),
        y_pred=np.array([r.y_pred for r in records], dtype=np.int64),
        conf=np.array([r.conf for r in records], dtype=np.float64),
        m=m,
        probs=probs,
        groups=tuple(r.group for r in records),
        features=features,
    )


def _check_record(r: PredictionRecord, m: int) -> None:
    if not (0.0 <= r.conf <= 1.0):
        raise ValidationError(f"row {r.id!r}: conf {r.conf} outside [0,1]")
    for name, y in (("y_true", r.y_true), ("y_pred", r.y_pred)):
        if not 0 <= y < m:
            raise ValidationError(f"row {r.id!r}: {name}={y} outside 0..{m - 1}")
    if r.probs is None:
        return
    p = np.asarray(r.probs, dtype=float)
    if p.size != m:
        raise ValidationError(f"row {r.id!r}: {p.size} probabilities for {m} classes")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValidationError(f"row {r.id!r}: probabilities are not on the simplex")
    if abs(p.max() - r.conf) > SIMPLEX_TOL:
        raise ValidationError(f"row {r.id!r}: conf {r.conf} != max(probs) {p.max()}")
    if int(np.argmax(p)) != r.y_pred:
        raise ValidationError(f"row {r.id!r}: y_pred {r.y_pred} != argmax(probs)")


# --------------------------------------------------------------------------
# CSV ingestion


def _strip_trailing_empty(row: list[str], width: int) -> list[str]:
    while len(row) > width and row[-1].strip() == "":
        row = row[:-1]
    return row


def load_predictions(path, n_classes: int | None = None) -> Dataset:
    """Read a predictions CSV into a validated :class:`Dataset`.

    Probability columns ``p0..p{m-1}`` are optional. A row whose probability
    fields are all blank carries no probabilities; the dataset exposes
    ``probs`` only when every row has them.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        for col in PRED_COLUMNS:
            if col not in header and not (col == "group"):
                raise SchemaError(f"{path}: missing column {col!r}")
        pos = {h: i for i, h in enumerate(header)}
        pcols = []
        while f"p{len(pcols)}" in pos:
            pcols.append(pos[f"p{len(pcols)}"])
        width = len(header)
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            row = _strip_trailing_empty(row, width)
            row = row + [""] * (width - len(row))
            if len(row) != width:
                raise SchemaError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            rid = row[pos["id"]].strip()
            try:
                yt = int(row[pos["y_true"]])
                yp = int(row[pos["y_pred"]])
                conf = float(row[pos["conf"]])
            except ValueError as exc:
                raise ValidationError(f"row {rid!r}: {exc}") from None
            group = row[pos["group"]].strip() if "group" in pos else ""
            raw = [row[i].strip() for i in pcols]
            probs = None
            if any(raw):
                try:
                    probs = tuple(float(x) for x in raw)
                except ValueError:
                    raise ValidationError(f"row {rid!r}: incomplete probability vector") from None
            if not (0.0 <= conf <= 1.0):
                raise ValidationError(f"row {rid!r}: conf {conf} outside [0,1]")
            records.append(PredictionRecord(rid, yt, yp, conf, probs, group or None))
    m = n_classes
    if m is None and pcols:
        m = len(pcols)
    return dataset_from_records(records, m=m)


def load_features(path, fmt: str | None = None, ids: Sequence[str] | None = None,
                  descriptor=None) -> FeatureMatrix:
    """Load a feature matrix, reordered to ``ids`` when given.

    ``fmt`` is ``"csv"`` or ``"raw-f32"``; inferred from the suffix if omitted.
    Raw files carry no ids, so their rows must already be in record order.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "raw-f32"
    if fmt == "csv":
        return _load_features_csv(path, ids)
    if fmt == "raw-f32":
        desc_path = Path(descriptor) if descriptor else path.with_name(path.name + ".json")
        desc = json.loads(desc_path.read_text())
        n, d = int(desc["n"]), int(desc["d"])
        raw = path.read_bytes()
        if len(raw) != 4 * n * d:
            raise ValidationError(f"{path}: {len(raw)} bytes, expected {4 * n * d} for n={n}, d={d}")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, d)
        if ids is not None and len(ids) != n:
            raise AlignmentError(f"{path}: {n} feature rows for {len(ids)} records")
        return FeatureMatrix(values)
    raise ValueError(f"unknown feature format {fmt!r}")


def _load_features_csv(path: Path, ids: Sequence[str] | None) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        if not header or header[0] != "id":
            raise SchemaError(f"{path}: missing column 'id'")
        d = len(header) - 1
        rows, row_ids = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise SchemaError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            row_ids.append(row[0].strip())
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"row {row[0]!r}: {exc}") from None
    values = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    if np.any(np.isnan(values)):
        bad = row_ids[int(np.argwhere(np.isnan(values))[0, 0])]
        raise ValidationError(f"NaN feature value in row {bad!r}")
    if ids is None:
        return FeatureMatrix(values)
    pos = {}
    for i, rid in enumerate(row_ids):
        if rid in pos:
            raise ValidationError(f"duplicate feature id {rid!r}")
        pos[rid] = i
    missing = [rid for rid in ids if rid not in pos]
    extra = [rid for rid in row_ids if rid not in set(ids)] if len(pos) != len(ids) else []
    if missing or extra:
        msg = f"{path}: feature ids do not match prediction ids"
        if missing:
            msg += f"; missing {missing[:5]}"
        if extra:
            msg += f"; unexpected {extra[:5]}"
        raise AlignmentError(msg)
    order = np.fromiter((pos[rid] for rid in ids), dtype=np.int64, count=len(ids))
    return FeatureMatrix(values[order])


def load_dataset(preds_path, features_path=None, features_fmt: str | None = None,
                 n_classes: int | None = None) -> Dataset:
    ds = load_predictions(preds_path, n_classes=n_classes)
    if features_path is not None:
        ds = ds.with_features(load_features(features_path, features_fmt, ids=ds.ids))
    return ds


# --------------------------------------------------------------------------
# Writers


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Iterable[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def predictions_csv(ds: Dataset) -> str:
    header = list(PRED_COLUMNS)
    if ds.probs is not None:
        header += [f"p{j}" for j in range(ds.m)]
    rows = []
    for i, rid in enumerate(ds.ids):
        row = [rid, int(ds.y_true[i]), int(ds.y_pred[i]), float(ds.conf[i]), ds.groups[i] or ""]
        if ds.probs is not None:
            row += [float(p) for p in ds.probs[i]]
        rows.append(row)
    return csv_text(header, rows)


def write_predictions(ds: Dataset, path) -> None:
    atomic_write_text(path, predictions_csv(ds))


def write_features(ids: Sequence[str], features: FeatureMatrix | np.ndarray, path) -> None:
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    header = ["id"] + [f"f{j}" for j in range(values.shape[1])]
    rows = ([rid] + [float(x) for x in values[i]] for i, rid in enumerate(ids))
    atomic_write_text(path, csv_text(header, rows))


def write_features_raw(features: FeatureMatrix | np.ndarray, path) -> None:
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    path.with_name(path.name + ".json").write_text(
        json.dumps({"n": int(values.shape[0]), "d": int(values.shape[1])}))
