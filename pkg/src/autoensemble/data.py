"""Binary-classification datasets: CSV ingestion and synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, PreconditionError, ShapeError
from .numerics import make_rng


@dataclass(frozen=True)
class Dataset:
    """``m`` examples with features ``X`` (m x d) and labels ``y`` in {-1, +1}."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...] = field(default=())
    split_tag: str = "train"

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if X.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] < 1:
            raise PreconditionError("dataset must contain at least one example")
        if y.shape != (X.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {X.shape[0]} examples")
        if not np.all((y == 1.0) | (y == -1.0)):
            raise DataError("labels must be -1 or +1")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        if self.split_tag not in ("train", "eval"):
            raise PreconditionError(f"unknown split tag {self.split_tag!r}")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ShapeError(f"{len(names)} feature names for {X.shape[1]} columns")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def is_single_class(self) -> bool:
        return bool(np.all(self.y == self.y[0]))


def _parse_label(raw: str, where: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"{where}: label {raw!r} is not numeric") from None
    if value == 1.0:
        return 1.0
    if value in (-1.0, 0.0):
        return -1.0
    raise DataError(f"{where}: label {raw!r} is not one of -1/+1 or 0/1")


def load_csv(path, label_column: str, split_tag: str = "train") -> Dataset:
    """Read a headered CSV; every non-label column becomes a feature.

    Labels ``0``/``1`` are mapped to ``-1``/``+1``. Row order is preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty (no header row)") from None
        if label_column not in header:
            raise ConfigError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            feats = []
            for i, cell in enumerate(row):
                where = f"{path}:{line_no} column {header[i]!r}"
                if i == label_idx:
                    labels.append(_parse_label(cell.strip(), where))
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{where}: cannot parse {cell!r} as a number") from None
                if not math.isfinite(v):
                    raise DataError(f"{where}: non-finite value {cell!r}")
                feats.append(v)
            rows.append(feats)
    if not rows:
        raise DataError(f"{path}: dataset is empty (header only)")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels), tuple(names), split_tag)


def write_csv(data: Dataset, path, label_column: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*data.feature_names, label_column])
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def two_gaussians(
    m: int, d: int = 2, seed: int = 0, separation: float = 2.0, split_tag: str = "train"
) -> Dataset:
    """Two isotropic unit Gaussians with means at +/- separation/2 along the diagonal."""
    rng = make_rng(seed, "two_gaussians", m, d)
    y = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    direction = np.ones(d) / math.sqrt(d)
    X = rng.standard_normal((m, d)) + np.outer(y, direction) * (separation / 2.0)
    return Dataset(X, y, split_tag=split_tag)


def xor_blobs(m: int, seed: int = 0, noise: float = 0.35, split_tag: str = "train") -> Dataset:
    """2-D XOR layout: four blobs, opposite corners share a label."""
    rng = make_rng(seed, "xor_blobs", m)
    corners = rng.integers(0, 4, size=m)
    centers = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    y = np.where(corners < 2, 1.0, -1.0)
    X = centers[corners] + noise * rng.standard_normal((m, 2))
    return Dataset(X, y, split_tag=split_tag)
