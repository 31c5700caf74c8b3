"""Bag-labelled data: containers, CSV ingestion, standardization and folds."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or inconsistent bag data."""


@dataclass(frozen=True, eq=False)
class Bag:
    """One bag: an observed binary label over ``m`` instance feature rows.

    ``latent_labels`` is only populated by the simulators and is never read
    by any fitter.
    """

    id: str
    label: int
    features: np.ndarray
    latent_labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError(f"bag {self.id!r}: features must be a non-empty m x p matrix")
        if self.label not in (0, 1):
            raise DataError(f"bag {self.id!r}: label must be 0 or 1, got {self.label!r}")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label", int(self.label))
        if self.latent_labels is not None:
            y = np.asarray(self.latent_labels, dtype=np.int8)
            if y.shape != (x.shape[0],):
                raise DataError(f"bag {self.id!r}: latent_labels length must equal m")
            y.setflags(write=False)
            object.__setattr__(self, "latent_labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class BagDataset:
    """An ordered, immutable collection of bags sharing ``p`` features.

    Flattened views (``X``, ``sizes``, ``offsets``...) are built lazily and
    cached; instance rows are stacked in bag order.
    """

    bags: tuple[Bag, ...]
    feature_names: tuple[str, ...] = ()
    standardized: bool = False

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise DataError("a dataset needs at least one bag")
        p = bags[0].features.shape[1]
        for b in bags:
            if b.features.shape[1] != p:
                raise DataError(
                    f"bag {b.id!r} has {b.features.shape[1]} features, expected {p}"
                )
        names = tuple(self.feature_names) or tuple(f"x{k + 1}" for k in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} features")
        object.__setattr__(self, "bags", bags)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return len(self.bags)

    @property
    def p(self) -> int:
        return self.bags[0].features.shape[1]

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([b.size for b in self.bags], dtype=np.int64)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def bag_index(self) -> np.ndarray:
        """Bag position of every instance row."""
        return np.repeat(np.arange(self.n), self.sizes)

    @cached_property
    def instance_labels(self) -> np.ndarray:
        """Bag label copied onto each instance (z_i for every row j)."""
        return self.labels[self.bag_index].astype(np.float64)

    @cached_property
    def X(self) -> np.ndarray:
        """All instance rows stacked, Fortran-ordered for column sweeps."""
        x = np.asfortranarray(np.vstack([b.features for b in self.bags]))
        x.setflags(write=False)
        return x

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.bags]

    def subset(self, indices: Iterable[int]) -> BagDataset:
        return BagDataset(
            tuple(self.bags[i] for i in indices),
            self.feature_names,
            self.standardized,
        )

    def with_features(self, X: np.ndarray, standardized: bool) -> BagDataset:
        """Copy of this dataset with instance rows replaced by ``X``."""
        off = self.offsets
        bags = tuple(
            Bag(b.id, b.label, X[off[i]:off[i + 1]], b.latent_labels)
            for i, b in enumerate(self.bags)
        )
        return BagDataset(bags, self.feature_names, standardized)

    def __eq__(self, other):
        if not isinstance(other, BagDataset):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and self.standardized == other.standardized
            and self.n == other.n
            and all(a == b for a, b in zip(self.bags, other.bags))
        )

    def __repr__(self):
        return f"BagDataset(n={self.n}, p={self.p}, N={self.N}, standardized={self.standardized})"


@dataclass(frozen=True)
class CsvSchema:
    """Column names used by :func:`load_csv`.

    ``features=None`` means every column after the id and label columns.
    """

    bag_id: str = "bag_id"
    label: str = "label"
    features: tuple[str, ...] | None = None


def _parse_label(raw: str, row: int) -> int:
    s = raw.strip().lower()
    if s in ("1", "1.0", "true", "yes", "pos", "positive"):
        return 1
    if s in ("0", "0.0", "false", "no", "neg", "negative"):
        return 0
    raise DataError(f"row {row}: cannot parse bag label {raw!r}")


def load_csv(path: str | Path, schema: CsvSchema | None = None, require_label: bool = True) -> BagDataset:
    """Read a ``bag_id,label,f1,...,fp`` CSV into a :class:`BagDataset`.

    Bags keep their first-appearance order and rows keep file order. With
    ``require_label=False`` a file without the label column is accepted and
    every bag gets label 0.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        try:
            id_col = header.index(schema.bag_id)
            if schema.label in header or require_label:
                label_col = header.index(schema.label)
            else:
                label_col = None
        except ValueError:
            raise DataError(
                f"{path}: header must contain {schema.bag_id!r} and {schema.label!r}"
            ) from None
        if schema.features is None:
            feat_cols = [k for k in range(len(header)) if k not in (id_col, label_col)]
        else:
            missing = [f for f in schema.features if f not in header]
            if missing:
                raise DataError(f"{path}: missing feature columns {missing}")
            feat_cols = [header.index(f) for f in schema.features]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")

        rows: dict[str, list[list[float]]] = {}
        labels: dict[str, int] = {}
        # row numbers are 1-based file lines, header is line 1
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
            bid = rec[id_col].strip()
            lab = 0 if label_col is None else _parse_label(rec[label_col], lineno)
            try:
                vals = [float(rec[k]) for k in feat_cols]
            except ValueError:
                raise DataError(f"row {lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"row {lineno}: non-finite feature value")
            if bid in labels:
                if labels[bid] != lab:
                    raise DataError(f"inconsistent bag label for bag {bid!r} (row {lineno})")
                rows[bid].append(vals)
            else:
                labels[bid] = lab
                rows[bid] = [vals]
    if not rows:
        raise DataError(f"{path}: no data rows")
    bags = tuple(Bag(bid, labels[bid], np.array(r)) for bid, r in rows.items())
    return BagDataset(bags, tuple(header[k] for k in feat_cols))


def write_csv(ds: BagDataset, path: str | Path) -> None:
    """Write ``ds`` in the format read by :func:`load_csv`.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "label", *ds.feature_names])
        for b in ds.bags:
            for row in b.features:
                w.writerow([b.id, b.label, *(repr(float(v)) for v in row)])


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    """Column centres and scales; ``constant`` flags zero-variance columns."""

    means: np.ndarray
    scales: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            object.__setattr__(self, "constant", np.zeros(len(self.means), dtype=bool))

    def apply(self, ds: BagDataset) -> BagDataset:
        """Transform ``ds`` with these (typically training-fold) statistics."""
        return ds.with_features((ds.X - self.means) / self.scales, standardized=True)

    def inverse(self, X: np.ndarray) -> np.ndarray:
        return X * self.scales + self.means

    def to_raw_scale(self, intercept: float, beta: np.ndarray) -> tuple[float, np.ndarray]:
        """Map coefficients fitted on standardized columns back to raw units."""
        raw = np.asarray(beta) / self.scales
        return float(intercept - raw @ self.means), raw

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> StandardizationStats:
        return cls(
            np.asarray(d["means"], dtype=np.float64),
            np.asarray(d["scales"], dtype=np.float64),
            np.asarray(d.get("constant", [False] * len(d["means"])), dtype=bool),
        )


def standardize(ds: BagDataset) -> tuple[BagDataset, StandardizationStats]:
    """Center every column and scale it so that its sum of squares is ``N - n``.

    That target makes ``sum_ij x_ijk^2 = sum_i (m_i - 1)``, the normalization
    under which the closed-form ``lambda_max`` is exact. Constant columns are
    centred, given scale 1 and flagged. With ``N == n`` (all bags singletons)
    there is no canonical scale and columns are only centred.
    """
    if ds.standardized:
        warnings.warn("dataset is already standardized; standardizing again", stacklevel=2)
    X = ds.X
    target = ds.N - ds.n
    means = X.mean(axis=0)
    centred = X - means
    ss = np.einsum("ij,ij->j", centred, centred)
    constant = ss <= 1e-24 * max(1.0, float(np.abs(X).max(initial=0.0)) ** 2) * ds.N
    scales = np.ones(ds.p)
    if target == 0:
        warnings.warn(
            "every bag has a single instance (N == n): centering only", stacklevel=2
        )
    else:
        ok = ~constant
        scales[ok] = np.sqrt(ss[ok] / target)
    if constant.any():
        logger.warning("constant feature columns: %s",
                       [ds.feature_names[k] for k in np.flatnonzero(constant)])
    stats = StandardizationStats(means, scales, constant)
    out = centred / scales
    out[:, constant] = 0.0
    return ds.with_features(out, standardized=True), stats


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index (0..k-1) for every bag, in dataset order."""

    fold_of_bag: np.ndarray
    k: int
    stratified: bool = True

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train bag indices, held-out bag indices) for ``fold``."""
        test = np.flatnonzero(self.fold_of_bag == fold)
        train = np.flatnonzero(self.fold_of_bag != fold)
        return train, test

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k,
            "stratified": self.stratified,
            "fold_of_bag": self.fold_of_bag.tolist(),
        })

    @classmethod
    def from_json(cls, s: str) -> FoldAssignment:
        d = json.loads(s)
        return cls(np.asarray(d["fold_of_bag"], dtype=np.int64), d["k"], d["stratified"])


def stratified_kfold(ds: BagDataset | Sequence[int], k: int, seed: int) -> FoldAssignment:
    """Split bags into ``k`` folds, stratified by bag label.

    Bags of each class are shuffled and dealt round-robin; the deal position
    carries over from the negatives to the positives, so fold sizes differ by
    at most one and each fold gets ``floor`` or ``ceil`` of its share of
    every class. Accepts a dataset or just its label vector.
    """
    labels = np.asarray(ds.labels if isinstance(ds, BagDataset) else ds)
    n = len(labels)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} bags")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    n_pos = int(labels.sum())
    stratified = k <= min(n_pos, n - n_pos)
    if stratified:
        start = 0
        for cls in (0, 1):
            idx = np.flatnonzero(labels == cls)
            idx = idx[rng.permutation(len(idx))]
            folds[idx] = (start + np.arange(len(idx))) % k
            start = (start + len(idx)) % k
    else:
        warnings.warn(
            f"cannot stratify {k} folds with {n_pos} positive / {n - n_pos} negative bags; "
            "falling back to an unstratified split",
            stacklevel=2,
        )
        folds[rng.permutation(n)] = np.arange(n) % k
    return FoldAssignment(folds, k, stratified)
