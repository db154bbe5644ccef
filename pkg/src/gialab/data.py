"""Victim datasets: synthetic batches and CSV ingestion with feature scaling."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Batch
from .vgia.config import FeatureBox

log = logging.getLogger(__name__)

SCALINGS = ("minmax01", "symmetric11", "none")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or "csv"
    # synthetic
    d: int = 32
    size: int | None = 256  # csv: rows drawn per seed, None keeps every row
    distribution: str = "uniform"
    target_rule: str = "linear"  # "linear" or "classes"
    n_classes: int | None = None
    noise: float = 0.1
    seed: int = 0
    # csv
    path: str | None = None
    features: tuple[str, ...] | None = None
    target: str | None = None
    task: str = "regression"
    categorical: tuple[str, ...] | None = None
    # both
    scaling: str = "none"
    target_standardize: bool = False
    name: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if self.scaling not in SCALINGS:
            raise DataError(f"unknown scaling {self.scaling!r}; expected one of {SCALINGS}")
        if self.task not in ("regression", "classification"):
            raise DataError(f"unknown task {self.task!r}")
        if self.source == "synthetic":
            if self.d < 1 or self.size is None or self.size < 1:
                raise DataError("synthetic data needs d >= 1 and size >= 1")
            if self.target_rule not in ("linear", "classes"):
                raise DataError(f"unknown target rule {self.target_rule!r}")
            if self.target_rule == "classes" and (self.n_classes is None or self.n_classes < 2):
                raise DataError("class targets need n_classes >= 2")
        elif self.path is None or self.target is None:
            raise DataError("csv source needs a path and a target column")
        if self.features is not None:
            object.__setattr__(self, "features", tuple(self.features))
        if self.categorical is not None:
            object.__setattr__(self, "categorical", tuple(self.categorical))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.source == "csv":
            return Path(self.path).stem
        return f"synthetic-{self.target_rule}"

    @property
    def is_classification(self) -> bool:
        if self.source == "synthetic":
            return self.target_rule == "classes"
        return self.task == "classification"


@dataclass(frozen=True)
class ScalingMeta:
    offset: np.ndarray
    scale: np.ndarray
    kind: str = "none"
    target_mean: float = 0.0
    target_std: float = 1.0
    columns: tuple[str, ...] = ()
    classes: tuple[str, ...] = ()
    duplicates: int = 0
    constant_columns: tuple[str, ...] = field(default=())

    def scale_features(self, x: np.ndarray) -> np.ndarray:
        x = (np.asarray(x, dtype=np.float64) - self.offset) / self.scale
        return 2.0 * x - 1.0 if self.kind == "symmetric11" else x

    def unscale_features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "symmetric11":
            x = (x + 1.0) / 2.0
        return x * self.scale + self.offset

    def unscale_targets(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean


@dataclass(frozen=True)
class LoadedData:
    batch: Batch
    box: FeatureBox
    meta: ScalingMeta


def fit_scaling(x: np.ndarray, kind: str, columns=()) -> ScalingMeta:
    d = x.shape[1]
    if kind == "none":
        return ScalingMeta(np.zeros(d), np.ones(d), kind, columns=tuple(columns))
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    constant = span == 0
    if np.any(constant):
        names = [columns[i] if i < len(columns) else str(i) for i in np.flatnonzero(constant)]
        log.warning("constant feature columns mapped to the lower bound: %s", ", ".join(names))
    else:
        names = []
    return ScalingMeta(lo, np.where(constant, 1.0, span), kind, columns=tuple(columns), constant_columns=tuple(names))


def feature_box_for(meta: ScalingMeta, x: np.ndarray) -> FeatureBox:
    d = x.shape[1]
    if meta.kind == "minmax01":
        return FeatureBox.uniform(d, 0.0, 1.0)
    if meta.kind == "symmetric11":
        return FeatureBox.uniform(d, -1.0, 1.0)
    return FeatureBox(x.min(axis=0), x.max(axis=0))


def standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    mu = float(np.mean(y))
    sd = float(np.std(y))
    if sd == 0:
        raise DataError("cannot standardize a constant target")
    return (y - mu) / sd, mu, sd


def count_duplicate_rows(x: np.ndarray) -> int:
    return int(x.shape[0] - np.unique(x, axis=0).shape[0])


def gen_synthetic(
    d: int,
    size: int,
    seed: int,
    target_rule: str = "linear",
    n_classes: int | None = None,
    noise: float = 0.1,
) -> Batch:
    """Uniform features on ``[0, 1]^d`` without duplicate rows.

    Targets follow a fixed random linear rule plus Gaussian noise, or are
    uniform random class indices.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(size, d))
    for _ in range(100):
        _, first = np.unique(x, axis=0, return_index=True)
        if first.shape[0] == size:
            break
        dup = np.setdiff1d(np.arange(size), first)
        x[dup] = rng.uniform(0.0, 1.0, size=(dup.shape[0], d))
    else:
        raise DataError(f"could not draw {size} distinct rows in dimension {d}")
    if target_rule == "classes":
        if n_classes is None:
            raise DataError("class targets need n_classes")
        return Batch(x, rng.integers(0, n_classes, size=size), n_classes)
    coef = rng.normal(0.0, 1.0, size=d) / np.sqrt(d)
    y = (x - 0.5) @ coef + noise * rng.normal(size=size)
    return Batch(x, y)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv(path, features=None, target=None, categorical=None, classification=False):
    """Parse a headered CSV into a numeric matrix, target column and names.

    Categorical columns become one-hot blocks in place, levels sorted
    alphabetically.  Columns are categorical when listed in ``categorical``
    or, if that is ``None``, when any value is non-numeric.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            rows.append((line_no, [c.strip() for c in row]))
    if target not in header:
        raise DataError(f"{path}: target column {target!r} not in header")
    names = [h for h in header if h != target] if features is None else list(features)
    missing = [c for c in names if c not in header]
    if missing:
        raise DataError(f"{path}: missing feature columns {missing}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    col = {h: i for i, h in enumerate(header)}
    if categorical is None:
        cat = {c for c in names if not all(_is_number(r[col[c]]) for _, r in rows)}
    else:
        cat = set(categorical)
    blocks, out_names = [], []
    for c in names:
        values = [r[col[c]] for _, r in rows]
        if c in cat:
            levels = sorted(set(values))
            onehot = np.zeros((len(rows), len(levels)))
            index = {v: i for i, v in enumerate(levels)}
            for i, v in enumerate(values):
                onehot[i, index[v]] = 1.0
            blocks.append(onehot)
            out_names += [f"{c}={v}" for v in levels]
        else:
            arr = np.empty(len(rows))
            for i, (line_no, r) in enumerate(rows):
                try:
                    arr[i] = float(r[col[c]])
                except ValueError:
                    raise DataError(f"{path}:{line_no}: column {c!r} is not numeric: {r[col[c]]!r}") from None
            blocks.append(arr[:, None])
            out_names.append(c)
    x = np.hstack(blocks)
    raw_y = [r[col[target]] for _, r in rows]
    if classification:
        classes = tuple(sorted(set(raw_y)))
        index = {v: i for i, v in enumerate(classes)}
        y = np.array([index[v] for v in raw_y], dtype=np.int64)
    else:
        classes = ()
        y = np.empty(len(rows))
        for i, (line_no, _) in enumerate(rows):
            try:
                y[i] = float(raw_y[i])
            except ValueError:
                raise DataError(f"{path}:{line_no}: target {raw_y[i]!r} is not numeric") from None
    if not np.all(np.isfinite(x)):
        raise DataError(f"{path}: non-finite feature values")
    return x, y, tuple(out_names), classes


def load(spec: DatasetSpec, draw_seed: int | None = None) -> LoadedData:
    """Materialise a dataset spec.

    ``draw_seed`` selects the victim's records: for synthetic data it is mixed
    into the generator seed, for CSV data it picks ``spec.size`` rows.
    """
    if spec.source == "synthetic":
        seed = spec.seed if draw_seed is None else [spec.seed, draw_seed]
        batch = gen_synthetic(spec.d, spec.size, seed, spec.target_rule, spec.n_classes, spec.noise)
        x, y, names, classes = batch.features, batch.targets, (), ()
        n_classes = batch.n_classes
    else:
        x, y, names, classes = read_csv(
            spec.path, spec.features, spec.target, spec.categorical, spec.is_classification
        )
        n_classes = len(classes) if spec.is_classification else None
    if spec.size is not None and spec.source == "csv":
        if spec.size > x.shape[0]:
            raise DataError(f"asked for {spec.size} records, file has {x.shape[0]}")
        rng = np.random.default_rng([spec.seed, 0 if draw_seed is None else draw_seed])
        pick = np.sort(rng.choice(x.shape[0], size=spec.size, replace=False))
        x, y = x[pick], y[pick]
    meta = fit_scaling(x, spec.scaling, names)
    xs = meta.scale_features(x)
    if spec.source == "synthetic" and spec.scaling == "none":
        box = FeatureBox.uniform(spec.d, 0.0, 1.0)
    else:
        box = feature_box_for(meta, xs)
    mu, sd = 0.0, 1.0
    if spec.target_standardize and n_classes is None:
        y, mu, sd = standardize(np.asarray(y, dtype=np.float64))
    dups = count_duplicate_rows(xs)
    if dups:
        log.warning("%d duplicate feature rows kept; their shared slab cannot be certified", dups)
    meta = ScalingMeta(
        meta.offset, meta.scale, meta.kind, mu, sd, names, classes, dups, meta.constant_columns
    )
    return LoadedData(Batch(xs, y, n_classes), box, meta)


def projection_gap(batch: Batch, w: np.ndarray) -> float:
    """Smallest gap between projections of distinct records along ``w``."""
    if batch.size < 2:
        raise DataError("need at least two records")
    p = np.sort(batch.features @ w)
    return float(np.min(np.diff(p)))


def inject_close_pairs(
    batch: Batch,
    w: np.ndarray,
    gaps,
    rng: np.random.Generator,
    box: FeatureBox,
    spread: float = 1e-2,
) -> Batch:
    """Overwrite records so that pairs sit ``gaps[k]`` apart along ``w``.

    Each partner differs from its base record by a random offset of norm
    ``spread`` orthogonal to ``w`` plus the requested shift along ``w``.
    """
    x = np.array(batch.features)
    w = np.asarray(w, dtype=np.float64)
    unit = w / np.linalg.norm(w)
    order = rng.permutation(batch.size)
    gaps = list(gaps)
    if 2 * len(gaps) > batch.size:
        raise DataError("not enough records for the requested pairs")
    bases, partners = order[: len(gaps)], order[len(gaps) : 2 * len(gaps)]
    for base, partner, gap in zip(bases, partners, gaps):
        for _ in range(100):
            u = rng.normal(size=batch.dim)
            u -= (u @ unit) * unit
            cand = x[base] + spread * u / np.linalg.norm(u) + gap * w / (w @ w)
            if box.contains(cand):
                break
        else:
            raise DataError("could not place a close partner inside the box")
        x[partner] = cand
    return Batch(x, batch.targets, batch.n_classes)


def with_close_pairs(batch: Batch, w: np.ndarray, count: int, rng: np.random.Generator, box: FeatureBox) -> Batch:
    """Plant ``count`` pairs whose gaps along ``w`` start at half the batch's own minimum.

    The gaps grow by half that base step, so they all sit below ``10 * epsilon_w``
    of the returned batch.
    """
    if count < 1:
        return batch
    g0 = projection_gap(batch, w) / 2
    if g0 <= 0:
        raise DataError("batch already holds records with equal projections")
    return inject_close_pairs(batch, w, [g0 * (1 + 0.5 * k) for k in range(count)], rng, box)
