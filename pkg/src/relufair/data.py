"""Grouped dataset construction, ingestion, splitting and export.

Every sample carries a feature row, an integer class label and an integer
group index.  Generators are pure functions of their arguments, seed
included, so datasets are bit-identical across runs.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array


@dataclass(frozen=True)
class GroupedDataset:
    features: Array          # (N, d)
    labels: Array            # (N,) ints in [0, C)
    groups: Array            # (N,) ints in [0, M)
    group_names: tuple[str, ...]
    num_classes: int = 0     # 0 means infer from labels
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        groups = np.asarray(self.groups, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = features.shape[0]
        if labels.shape != (n,) or groups.shape != (n,):
            raise ValueError("features, labels and groups must agree on N")
        if n == 0:
            raise ValueError("empty dataset")
        if labels.min() < 0:
            raise ValueError("negative label")
        if groups.min() < 0 or groups.max() >= len(self.group_names):
            raise ValueError("group index out of range of group_names")
        c = int(self.num_classes) or int(labels.max()) + 1
        if labels.max() >= c:
            raise ValueError("label out of range of num_classes")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "group_names", tuple(self.group_names))
        object.__setattr__(self, "num_classes", c)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_groups(self) -> int:
        return len(self.group_names)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def group_sizes(self) -> Array:
        return np.bincount(self.groups, minlength=self.num_groups)

    def group_indices(self, a: int) -> Array:
        return np.flatnonzero(self.groups == a)

    def subset(self, indices) -> "GroupedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return GroupedDataset(self.features[idx], self.labels[idx], self.groups[idx],
                              self.group_names, self.num_classes, dict(self.provenance))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int
    stratify_by: str = "group"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.stratify_by not in ("group", "label", "both"):
            raise ValueError(f"unknown stratify_by {self.stratify_by!r}")


@dataclass(frozen=True)
class GroupWeightPreset:
    name: str
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    def counts(self, n: int) -> list[int]:
        return largest_remainder_counts(self.weights, n)


# Dataset composition fractions from the UTKFace age/race breakdowns.
PRESETS = {
    "utk-age": GroupWeightPreset("utk-age", (0.1014, 0.0363, 0.7756, 0.0867)),
    "utk-race": GroupWeightPreset("utk-race", (0.4251, 0.1909, 0.1449, 0.1677, 0.0714)),
}


def largest_remainder_counts(weights, n: int) -> list[int]:
    """Integer sizes summing exactly to n; ties go to the lower index."""
    quotas = np.asarray(weights, dtype=np.float64) * n
    counts = np.floor(quotas).astype(np.int64)
    remainders = quotas - counts
    short = n - int(counts.sum())
    order = np.lexsort((np.arange(len(weights)), -remainders))
    for i in order[:short]:
        counts[i] += 1
    return [int(c) for c in counts]


# -- generators --------------------------------------------------------------

TOY_DEFAULTS = {"n": 4000, "minority_fraction": 0.07, "noise": 0.03}


# Geometry of the boundary task: the minority band floats BAND_OFFSET above
# the curve and spans BAND_WIDTH; the majority keeps CURVE_MARGIN of daylight
# below the curve so label noise comes only from the feature noise.
BAND_OFFSET = 0.055
BAND_WIDTH = 0.10
BAND_X_EXTENT = 0.70
CURVE_MARGIN = 0.03


def make_toy_boundary(n: int = 4000, minority_fraction: float = 0.07,
                      noise: float = 0.03, seed: int = 0) -> GroupedDataset:
    """Two-group 2-D task split by the strictly convex curve y = x².

    The majority class fills the region under the curve inside the unit box;
    the minority class sits in a thin band just above the curve, so its
    samples hug the boundary on its convex side.  Labels follow the side of
    the curve; group coincides with label.  Gaussian noise of scale `noise`
    is added to the features after labeling.
    """
    if n < 100:
        raise ValueError("n must be >= 100")
    if not 0.0 < minority_fraction < 0.5:
        raise ValueError("minority_fraction must lie in (0, 0.5)")
    if noise < 0.0:
        raise ValueError("noise must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_min = int(round(minority_fraction * n))
    n_maj = n - n_min

    # Uniform-ish over the region under the curve: the x-marginal has
    # density proportional to x^2, inverted via u -> sign(u)*|u|^(1/3).
    u = rng.uniform(-1.0, 1.0, size=n_maj)
    x_maj = np.sign(u) * np.abs(u) ** (1.0 / 3.0)
    y_maj = rng.uniform(0.0, 1.0, size=n_maj) * np.maximum(x_maj ** 2 - CURVE_MARGIN, 0.0)

    x_min = rng.uniform(-BAND_X_EXTENT, BAND_X_EXTENT, size=n_min)
    y_min = x_min ** 2 + BAND_OFFSET + rng.uniform(0.0, BAND_WIDTH, size=n_min)

    features = np.concatenate([
        np.stack([x_maj, y_maj], axis=1),
        np.stack([x_min, y_min], axis=1),
    ])
    labels = np.concatenate([np.zeros(n_maj, dtype=np.int64),
                             np.ones(n_min, dtype=np.int64)])
    if noise > 0.0:
        features = features + rng.normal(0.0, noise, size=features.shape)
    order = rng.permutation(n)
    prov = {"generator": "make_toy_boundary", "seed": seed,
            "args": {"n": n, "minority_fraction": minority_fraction, "noise": noise}}
    return GroupedDataset(features[order], labels[order], labels[order].copy(),
                          ("majority", "minority"), 2, prov)


def make_gaussian_mixture(num_classes: int, dim: int, samples_per_class,
                          spread: float, seed: int) -> GroupedDataset:
    """One Gaussian blob per class at a random center; group == class."""
    sizes = [int(s) for s in samples_per_class]
    if len(sizes) != num_classes:
        raise ValueError("samples_per_class length must equal num_classes")
    if any(s < 10 for s in sizes):
        raise ValueError("every class needs at least 10 samples")
    if num_classes < 2 or dim < 1 or spread < 0.0:
        raise ValueError("degenerate mixture parameters")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.standard_normal((num_classes, dim)) * 2.0
    features, labels = [], []
    for c, s in enumerate(sizes):
        features.append(centers[c] + rng.standard_normal((s, dim)) * spread)
        labels.append(np.full(s, c, dtype=np.int64))
    features = np.concatenate(features)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    prov = {"generator": "make_gaussian_mixture", "seed": seed,
            "args": {"num_classes": num_classes, "dim": dim,
                     "samples_per_class": sizes, "spread": spread}}
    names = tuple(f"class{c}" for c in range(num_classes))
    return GroupedDataset(features[order], labels[order], labels[order].copy(),
                          names, num_classes, prov)


def imbalance(ds: GroupedDataset, keep_fractions, seed: int) -> GroupedDataset:
    """Per-class uniform subsampling without replacement.

    Row order of the survivors matches the original dataset, so fractions of
    all 1.0 return an identical dataset.
    """
    fracs = [float(f) for f in keep_fractions]
    if len(fracs) != ds.num_classes:
        raise ValueError("one keep fraction per class required")
    if any(not 0.0 < f <= 1.0 for f in fracs):
        raise ValueError("keep fractions must lie in (0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    kept = []
    for c, f in enumerate(fracs):
        rows = np.flatnonzero(ds.labels == c)
        k = int(np.floor(f * len(rows)))
        if k < 5:
            raise ValueError(f"class {c} would drop to {k} samples (minimum is 5)")
        kept.append(rng.choice(rows, size=k, replace=False) if f < 1.0 else rows)
    idx = np.sort(np.concatenate(kept))
    out = ds.subset(idx)
    prov = dict(ds.provenance)
    prov["imbalance"] = {"keep_fractions": fracs, "seed": seed}
    return GroupedDataset(out.features, out.labels, out.groups, out.group_names,
                          out.num_classes, prov)


# -- splitting ---------------------------------------------------------------

def split(ds: GroupedDataset, spec: SplitSpec) -> tuple[GroupedDataset, GroupedDataset]:
    """Seeded stratified partition into (train, eval).

    Each stratum contributes round(train_fraction * size) rows to the train
    side, clamped so neither side of any stratum is empty.
    """
    if spec.stratify_by == "group":
        keys = ds.groups
    elif spec.stratify_by == "label":
        keys = ds.labels
    else:
        keys = ds.groups * ds.num_classes + ds.labels
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    train_idx, eval_idx = [], []
    for key in np.unique(keys):
        rows = np.flatnonzero(keys == key)
        if len(rows) < 2:
            raise ValueError(
                f"stratum {int(key)} has {len(rows)} sample(s); need >= 2 to split")
        k = int(round(spec.train_fraction * len(rows)))
        k = min(max(k, 1), len(rows) - 1)
        rows = rng.permutation(rows)
        train_idx.append(rows[:k])
        eval_idx.append(rows[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    eval_idx = np.sort(np.concatenate(eval_idx))
    return ds.subset(train_idx), ds.subset(eval_idx)


def stratified_batches(groups: Array, batch_size: int,
                       rng: np.random.Generator) -> list[Array]:
    """Batch index lists with every group spread evenly across batches.

    Within each group the order is shuffled; groups are then interleaved by
    systematic jittered ranks, so any group with at least N/batch_size
    members appears in every batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = np.asarray(groups)
    n = len(groups)
    keys = np.empty(n)
    for g in np.unique(groups):
        rows = rng.permutation(np.flatnonzero(groups == g))
        keys[rows] = (np.arange(len(rows)) + rng.uniform(0.0, 1.0)) / len(rows)
    order = np.argsort(keys, kind="stable")
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


# -- CSV ingestion and export -------------------------------------------------

def load_csv(path: str, feature_cols, label_col: str, group_col: str) -> GroupedDataset:
    """Read a header-first CSV into a dataset.

    Row numbers in error messages count data rows from 1 (the header is row
    0).  Group names are the distinct group-column values in first-appearance
    order; labels must already be integers.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        feature_cols = list(feature_cols)
        missing = [c for c in [*feature_cols, label_col, group_col] if c not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {missing}")
        fidx = [header.index(c) for c in feature_cols]
        lidx = header.index(label_col)
        gidx = header.index(group_col)
        features, labels, group_values = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {rownum} has {len(row)} fields, "
                                 f"expected {len(header)}")
            vals = []
            for col, j in zip(feature_cols, fidx):
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise ValueError(f"{path}: row {rownum}: non-numeric value "
                                     f"{row[j]!r} in feature column {col!r}") from None
            try:
                labels.append(int(row[lidx]))
            except ValueError:
                raise ValueError(f"{path}: row {rownum}: non-integer label "
                                 f"{row[lidx]!r}") from None
            features.append(vals)
            group_values.append(row[gidx])
    if not features:
        raise ValueError(f"{path}: no data rows")
    names: list[str] = []
    seen: dict[str, int] = {}
    groups = []
    for v in group_values:
        if v not in seen:
            seen[v] = len(names)
            names.append(v)
        groups.append(seen[v])
    prov = {"generator": "load_csv", "args": {"path": os.path.abspath(path)}}
    return GroupedDataset(np.asarray(features), np.asarray(labels),
                          np.asarray(groups), tuple(names), 0, prov)


def save_csv(ds: GroupedDataset, path: str) -> None:
    """Write the dataset plus a `<path>.meta.json` sidecar."""
    feature_cols = [f"f{i}" for i in range(ds.dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*feature_cols, "label", "group"])
        for row, label, g in zip(ds.features, ds.labels, ds.groups):
            writer.writerow([*(repr(float(v)) for v in row), int(label),
                             ds.group_names[g]])
    sidecar = {
        "group_names": list(ds.group_names),
        "C": ds.num_classes,
        "M": ds.num_groups,
        "N": len(ds),
        "provenance": ds.provenance,
    }
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")
