"""Dataset ingestion, label derivation, region assignment, and generation.

Raw interaction logs carry watch seconds and video length; derive_labels
turns those into the three engagement targets (completion ratio, finished
flag, skip flag). assign_regions maps a per-user statistic onto facet
partitions either by target quantile fractions or by explicit thresholds.
generate_synthetic fabricates a multi-region dataset whose per-region
labelers deviate from a shared one by a controllable amount, so that
region-local overfitting is measurable at desk scale. CSV is the single
interchange format.

Datasets are immutable after construction and safe to share across
threads; generation and parsing are pure functions of seed and path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    SchemaError,
)
from .lattice import Code, FacetSpec, TaskSpec, full_regions, parse_code
from .nn import node_seed, sigmoid

SKIP_SECONDS = 3.0
CMPL_CAP = 5.0

# raw columns recognized in CSV files, in header order
RAW_COLUMNS = ("watch_time", "video_length", "time")


# ---------------------------------------------------------------------------
# label derivation


def derive_labels(watch_time, video_length, c: float = SKIP_SECONDS,
                  cap: float = CMPL_CAP):
    """Engagement targets from raw watch behavior; scalars or arrays.

    Returns (completion ratio truncated at cap, finished flag, skip flag):
    completion = min(watch_time / video_length, cap); finished iff the
    whole video was watched; skipped iff watch time is at most c seconds.
    """
    wt = np.asarray(watch_time, dtype=float)
    vl = np.asarray(video_length, dtype=float)
    if np.any(vl <= 0):
        raise DataError("video_length must be > 0")
    if np.any(wt < 0):
        raise DataError("watch_time must be >= 0")
    y_cmpl = np.minimum(wt / vl, cap)
    y_finish = (wt >= vl).astype(np.int64)
    y_skip = (wt <= c).astype(np.int64)
    if y_cmpl.ndim == 0:
        return float(y_cmpl), int(y_finish), int(y_skip)
    return y_cmpl, y_finish, y_skip


# ---------------------------------------------------------------------------
# region assignment


def assign_regions(stats, fractions=None, thresholds=None) -> np.ndarray:
    """Partition index per user from a scalar statistic.

    Exactly one rule: `fractions` sorts users (stable) and cuts at the
    rounded cumulative targets, so group sizes land within one user of
    n * fraction and ties keep input order; `thresholds` must be strictly
    increasing, and a statistic equal to a threshold lands in the group
    above it (a cut at 60 puts 60 in the upper group).
    """
    s = np.asarray(stats, dtype=float)
    if s.ndim != 1:
        raise DimensionError(f"stats must be 1-D, got shape {s.shape}")
    if (fractions is None) == (thresholds is None):
        raise ConfigError("give exactly one of fractions or thresholds")
    if thresholds is not None:
        th = np.asarray(thresholds, dtype=float)
        if th.ndim != 1 or th.size < 1 or np.any(np.diff(th) <= 0):
            raise ConfigError("thresholds must be strictly increasing")
        return np.searchsorted(th, s, side="right").astype(np.int64)
    fr = np.asarray(fractions, dtype=float)
    if fr.ndim != 1 or fr.size < 1 or np.any(fr <= 0):
        raise ConfigError("fractions must be positive")
    if abs(float(fr.sum()) - 1.0) > 1e-9:
        raise ConfigError(f"fractions sum to {float(fr.sum())}, expected 1")
    order = np.argsort(s, kind="stable")
    cuts = np.rint(np.cumsum(fr) * s.size).astype(np.int64)
    cuts[-1] = s.size
    out = np.empty(s.size, dtype=np.int64)
    start = 0
    for g, stop in enumerate(cuts):
        out[order[start:stop]] = g
        start = int(stop)
    return out


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass(frozen=True)
class Sample:
    """One row: features, its full region code, and label/raw values."""

    features: np.ndarray
    region: Code
    labels: dict[str, float]
    raw: dict[str, float]


@dataclass(frozen=True)
class Dataset:
    """Column-major dataset bound to a facet vocabulary.

    X is (n, feature_dim); regions holds one partition index per facet
    per row; labels and raw map column names to (n,) arrays. provenance
    records where the rows came from (a spec digest or a file path).
    """

    facets: FacetSpec
    X: np.ndarray
    regions: np.ndarray
    labels: dict[str, np.ndarray]
    raw: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        regions = np.asarray(self.regions, dtype=np.int64)
        if X.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        if regions.shape != (n, self.facets.n_facets):
            raise DimensionError(
                f"regions shape {regions.shape} does not match "
                f"{(n, self.facets.n_facets)}")
        for f in range(self.facets.n_facets):
            col = regions[:, f]
            if col.size and not (0 <= col.min() and col.max() < self.facets.m(f)):
                raise DataError(f"region indices out of range for facet "
                                f"{self.facets.facet_name(f)!r}")
        labels = {k: np.asarray(v, dtype=float) for k, v in self.labels.items()}
        raw = {k: np.asarray(v, dtype=float) for k, v in self.raw.items()}
        for name, col in {**labels, **raw}.items():
            if col.shape != (n,):
                raise DimensionError(f"column {name!r} has shape {col.shape}, "
                                     f"expected ({n},)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "raw", raw)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def region_code(self, i: int) -> Code:
        return Code(tuple((f, int(self.regions[i, f]))
                          for f in range(self.facets.n_facets)))

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], self.region_code(i),
                      {k: float(v[i]) for k, v in self.labels.items()},
                      {k: float(v[i]) for k, v in self.raw.items()})

    def take(self, idx) -> "Dataset":
        """Row subset in the given index order; arrays are copies."""
        idx = np.asarray(idx)
        return Dataset(self.facets, self.X[idx], self.regions[idx],
                       {k: v[idx] for k, v in self.labels.items()},
                       {k: v[idx] for k, v in self.raw.items()},
                       self.provenance)


def with_derived_labels(dataset: Dataset, c: float = SKIP_SECONDS,
                        cap: float = CMPL_CAP) -> Dataset:
    """Add y_cmpl / y_finish / y_skip columns from the raw watch columns."""
    for needed in ("watch_time", "video_length"):
        if needed not in dataset.raw:
            raise DataError(f"dataset lacks raw column {needed!r}")
    y_cmpl, y_finish, y_skip = derive_labels(
        dataset.raw["watch_time"], dataset.raw["video_length"], c=c, cap=cap)
    labels = dict(dataset.labels)
    labels.update({"y_cmpl": np.asarray(y_cmpl, dtype=float),
                   "y_finish": y_finish.astype(float),
                   "y_skip": y_skip.astype(float)})
    return Dataset(dataset.facets, dataset.X, dataset.regions, labels,
                   dataset.raw, dataset.provenance)


# ---------------------------------------------------------------------------
# synthetic generation


def _label_heads(tasks) -> dict[str, str]:
    # tasks sharing a label column must agree on its head
    heads: dict[str, str] = {}
    for t in tasks:
        prev = heads.setdefault(t.label_key, t.head)
        if prev != t.head:
            raise ConfigError(f"label {t.label_key!r} is read as {prev} and "
                              f"as {t.head}")
    return heads


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a dataset with per-region labeler deviations.

    counts maps a code text (full or partial, e.g. 'group=New') to a
    sample count; a partial code spreads its count over the full regions
    extending it, one extra row per region in facet-major order until the
    remainder is used up. w_shared maps each task label column to a
    shared coefficient vector, and w_region optionally adds a deviation
    vector per full region, scaled by deviation_scale at generation time.
    Regions absent from w_region deviate by zero.
    """

    facets: FacetSpec
    tasks: tuple[TaskSpec, ...]
    counts: dict[str, int]
    w_shared: dict[str, np.ndarray]
    w_region: dict[str, dict[str, np.ndarray]]
    deviation_scale: float = 1.0
    noise: float = 0.1
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ConfigError("need at least one task")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.deviation_scale < 0:
            raise ConfigError("deviation_scale must be >= 0")
        for key, cnt in self.counts.items():
            parse_code(self.facets, key)
            if cnt < 0:
                raise ConfigError(f"count for {key!r} must be >= 0")
        heads = _label_heads(self.tasks)
        w_shared = {}
        for name in heads:
            if name not in self.w_shared:
                raise ConfigError(f"w_shared lacks label {name!r}")
            w_shared[name] = self._vector(self.w_shared[name], name)
        region_texts = {r.text(self.facets) for r in full_regions(self.facets)}
        w_region = {}
        for name, per_region in self.w_region.items():
            if name not in heads:
                raise ConfigError(f"w_region names unknown label {name!r}")
            clean = {}
            for text, vec in per_region.items():
                if text not in region_texts:
                    raise ConfigError(f"w_region[{name!r}] key {text!r} is "
                                      f"not a full region")
                clean[text] = self._vector(vec, f"{name}/{text}")
            w_region[name] = clean
        object.__setattr__(self, "w_shared", w_shared)
        object.__setattr__(self, "w_region", w_region)

    def _vector(self, v, name: str) -> np.ndarray:
        arr = np.asarray(v, dtype=float)
        if arr.shape != (self.feature_dim,):
            raise ConfigError(f"weight vector {name!r} has shape {arr.shape},"
                              f" expected ({self.feature_dim},)")
        return arr


def _expand_counts(spec: SyntheticSpec, regions: list[Code]) -> np.ndarray:
    counts = np.zeros(len(regions), dtype=np.int64)
    claimed: dict[int, str] = {}
    for key in sorted(spec.counts):
        code = parse_code(spec.facets, key)
        matches = [i for i, r in enumerate(regions) if code.is_subcode_of(r)]
        for i in matches:
            if i in claimed:
                raise ConfigError(
                    f"counts keys {claimed[i]!r} and {key!r} both cover "
                    f"region {regions[i].text(spec.facets)!r}")
            claimed[i] = key
        base, extra = divmod(int(spec.counts[key]), len(matches))
        for j, i in enumerate(matches):
            counts[i] = base + (1 if j < extra else 0)
    return counts


def region_counts(spec: SyntheticSpec) -> dict[str, int]:
    """Per-full-region sample counts after expanding partial-code keys."""
    regions = full_regions(spec.facets)
    counts = _expand_counts(spec, regions)
    return {r.text(spec.facets): int(c) for r, c in zip(regions, counts)}


def spec_digest(spec: SyntheticSpec) -> str:
    """sha256 over a canonical JSON rendering; floats keep full precision."""
    obj = {
        "facets": spec.facets.facets,
        "tasks": [(t.name, t.code.text(spec.facets), t.head, t.label_key)
                  for t in spec.tasks],
        "counts": spec.counts,
        "w_shared": {k: [float(x) for x in v]
                     for k, v in spec.w_shared.items()},
        "w_region": {k: {t: [float(x) for x in v] for t, v in d.items()}
                     for k, d in spec.w_region.items()},
        "deviation_scale": spec.deviation_scale,
        "noise": spec.noise,
        "feature_dim": spec.feature_dim,
        "seed": spec.seed,
    }
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def random_synthetic_spec(facets: FacetSpec, tasks, counts,
                          feature_dim: int = 16, deviation_scale: float = 1.0,
                          noise: float = 0.1, seed: int = 0) -> SyntheticSpec:
    """Draw a spec whose region deviations decompose by facet partition.

    Each label gets one shared vector plus one vector per (facet,
    partition); a region's deviation is the sum over its partitions, so
    regions sharing a partition share that component and partial-code
    structure in the labeler is real rather than incidental.
    """
    tasks = tuple(tasks)
    rng = np.random.default_rng(node_seed(seed, "synthetic-spec"))
    scale = 1.0 / np.sqrt(feature_dim)
    w_shared = {}
    w_region = {}
    for name in dict.fromkeys(t.label_key for t in tasks):
        w_shared[name] = rng.normal(size=feature_dim) * scale
        parts = {}
        for f in range(facets.n_facets):
            for p in range(facets.m(f)):
                parts[(f, p)] = rng.normal(size=feature_dim) * scale
        per_region = {}
        for region in full_regions(facets):
            vec = np.zeros(feature_dim)
            for f, p in region.pairs:
                vec += parts[(f, p)]
            per_region[region.text(facets)] = vec
        w_region[name] = per_region
    return SyntheticSpec(facets=facets, tasks=tasks, counts=dict(counts),
                         w_shared=w_shared, w_region=w_region,
                         deviation_scale=deviation_scale, noise=noise,
                         feature_dim=feature_dim, seed=seed)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic dataset with exact per-region counts.

    Features are seeded standard normals. A regression label is
    x . (w_shared + deviation_scale * w_region) plus noise; a binary
    label is Bernoulli of the sigmoid of the same linear form. Draw
    order is fixed (features, then per label column in sorted order,
    then one row shuffle), so equal specs give bitwise equal datasets.
    """
    regions = full_regions(spec.facets)
    counts = _expand_counts(spec, regions)
    total = int(counts.sum())
    if total == 0:
        raise ContractError("synthetic spec yields zero samples")
    rng = np.random.default_rng(spec.seed)
    X = rng.normal(size=(total, spec.feature_dim))
    region_idx = np.repeat(np.arange(len(regions)), counts)
    region_rows = np.array([[c.partition_of(f)
                             for f in range(spec.facets.n_facets)]
                            for c in regions], dtype=np.int64)
    heads = _label_heads(spec.tasks)
    labels = {}
    zero = np.zeros(spec.feature_dim)
    for name in sorted(heads):
        per_region = spec.w_region.get(name, {})
        W = np.stack([spec.w_shared[name]
                      + spec.deviation_scale
                      * per_region.get(r.text(spec.facets), zero)
                      for r in regions])
        z = np.einsum("nd,nd->n", X, W[region_idx])
        if heads[name] == "regression":
            labels[name] = z + spec.noise * rng.normal(size=total)
        else:
            labels[name] = (rng.random(total) < sigmoid(z)).astype(float)
    perm = rng.permutation(total)
    return Dataset(spec.facets, X[perm], region_rows[region_idx][perm],
                   {k: v[perm] for k, v in labels.items()},
                   provenance=f"synthetic:{spec_digest(spec)}")


# ---------------------------------------------------------------------------
# CSV interchange


def write_csv(dataset: Dataset, path) -> None:
    """Header then rows; floats via repr so reloading is exact."""
    facet_cols = [dataset.facets.facet_name(f)
                  for f in range(dataset.facets.n_facets)]
    raw_cols = [c for c in RAW_COLUMNS if c in dataset.raw]
    raw_cols += sorted(set(dataset.raw) - set(RAW_COLUMNS))
    label_cols = sorted(dataset.labels)
    header = ([f"f{j}" for j in range(dataset.feature_dim)]
              + facet_cols + raw_cols + label_cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(x)) for x in dataset.X[i]]
            row += [dataset.facets.partitions(f)[dataset.regions[i, f]]
                    for f in range(dataset.facets.n_facets)]
            row += [repr(float(dataset.raw[c][i])) for c in raw_cols]
            row += [repr(float(dataset.labels[c][i])) for c in label_cols]
            writer.writerow(row)


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}: non-numeric value {cell!r} in column "
                        f"{column!r}") from None


def load_csv(path, facets: FacetSpec, labels=(),
             raw=RAW_COLUMNS) -> Dataset:
    """Parse a CSV against the facet vocabulary.

    Feature columns must be f0..f{d-1}; each facet needs a column named
    after it holding partition names; every requested label column must
    be present. Raw columns are picked up when present. Unknown extra
    columns are ignored. Row numbers in errors count data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, no header row")
        col = {name: j for j, name in enumerate(header)}
        feat_names = sorted((n for n in header if re.fullmatch(r"f\d+", n)),
                            key=lambda s: int(s[1:]))
        d = len(feat_names)
        if d == 0:
            raise SchemaError("missing column 'f0': no feature columns")
        if feat_names != [f"f{j}" for j in range(d)]:
            raise SchemaError(f"feature columns must be contiguous f0..f{d-1},"
                              f" got {feat_names}")
        facet_cols = []
        for f in range(facets.n_facets):
            name = facets.facet_name(f)
            if name not in col:
                raise SchemaError(f"missing column {name!r}")
            facet_cols.append(col[name])
        for name in labels:
            if name not in col:
                raise SchemaError(f"missing column {name!r}")
        raw_present = [c for c in raw if c in col]

        X_rows, region_rows = [], []
        label_vals = {name: [] for name in labels}
        raw_vals = {name: [] for name in raw_present}
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"row {i}: expected {len(header)} cells, "
                                f"got {len(row)}")
            X_rows.append([_parse_float(row[col[n]], i, n)
                           for n in feat_names])
            parts = []
            for f, j in enumerate(facet_cols):
                value = row[j]
                names = facets.partitions(f)
                if value not in names:
                    raise DataError(
                        f"row {i}: unknown partition {value!r} for facet "
                        f"{facets.facet_name(f)!r}")
                parts.append(names.index(value))
            region_rows.append(parts)
            for name in labels:
                label_vals[name].append(_parse_float(row[col[name]], i, name))
            for name in raw_present:
                raw_vals[name].append(_parse_float(row[col[name]], i, name))

    n = len(X_rows)
    return Dataset(
        facets,
        np.asarray(X_rows, dtype=float).reshape(n, d),
        np.asarray(region_rows, dtype=np.int64).reshape(n, facets.n_facets),
        {k: np.asarray(v, dtype=float) for k, v in label_vals.items()},
        {k: np.asarray(v, dtype=float) for k, v in raw_vals.items()},
        provenance=str(path))


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, fraction=None, seed: int = 0,
          time_threshold=None, time_column: str = "time"):
    """(train, test), disjoint and exhaustive, by exactly one policy.

    fraction: seeded shuffle, then the rounded prefix trains; row order
    inside each side keeps the original dataset order. time_threshold:
    rows with time strictly below it train, the rest test.
    """
    n = len(dataset)
    if (fraction is None) == (time_threshold is None):
        raise ConfigError("give exactly one of fraction or time_threshold")
    if fraction is not None:
        if not 0 < fraction < 1:
            raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
        rng = np.random.default_rng(node_seed(seed, "split"))
        perm = rng.permutation(n)
        k = int(round(fraction * n))
        train_idx, test_idx = np.sort(perm[:k]), np.sort(perm[k:])
    else:
        if time_column not in dataset.raw:
            raise DataError(f"dataset lacks time column {time_column!r}")
        t = dataset.raw[time_column]
        train_idx = np.flatnonzero(t < time_threshold)
        test_idx = np.flatnonzero(t >= time_threshold)
    if train_idx.size == 0:
        raise ContractError("empty train split")
    if test_idx.size == 0:
        raise ContractError("empty test split")
    return dataset.take(train_idx), dataset.take(test_idx)
