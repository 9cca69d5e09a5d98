"""Timestamped feature vectors, time periods, split views and a synthetic drift generator."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

BENIGN, MALWARE, UNLABELED = 0, 1, -1
LABEL_CODES = {"benign": BENIGN, "malware": MALWARE, "unlabeled": UNLABELED}
LABEL_NAMES = {v: k for k, v in LABEL_CODES.items()}

TRAIN, VAL, TEST = 0, 1, 2
ROLE_NAMES = ("train", "val", "test")

DAY = 86400
WEEK = 7 * DAY


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    timestamp: int
    label: str
    family: str | None
    features: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.timestamp == other.timestamp
            and self.label == other.label
            and self.family == other.family
            and np.array_equal(self.features, other.features)
        )


class SampleTable:
    """Column-oriented collection of samples sharing one feature dimension."""

    def __init__(self, ids, timestamps, labels, families, X):
        self.ids = list(ids)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int8)
        self.families = np.asarray(families, dtype=object)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(self.ids), -1)
        self.X = X
        n = len(self.ids)
        if not (len(self.timestamps) == len(self.labels) == len(self.families) == X.shape[0] == n):
            raise DataError("column lengths differ")
        if n and not np.all(np.isfinite(X)):
            raise DataError("features must be finite")

    @classmethod
    def empty(cls, dim: int = 0) -> "SampleTable":
        return cls([], [], [], [], np.zeros((0, dim)))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleTable":
        if not samples:
            return cls.empty()
        dims = {len(s.features) for s in samples}
        if len(dims) != 1:
            raise DataError(f"inconsistent feature dimensions {sorted(dims)}")
        return cls(
            [s.id for s in samples],
            [s.timestamp for s in samples],
            [LABEL_CODES[s.label] for s in samples],
            [s.family for s in samples],
            np.vstack([np.asarray(s.features, dtype=np.float64) for s in samples]),
        )

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            self.ids[i],
            int(self.timestamps[i]),
            LABEL_NAMES[int(self.labels[i])],
            self.families[i],
            self.X[i].copy(),
        )

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SampleTable":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleTable(
            [self.ids[i] for i in idx],
            self.timestamps[idx],
            self.labels[idx],
            self.families[idx],
            self.X[idx],
        )

    def with_features(self, X: np.ndarray) -> "SampleTable":
        return SampleTable(self.ids, self.timestamps, self.labels, self.families, X)

    def family_names(self) -> list[str]:
        return sorted({f for f, y in zip(self.families, self.labels) if f is not None and y == MALWARE})


def ingest_jsonl(path: str | Path) -> SampleTable:
    """Read a JSON Lines dataset; errors name the 1-based line number."""
    ids, ts, labels, fams, rows = [], [], [], [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = rec["id"]
                stamp = rec["timestamp"]
                label = rec["label"]
                family = rec.get("family")
                feats = rec["features"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"line {lineno}: malformed record ({exc})") from None
            if not isinstance(sid, str):
                raise DataError(f"line {lineno}: id must be a string")
            if isinstance(stamp, bool) or not isinstance(stamp, int):
                raise DataError(f"line {lineno}: timestamp must be an integer")
            if label not in LABEL_CODES:
                raise DataError(f"line {lineno}: unknown label {label!r}")
            if family is not None and not isinstance(family, str):
                raise DataError(f"line {lineno}: family must be a string or null")
            try:
                vec = np.asarray(feats, dtype=np.float64)
            except (TypeError, ValueError):
                raise DataError(f"line {lineno}: features must be an array of numbers") from None
            if vec.ndim != 1:
                raise DataError(f"line {lineno}: features must be a flat array")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataError(f"line {lineno}: feature dimension {vec.size} differs from {dim}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"line {lineno}: non-finite feature value")
            ids.append(sid)
            ts.append(stamp)
            labels.append(LABEL_CODES[label])
            fams.append(family)
            rows.append(vec)
    if not ids:
        return SampleTable.empty()
    return SampleTable(ids, ts, labels, fams, np.vstack(rows))


def write_jsonl(table: SampleTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(table)):
            rec = {
                "id": table.ids[i],
                "timestamp": int(table.timestamps[i]),
                "label": LABEL_NAMES[int(table.labels[i])],
                "family": table.families[i],
                "features": table.X[i].tolist(),
            }
            fh.write(json.dumps(rec, allow_nan=False))
            fh.write("\n")


@dataclass(frozen=True, eq=False)
class PeriodPartition:
    """Assignment of every sample to a 1-based time period T_1..T_N."""

    table: SampleTable
    period_length: int
    origin: int
    period: np.ndarray
    n_periods: int
    first_offset: int = 0
    roles: np.ndarray | None = None

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.period == i)

    def period_start(self, i: int) -> int:
        return self.origin + (self.first_offset + i - 1) * self.period_length

    def sizes(self) -> list[int]:
        return np.bincount(self.period, minlength=self.n_periods + 1)[1:].tolist()

    def with_roles(self, roles: np.ndarray) -> "PeriodPartition":
        roles = np.asarray(roles, dtype=np.int8)
        if roles.shape != self.period.shape:
            raise ValueError("one role per sample is required")
        return dataclasses.replace(self, roles=roles)

    def restrict(self, idx) -> "PeriodPartition":
        """Partition of a subset of samples, keeping the period numbering."""
        idx = np.asarray(idx, dtype=np.int64)
        return PeriodPartition(
            self.table.subset(idx),
            self.period_length,
            self.origin,
            self.period[idx],
            self.n_periods,
            self.first_offset,
            None if self.roles is None else self.roles[idx],
        )


def partition_by_time(
    table: SampleTable,
    period_length: int,
    origin: int | None = None,
) -> PeriodPartition:
    """Bin samples into periods of ``period_length`` seconds.

    The default origin is the earliest timestamp truncated to a period
    boundary. Leading and trailing empty periods are dropped.
    """
    if len(table) == 0:
        raise DataError("cannot partition an empty dataset")
    if period_length <= 0:
        raise ValueError("period_length must be positive")
    ts = table.timestamps
    if origin is None:
        origin = (int(ts.min()) // period_length) * period_length
    raw = (ts - origin) // period_length
    first = int(raw.min())
    period = (raw - first + 1).astype(np.int64)
    return PeriodPartition(table, int(period_length), int(origin), period, int(period.max()), first)


def role_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder split of n items; ties favour the larger ratio."""
    exact = [n * r for r in ratios]
    counts = [math.floor(e + 1e-9) for e in exact]
    left = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda j: (-(exact[j] - counts[j]), -ratios[j], j))
    for j in order[:left]:
        counts[j] += 1
    return counts


def assign_roles(
    partition: PeriodPartition,
    ratios: Sequence[float] = (0.7, 0.2, 0.1),
    seed: int = 0,
) -> np.ndarray:
    """Seeded per-period random train/val/test roles (codes TRAIN, VAL, TEST)."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    roles = np.empty(len(partition.period), dtype=np.int8)
    for i in range(1, partition.n_periods + 1):
        members = partition.members(i)
        perm = rng.permutation(members)
        n_train, n_val, _ = role_counts(len(members), ratios)
        roles[perm[:n_train]] = TRAIN
        roles[perm[n_train:n_train + n_val]] = VAL
        roles[perm[n_train + n_val:]] = TEST
    return roles


@dataclass(frozen=True)
class Normalizer:
    q01: np.ndarray
    q99: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        Z = np.clip(np.asarray(X, dtype=np.float64), self.q01, self.q99)
        ok = self.std >= 1e-12
        out = np.zeros_like(Z)
        out[:, ok] = (Z[:, ok] - self.mean[ok]) / self.std[ok]
        return out

    def invert(self, Z: np.ndarray) -> np.ndarray:
        """Map normalized values back to the clamped raw scale."""
        ok = self.std >= 1e-12
        return np.where(ok, Z * np.where(ok, self.std, 0.0) + self.mean, self.mean)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("q01", "q99", "mean", "std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("q01", "q99", "mean", "std")))


def nearest_rank(sorted_cols: np.ndarray, p: float) -> np.ndarray:
    n = sorted_cols.shape[0]
    idx = min(max(math.ceil(p * n - 1e-9) - 1, 0), n - 1)
    return sorted_cols[idx].copy()


def fit_normalizer(X: np.ndarray, lower: float = 0.01, upper: float = 0.99) -> Normalizer:
    """Percentile clamp bounds plus mean/std of the clamped training values."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot fit a normalizer on an empty pool")
    s = np.sort(X, axis=0)
    q01 = nearest_rank(s, lower)
    q99 = nearest_rank(s, upper)
    C = np.clip(X, q01, q99)
    return Normalizer(q01, q99, C.mean(axis=0), C.std(axis=0))


def apply_normalizer(norm: Normalizer, X: np.ndarray) -> np.ndarray:
    return norm.apply(X)


@dataclass(frozen=True)
class TimeSplitSpec:
    k: int
    w1: int
    w2: int = 0

    def validate(self, n_periods: int) -> None:
        if self.w1 < 1 or self.w2 < 0:
            raise DataError("w1 must be >= 1 and w2 >= 0")
        if not self.w1 < self.k:
            raise DataError(f"split k={self.k} needs w1 < k (w1={self.w1})")
        if self.k + self.w2 > n_periods:
            raise DataError(f"split k={self.k}, w2={self.w2} exceeds {n_periods} periods")

    @property
    def train_periods(self) -> range:
        return range(self.k - self.w1, self.k)

    @property
    def test_periods(self) -> range:
        return range(self.k, self.k + self.w2 + 1)


def admissible_splits(n_periods: int, w1: int, w2: int = 0) -> list[TimeSplitSpec]:
    return [TimeSplitSpec(k, w1, w2) for k in range(w1 + 1, n_periods - w2 + 1)]


@dataclass(frozen=True, eq=False)
class SplitView:
    """Index pools into ``partition.table`` for one time split."""

    partition: PeriodPartition
    spec: TimeSplitSpec
    method_tag: str
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def table(self) -> SampleTable:
        return self.partition.table

    def past_train_idx(self) -> np.ndarray:
        """Training-pool samples from the training window only."""
        return self.train_idx[self.partition.period[self.train_idx] < self.spec.k]

    def future_train_idx(self) -> np.ndarray:
        """Training-pool samples drawn from the testing window (upper_bound only)."""
        return self.train_idx[self.partition.period[self.train_idx] >= self.spec.k]

    def leakage_ok(self) -> bool:
        ts = self.table.timestamps
        fit = np.concatenate([self.past_train_idx(), self.val_idx])
        if len(fit) == 0 or len(self.test_idx) == 0:
            return True
        return bool(ts[fit].max() < ts[self.test_idx].min())


def make_split_view(partition: PeriodPartition, spec: TimeSplitSpec, method_tag: str = "normal") -> SplitView:
    if partition.roles is None:
        raise ValueError("assign roles before building split views")
    if method_tag not in ("normal", "upper_bound"):
        raise ValueError(f"unknown split view tag {method_tag!r}")
    spec.validate(partition.n_periods)
    per = partition.period
    roles = partition.roles
    labeled = partition.table.labels != UNLABELED
    in_train = (per >= spec.k - spec.w1) & (per < spec.k)
    in_test = (per >= spec.k) & (per <= spec.k + spec.w2)
    train = labeled & in_train & (roles == TRAIN)
    if method_tag == "upper_bound":
        train = train | (labeled & in_test & (roles == TRAIN))
    val = labeled & in_train & (roles == VAL)
    test = labeled & in_test & (roles == TEST)
    return SplitView(
        partition, spec, method_tag,
        np.flatnonzero(train), np.flatnonzero(val), np.flatnonzero(test),
    )


@dataclass
class SynthConfig:
    """Synthetic drifting-malware benchmark.

    Benign samples come from a fixed Gaussian mixture. Each malware family is a
    Gaussian whose mean moves every period by its velocity (``drift_velocity``
    may be one scale for all families or one per family) along a straight line
    that passes closest to the benign centre, at distance ``separation``, in the
    middle of the timeline. A family also occasionally copies a
    block of another family's drift offset (``adoption_rate``), and pulls the
    coordinates a linear probe relies on toward the benign mean
    (``adaptation_strength``).
    """

    n_families: int = 8
    n_periods: int = 10
    dim: int = 100
    samples_per_period_per_class: int = 2000
    drift_velocity: float | list[float] = 1.6
    adoption_rate: float = 0.05
    adaptation_strength: float = 0.05
    noise_scale: float = 1.0
    seed: int = 0
    separation: float = 3.0
    toward_benign: float = 0.0
    benign_components: int = 4
    benign_spread: float = 5.0  # typical norm of a benign component mean
    adaptation_fraction: float = 0.1
    period_length: int = WEEK
    start_timestamp: int = 1562198400  # 2019-07-04T00:00:00Z, a multiple of WEEK

    def __post_init__(self):
        for name in ("n_families", "n_periods", "dim", "samples_per_period_per_class", "benign_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.adoption_rate <= 1.0:
            raise ValueError("adoption_rate must lie in [0, 1]")
        if not 0.0 <= self.toward_benign <= 1.0:
            raise ValueError("toward_benign must lie in [0, 1]")
        if self.noise_scale < 0 or self.benign_spread < 0:
            raise ValueError("noise_scale and benign_spread must be >= 0")
        if isinstance(self.drift_velocity, (list, tuple)) and len(self.drift_velocity) != self.n_families:
            raise ValueError("per-family drift_velocity needs one value per family")

    def velocities(self) -> np.ndarray:
        v = np.asarray(self.drift_velocity, dtype=np.float64)
        return np.broadcast_to(v, (self.n_families,)).copy()


@dataclass
class SynthTruth:
    """Ground-truth family means per period, returned alongside generated data."""

    benign_means: np.ndarray
    family_means: np.ndarray  # (n_periods, n_families, dim)
    families: list[str] = field(default_factory=list)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def synth_generate(config: SynthConfig, return_truth: bool = False):
    """Generate a seeded synthetic dataset with drifting malware families."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    F = cfg.n_families
    benign_means = rng.normal(scale=cfg.benign_spread / math.sqrt(d), size=(cfg.benign_components, d))
    benign_center = benign_means.mean(axis=0)

    sep_dirs = np.array([_unit(rng.normal(size=d)) for _ in range(F)])
    ortho = []
    for f in range(F):
        r = rng.normal(size=d)
        r -= r.dot(sep_dirs[f]) * sep_dirs[f]
        ortho.append(_unit(r))
    ortho = np.array(ortho)
    tb = cfg.toward_benign
    directions = np.array([_unit(-tb * sep_dirs[f] + math.sqrt(1 - tb * tb) * ortho[f]) for f in range(F)])
    velocity = cfg.velocities()[:, None] * directions
    # straight-line paths placed so each family passes the benign centre mid-timeline
    anchor = benign_center + cfg.separation * sep_dirs
    mid = (cfg.n_periods - 1) / 2
    extra = np.zeros((F, d))  # adoption and adaptation moves on top of the path

    means = np.zeros((cfg.n_periods, F, d))
    n_adapt = max(1, int(round(cfg.adaptation_fraction * d)))
    block = max(1, d // 10)
    per_family = np.full(F, cfg.samples_per_period_per_class // F)
    per_family[: cfg.samples_per_period_per_class % F] += 1
    names = [f"fam{f:02d}" for f in range(F)]

    ids, ts, labels, fams, rows = [], [], [], [], []
    counter = 0
    prev_mal = prev_ben = None
    for p in range(cfg.n_periods):
        if p > 0:
            offset = (p - mid) * velocity + extra
            for f in range(F):
                if F > 1 and rng.random() < cfg.adoption_rate:
                    g = int(rng.integers(F - 1))
                    g += g >= f
                    start = int(rng.integers(0, d - block + 1))
                    sl = slice(start, start + block)
                    extra[f, sl] += offset[g, sl] - offset[f, sl]
            if cfg.adaptation_strength > 0:
                probe = prev_mal.mean(axis=0) - prev_ben.mean(axis=0)
                top = np.argsort(-np.abs(probe), kind="stable")[:n_adapt]
                cur = anchor + (p - mid) * velocity + extra
                extra[:, top] += cfg.adaptation_strength * (benign_center[top] - cur[:, top])
        means[p] = anchor + (p - mid) * velocity + extra

        n = cfg.samples_per_period_per_class
        comp = rng.integers(cfg.benign_components, size=n)
        ben = benign_means[comp] + cfg.noise_scale * rng.normal(size=(n, d))
        mal_parts, mal_fams = [], []
        for f in range(F):
            m = int(per_family[f])
            mal_parts.append(means[p, f] + cfg.noise_scale * rng.normal(size=(m, d)))
            mal_fams += [names[f]] * m
        mal = np.vstack(mal_parts)
        prev_ben, prev_mal = ben, mal

        X = np.vstack([ben, mal])
        lab = [BENIGN] * n + [MALWARE] * len(mal_fams)
        fam = [None] * n + mal_fams
        start_ts = cfg.start_timestamp + p * cfg.period_length
        stamps = start_ts + rng.integers(0, cfg.period_length, size=len(lab))
        order = np.argsort(stamps, kind="stable")
        for j in order:
            ids.append(f"s{counter:07d}")
            counter += 1
            ts.append(int(stamps[j]))
            labels.append(lab[j])
            fams.append(fam[j])
            rows.append(X[j])

    table = SampleTable(ids, ts, labels, fams, np.vstack(rows))
    if return_truth:
        return table, SynthTruth(benign_means, means, names)
    return table
