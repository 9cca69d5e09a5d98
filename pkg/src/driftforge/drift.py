"""Maximum mean discrepancy with an RBF kernel, and per-family drift ranking."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import MALWARE, TRAIN, PeriodPartition, TimeSplitSpec
from .errors import DataError

MEDIAN = "median_heuristic"
DEFAULT_CAP = 1000


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "rbf"
    bandwidth: float | str = MEDIAN
    cap: int = DEFAULT_CAP
    seed: int = 0

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN:
                raise ValueError(f"bandwidth must be a positive number or {MEDIAN!r}")
        elif not self.bandwidth > 0:
            raise ValueError("explicit bandwidth must be positive")
        if self.cap < 2:
            raise ValueError("cap must be >= 2")


def _canonical(X: np.ndarray) -> np.ndarray:
    # row order must not influence subsampling or summation order
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) < 2:
        return X
    return X[np.lexsort(X.T[::-1])]


def _subsample(X: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if len(X) <= cap:
        return X
    idx = np.sort(np.random.default_rng(seed).choice(len(X), size=cap, replace=False))
    return X[idx]


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * (X @ Y.T)
    return np.maximum(d2, 0.0)


def median_heuristic(samples: np.ndarray, cap: int = DEFAULT_CAP, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over a seeded subsample; 1.0 if that median is zero."""
    X = _subsample(_canonical(samples), cap, seed)
    if len(X) < 2:
        raise ValueError("median heuristic needs at least 2 samples")
    iu = np.triu_indices(len(X), k=1)
    med = float(np.median(np.sqrt(_sq_dists(X, X)[iu])))
    return med if med > 0 else 1.0


def rbf(X: np.ndarray, Y: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-_sq_dists(X, Y) / (2.0 * sigma * sigma))


def mmd_biased(X: np.ndarray, Y: np.ndarray, kernel: KernelConfig = KernelConfig()) -> float:
    """Root of the biased (V-statistic) squared MMD, floored at zero.

    Both sets are put in a canonical row order first, so the value depends
    only on the multisets and is exactly symmetric in its arguments.
    """
    X, Y = _canonical(X), _canonical(Y)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("mmd needs two non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sets differ in dimension")
    if (len(X), X.tobytes()) > (len(Y), Y.tobytes()):
        X, Y = Y, X
    X = _subsample(X, kernel.cap, kernel.seed)
    Y = _subsample(Y, kernel.cap, kernel.seed)
    if kernel.bandwidth == MEDIAN:
        sigma = median_heuristic(np.vstack([X, Y]), kernel.cap, kernel.seed)
    else:
        sigma = float(kernel.bandwidth)
    xx = rbf(X, X, sigma).mean()
    yy = rbf(Y, Y, sigma).mean()
    xy = rbf(X, Y, sigma).mean()
    return float(np.sqrt(max((xx + yy) - 2.0 * xy, 0.0)))


@dataclass(frozen=True)
class FamilyDriftReport:
    families: tuple[str, ...]  # ranked, most drifting first
    split_ks: tuple[int, ...]
    mmd: np.ndarray  # (families, splits), nan where a cell was skipped
    sums: np.ndarray
    top_m: int

    @property
    def selected(self) -> list[str]:
        return list(self.families[: self.top_m])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", *[f"mmd_k{k}" for k in self.split_ks], "sum", "rank"])
            for rank, (fam, row, total) in enumerate(zip(self.families, self.mmd, self.sums), start=1):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
                w.writerow([fam, *cells, repr(float(total)), rank])


def rank_families(
    partition: PeriodPartition,
    splits: Sequence[TimeSplitSpec],
    top_m: int = 21,
    min_count: int = 10,
    kernel: KernelConfig = KernelConfig(),
) -> FamilyDriftReport:
    """Rank malware families by MMD between their training-window and testing-window samples.

    When roles are assigned only train-role samples are used, so test pools stay unseen.
    """
    if not splits:
        raise ValueError("at least one split is required")
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    table = partition.table
    usable = table.labels == MALWARE
    if partition.roles is not None:
        usable &= partition.roles == TRAIN
    families = table.family_names()
    fam_col = table.families
    mmd = np.full((len(families), len(splits)), np.nan)
    for s, spec in enumerate(splits):
        in_train = usable & np.isin(partition.period, list(spec.train_periods))
        in_test = usable & np.isin(partition.period, list(spec.test_periods))
        for f, fam in enumerate(families):
            is_fam = fam_col == fam
            a = table.X[in_train & is_fam]
            b = table.X[in_test & is_fam]
            if len(a) >= min_count and len(b) >= min_count:
                mmd[f, s] = mmd_biased(a, b, kernel)
    if np.all(np.isnan(mmd)):
        raise DataError(f"no family has {min_count} samples on both sides of any split")
    sums = np.nansum(mmd, axis=1)
    order = sorted(range(len(families)), key=lambda f: (-sums[f], families[f]))
    return FamilyDriftReport(
        tuple(families[f] for f in order),
        tuple(spec.k for spec in splits),
        mmd[order],
        sums[order],
        top_m,
    )
