"""Time-split training and evaluation of the classifier regimes.

A sweep is a set of cells, one per (split k, method, seed). Each cell trains
one classifier, keeps the best epoch for every FPR target on validation data
and evaluates those checkpoints on the split's test pool. Rows of a cell are
written to the results CSV together, and cell completion is journaled next to
it so an interrupted run can resume where it stopped.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attacks import AttackConfig, ProjectionBox, attack, fit_projection_box
from .dataset import (
    BENIGN,
    MALWARE,
    UNLABELED,
    WEEK,
    Normalizer,
    PeriodPartition,
    SampleTable,
    TimeSplitSpec,
    admissible_splits,
    assign_roles,
    fit_normalizer,
    make_split_view,
    partition_by_time,
)
from .drift import KernelConfig, rank_families
from .errors import BankUnavailableError, DataError, DriftforgeError
from .gan import GanTrainConfig, PredictorBank, build_predictor_bank, predict_samples
from .nn import Adam, MlpModel, cross_entropy, forward, backward, l1_logistic_select, mlp_layers, softmax

log = logging.getLogger(__name__)

METHOD_TAGS = ("normal", "upper_bound", "adv_fgsm", "adv_pgd", "ccygan")
STUDIES = ("sweep", "degradation", "robustness")
FEATURE_MODES = ("full", "reduced")
CSV_HEADER = ["split_k", "method", "fpr_target", "seed", "test_period", "threshold",
              "tpr", "fpr", "f1", "accuracy", "tp", "fp", "tn", "fn"]


@dataclass(frozen=True)
class TrainingMethod:
    tag: str
    attack: AttackConfig | None = None
    bank: PredictorBank | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.tag not in METHOD_TAGS:
            raise ValueError(f"unknown method {self.tag!r}")
        if self.tag.startswith("adv_"):
            if self.attack is None:
                raise ValueError(f"{self.tag} needs an attack configuration")
            if self.attack.method != self.tag[4:]:
                raise ValueError(f"{self.tag} needs a {self.tag[4:]} attack")
        if self.tag == "ccygan" and self.bank is None:
            raise ValueError("ccygan needs a predictor bank")


@dataclass
class ExperimentConfig:
    study: str = "sweep"
    w1: int = 3
    w2: int = 0
    splits: list[int] | None = None  # None: every admissible k
    methods: tuple[str, ...] = ("normal", "upper_bound", "ccygan")
    fpr_targets: tuple[float, ...] = (0.1, 0.01, 0.001)
    seeds: tuple[int, ...] = (0, 1, 2)
    max_epochs: int = 50
    minibatch_size: int | None = None  # None: 128 in full mode, 512 in reduced mode
    learning_rate: float = 0.01
    feature_mode: str = "reduced"
    n_features: int = 100
    l1_strength: float = 0.01
    classifier_hidden: tuple[int, ...] | None = None  # None: mode default
    dropout: float = 0.2
    batchnorm: bool = True
    period_length: int = WEEK
    role_ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    role_seed: int = 0
    fgsm_epsilon: float = 0.1
    pgd_epsilon: float = 1.0
    attack_steps: int = 1
    robustness_attacks: tuple[str, ...] = ()
    top_families: int = 21
    family_min_count: int = 10
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.fpr_targets = tuple(float(t) for t in self.fpr_targets)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.robustness_attacks = tuple(self.robustness_attacks)
        self.role_ratios = tuple(self.role_ratios)
        if self.classifier_hidden is not None:
            self.classifier_hidden = tuple(self.classifier_hidden)
        if self.splits is not None:
            self.splits = [int(k) for k in self.splits]
        if self.study not in STUDIES:
            raise ValueError(f"study must be one of {STUDIES}")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        for m in self.methods:
            if m not in METHOD_TAGS:
                raise ValueError(f"unknown method {m!r}")
        if not self.methods:
            raise ValueError("at least one method is required")
        if not self.fpr_targets or not all(0 < t < 1 for t in self.fpr_targets):
            raise ValueError("fpr_targets must be a non-empty subset of (0, 1)")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.w1 < 1 or self.w2 < 0:
            raise ValueError("w1 must be >= 1 and w2 >= 0")
        for name in ("max_epochs", "n_features", "attack_steps", "top_families"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.minibatch_size is not None and self.minibatch_size < 8:
            raise ValueError("minibatch_size must be >= 8")
        for a in self.robustness_attacks:
            if a not in ("fgsm", "pgd"):
                raise ValueError(f"unknown robustness attack {a!r}")

    @property
    def batch_size(self) -> int:
        if self.minibatch_size is not None:
            return self.minibatch_size
        return 128 if self.feature_mode == "full" else 512

    @property
    def hidden(self) -> tuple[int, ...]:
        if self.classifier_hidden is not None:
            return self.classifier_hidden
        return (512,) * 10 if self.feature_mode == "full" else (128,) * 4

    def attack_for(self, name: str) -> AttackConfig:
        eps = self.fgsm_epsilon if name == "fgsm" else self.pgd_epsilon
        return AttackConfig(name, eps, self.attack_steps)

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(dataclasses.astuple(self)).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class MetricsRecord:
    split_k: int
    method: str
    fpr_target: float
    seed: int
    test_period: int
    threshold: float
    tpr: float
    fpr: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    def row(self) -> list[str]:
        def num(v):
            return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))
        return [str(self.split_k), self.method, num(self.fpr_target), str(self.seed), str(self.test_period),
                num(self.threshold), num(self.tpr), num(self.fpr), num(self.f1), num(self.accuracy),
                str(self.tp), str(self.fp), str(self.tn), str(self.fn)]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "MetricsRecord":
        if len(row) != len(CSV_HEADER):
            raise DataError(f"results row has {len(row)} fields, expected {len(CSV_HEADER)}")
        try:
            return cls(int(row[0]), row[1], float(row[2]), int(row[3]), int(row[4]), float(row[5]),
                       float(row[6]), float(row[7]), float(row[8]), float(row[9]),
                       int(row[10]), int(row[11]), int(row[12]), int(row[13]))
        except ValueError as exc:
            raise DataError(f"malformed results row {list(row)!r}: {exc}") from exc


def read_results(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataError(f"{path}: unexpected results header {header!r}")
        return [MetricsRecord.from_row(r) for r in reader]


# -- minibatches ------------------------------------------------------------

AuxSource = Callable[[int, np.random.Generator, np.ndarray], np.ndarray]


def build_minibatch(
    method: str,
    clean_pool: np.ndarray,
    malware_pool: np.ndarray,
    aux_source: AuxSource | None,
    size: int,
    rng: np.random.Generator,
    full_mode: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labeled batch for one training step.

    ``aux_source(n, rng, malware_rows)`` supplies the auxiliary malware: future
    samples (upper_bound), predicted samples (ccygan) or adversarial versions
    of ``malware_rows`` (adv_*).
    """
    if len(clean_pool) == 0 or len(malware_pool) == 0:
        raise DataError("training pools must contain both classes")
    if method not in METHOD_TAGS:
        raise ValueError(f"unknown method {method!r}")
    if method != "normal" and aux_source is None:
        raise DataError(f"{method} needs an auxiliary sample source")

    def draw(pool, n):
        return pool[rng.integers(len(pool), size=n)]

    if method == "normal":
        half = size // 2
        X = np.vstack([draw(clean_pool, half), draw(malware_pool, size - half)])
        y = np.r_[np.zeros(half, np.int64), np.ones(size - half, np.int64)]
    elif full_mode and method.startswith("adv_"):
        n = size // 4
        clean = draw(clean_pool, n)
        mal = draw(malware_pool, n)
        adv = aux_source(n, rng, mal)
        X = np.vstack([clean, clean, mal, adv])
        y = np.r_[np.zeros(2 * n, np.int64), np.ones(2 * n, np.int64)]
    else:
        half = size // 2
        n_aux = size // 8
        n_raw = size - half - n_aux
        mal = draw(malware_pool, n_raw)
        aux = aux_source(n_aux, rng, mal[:n_aux])
        if len(aux) != n_aux:
            raise DataError("auxiliary source returned the wrong number of samples")
        X = np.vstack([draw(clean_pool, half), mal, aux])
        y = np.r_[np.zeros(half, np.int64), np.ones(size - half, np.int64)]
    return X, y


# -- thresholds and metrics ---------------------------------------------------

def select_threshold(clean_scores: np.ndarray, target_fpr: float) -> float:
    """Score at 1-based rank floor(target * n) (at least 1) of the descending clean scores.

    Samples count as malware iff their score is strictly above the threshold,
    so fewer than floor(target * n) clean samples are flagged, and none when
    target * n < 2.
    """
    s = np.sort(np.asarray(clean_scores, dtype=np.float64))[::-1]
    if s.size == 0:
        raise DataError("no clean validation scores to calibrate on")
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must be in (0, 1)")
    return float(s[max(int(math.floor(target_fpr * s.size)) - 1, 0)])


def confusion(scores: np.ndarray, labels: np.ndarray, threshold: float) -> tuple[int, int, int, int]:
    pred = np.asarray(scores) > threshold
    labels = np.asarray(labels)
    mal = labels == MALWARE
    ben = labels == BENIGN
    return (int(np.sum(pred & mal)), int(np.sum(pred & ben)), int(np.sum(~pred & ben)), int(np.sum(~pred & mal)))


def rates(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float, float]:
    """(tpr, fpr, f1, accuracy); nan marks a metric undefined for the pool."""
    nan = float("nan")
    tpr = tp / (tp + fn) if tp + fn else nan
    fpr = fp / (fp + tn) if fp + tn else nan
    if tp + fn == 0:
        f1 = nan
    elif tp + fp == 0:
        f1 = 0.0
    else:
        precision = tp / (tp + fp)
        f1 = 2 * precision * tpr / (precision + tpr) if precision + tpr else 0.0
    total = tp + fp + tn + fn
    acc = (tp + tn) / total if total else nan
    return tpr, fpr, f1, acc


def malware_scores(model: MlpModel, X: np.ndarray) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        if len(X) == 0:
            return np.zeros(0)
        return softmax(forward(model, X)[0])[:, 1]
    finally:
        model.training = was


def evaluate(model: MlpModel, threshold: float, X: np.ndarray, y: np.ndarray, *, split_k: int = 0,
             method: str = "", fpr_target: float = float("nan"), seed: int = 0,
             test_period: int = 0) -> MetricsRecord:
    tp, fp, tn, fn = confusion(malware_scores(model, X), y, threshold)
    tpr, fpr, f1, acc = rates(tp, fp, tn, fn)
    return MetricsRecord(split_k, method, fpr_target, seed, test_period, float(threshold),
                         tpr, fpr, f1, acc, tp, fp, tn, fn)


# -- classifier training ----------------------------------------------------

@dataclass
class CellData:
    """Normalized pools for one split, shared by every method of that split."""

    spec: TimeSplitSpec
    normalizer: Normalizer
    box: ProjectionBox
    clean: np.ndarray
    malware: np.ndarray
    val_X: np.ndarray
    val_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray
    test_period: np.ndarray
    ub_clean: np.ndarray  # upper_bound clean pool (past and future train-role)
    future_malware: np.ndarray  # train-role malware of the testing window
    raw_malware: np.ndarray  # un-normalized past malware, input to the predictor bank


@dataclass
class CheckpointHistory:
    val_tpr: list[dict[float, float]] = field(default_factory=list)
    thresholds: list[dict[float, float]] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)


@dataclass
class SelectedModel:
    target: float
    epoch: int
    threshold: float
    val_tpr: float
    state: dict[str, np.ndarray]


@dataclass
class TrainResult:
    model: MlpModel
    selected: dict[float, SelectedModel]
    history: CheckpointHistory

    def model_for(self, target: float) -> MlpModel:
        m = self.model.copy()
        m.load_state_arrays(self.selected[target].state)
        return m.eval()


def make_classifier(dim: int, config: ExperimentConfig, seed) -> MlpModel:
    layers = mlp_layers(dim, config.hidden, 2, batchnorm=config.batchnorm, dropout=config.dropout)
    return MlpModel(layers, seed)


def _aux_source(method: TrainingMethod, data: CellData, model: MlpModel) -> AuxSource | None:
    if method.tag == "upper_bound":
        pool = data.future_malware
        if len(pool) == 0:
            raise DataError("no future malware available for upper_bound")
        return lambda n, rng, _: pool[rng.integers(len(pool), size=n)]
    if method.tag == "ccygan":
        bank = method.bank
        if bank is None or len(bank) == 0:
            raise BankUnavailableError("predictor bank is empty")
        raw = data.raw_malware
        return lambda n, rng, _: data.normalizer.apply(predict_samples(bank, raw, n, rng)[0])
    if method.tag.startswith("adv_"):
        cfg = method.attack
        return lambda n, rng, mal: attack(cfg, model, mal[:n], np.ones(n, dtype=np.int64), data.box)
    return None


def train_classifier(method: TrainingMethod, data: CellData, config: ExperimentConfig,
                     seed: int | np.random.SeedSequence) -> TrainResult:
    """Adam on method-specific minibatches; best epoch per FPR target on validation data."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seq, batch_seq = seq.spawn(2)
    rng = np.random.default_rng(batch_seq)
    dim = data.clean.shape[1]
    model = make_classifier(dim, config, init_seq)
    opt = Adam(model, config.learning_rate)
    aux = _aux_source(method, data, model)
    clean = data.ub_clean if method.tag == "upper_bound" else data.clean
    val_ben = data.val_y == BENIGN
    val_mal = data.val_y == MALWARE
    if not val_ben.any():
        raise DataError("validation pool has no clean samples")
    size = config.batch_size
    steps = max(1, math.ceil((len(clean) + len(data.malware)) / size))
    full = config.feature_mode == "full"
    history = CheckpointHistory()
    best: dict[float, SelectedModel] = {}
    for epoch in range(config.max_epochs):
        model.train()
        total = 0.0
        for _ in range(steps):
            X, y = build_minibatch(method.tag, clean, data.malware, aux, size, rng, full)
            logits, trace = forward(model, X)
            loss, g = cross_entropy(logits, y)
            grads, _ = backward(model, trace, g)
            opt.step(grads)
            total += loss
        history.train_loss.append(total / steps)
        scores = malware_scores(model, data.val_X)
        tprs, thrs = {}, {}
        for t in config.fpr_targets:
            thr = select_threshold(scores[val_ben], t)
            tpr = float(np.mean(scores[val_mal] > thr)) if val_mal.any() else float("nan")
            tprs[t], thrs[t] = tpr, thr
            if t not in best or tpr > best[t].val_tpr:
                best[t] = SelectedModel(t, epoch, thr, tpr,
                                        {n: a.copy() for n, a in model.state_arrays()})
        history.val_tpr.append(tprs)
        history.thresholds.append(thrs)
    model.eval()
    return TrainResult(model, best, history)


def robustness_eval(normal_model: MlpModel, adv_model: MlpModel, attack_cfg: AttackConfig,
                    malware_test: np.ndarray, box: ProjectionBox,
                    thresholds: tuple[float, float]) -> tuple[float, float]:
    """TPR of each model on attack samples generated against itself."""
    out = []
    ones = np.ones(len(malware_test), dtype=np.int64)
    for model, thr in zip((normal_model, adv_model), thresholds):
        adv = attack(attack_cfg, model, malware_test, ones, box)
        out.append(float(np.mean(malware_scores(model, adv) > thr)) if len(adv) else float("nan"))
    return out[0], out[1]


# -- dataset preparation ------------------------------------------------------

@dataclass
class PreparedData:
    partition: PeriodPartition  # roles assigned; features restricted to the selection
    features: np.ndarray
    splits: list[TimeSplitSpec]
    vocabulary: tuple[str, ...] | None = None


def prepare(table: SampleTable, config: ExperimentConfig) -> PreparedData:
    part = partition_by_time(table, config.period_length)
    part = part.with_roles(assign_roles(part, config.role_ratios, config.role_seed))
    w2 = 0 if config.study == "degradation" else config.w2
    specs = admissible_splits(part.n_periods, config.w1, w2)
    if config.splits is not None:
        wanted = set(config.splits)
        specs = [s for s in specs if s.k in wanted]
        missing = wanted - {s.k for s in specs}
        if missing:
            raise DataError(f"splits {sorted(missing)} are not admissible for {part.n_periods} periods")
    if not specs:
        raise DataError(f"{part.n_periods} periods leave no admissible split for w1={config.w1}, w2={w2}")
    feats = np.arange(table.dim)
    if config.feature_mode == "reduced" and config.n_features < table.dim:
        feats = select_features(part, specs[0], config.n_features, config.l1_strength)
    if len(feats) != table.dim:
        part = dataclasses.replace(part, table=table.with_features(table.X[:, feats]))
    return PreparedData(part, feats, specs)


def select_features(part: PeriodPartition, spec: TimeSplitSpec, k: int, l1_strength: float) -> np.ndarray:
    """L1-logistic feature choice on one split's training pool; sorted indices."""
    view = make_split_view(part, spec, "normal")
    X = part.table.X[view.train_idx]
    y = part.table.labels[view.train_idx]
    Z = fit_normalizer(X).apply(X)
    return np.sort(l1_logistic_select(Z, y, l1_strength, k))


def cell_data(part: PeriodPartition, spec: TimeSplitSpec) -> CellData:
    table = part.table
    normal = make_split_view(part, spec, "normal")
    ub = make_split_view(part, spec, "upper_bound")
    if len(normal.train_idx) == 0:
        raise DataError(f"split k={spec.k} has an empty training pool")
    X, y = table.X, table.labels
    tr = normal.train_idx
    norm = fit_normalizer(X[tr])
    clean_idx = tr[y[tr] == BENIGN]
    mal_idx = tr[y[tr] == MALWARE]
    fut = ub.future_train_idx()
    Z = norm.apply(X[tr])
    return CellData(
        spec=spec,
        normalizer=norm,
        box=fit_projection_box(Z),
        clean=norm.apply(X[clean_idx]),
        malware=norm.apply(X[mal_idx]),
        val_X=norm.apply(X[normal.val_idx]),
        val_y=y[normal.val_idx].astype(np.int64),
        test_X=norm.apply(X[normal.test_idx]),
        test_y=y[normal.test_idx].astype(np.int64),
        test_period=part.period[normal.test_idx],
        ub_clean=norm.apply(X[ub.train_idx[y[ub.train_idx] == BENIGN]]),
        future_malware=norm.apply(X[fut[y[fut] == MALWARE]]),
        raw_malware=X[mal_idx],
    )


def family_vocabulary(prepared: PreparedData, config: ExperimentConfig) -> tuple[str, ...]:
    if prepared.vocabulary is None:
        report = rank_families(prepared.partition, prepared.splits, config.top_families,
                               config.family_min_count, KernelConfig())
        prepared.vocabulary = tuple(report.selected)
    return prepared.vocabulary


def predictor_bank(prepared: PreparedData, config: ExperimentConfig) -> PredictorBank:
    """One bank for the whole sweep: generators G_k' for every k' below the largest split."""
    vocab = family_vocabulary(prepared, config)
    k_max = max(s.k for s in prepared.splits)
    return build_predictor_bank(prepared.partition, k_max, config.w1, config.gan, vocab)


def cell_seed(seed: int, k: int, method: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, k, METHOD_TAGS.index(method)])


# -- cells ----------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    k: int
    method: str
    seed: int


def sweep_cells(prepared: PreparedData, config: ExperimentConfig) -> list[Cell]:
    methods = config.methods
    if config.study == "degradation":
        methods = ("normal",)
    return [Cell(s.k, m, seed) for s in prepared.splits for m in methods for seed in config.seeds]


def _method(tag: str, config: ExperimentConfig, bank_fn: Callable[[], PredictorBank], k: int) -> TrainingMethod:
    if tag.startswith("adv_"):
        return TrainingMethod(tag, attack=config.attack_for(tag[4:]))
    if tag == "ccygan":
        bank = bank_fn().restrict(k)
        if len(bank) == 0:
            raise BankUnavailableError(f"no predictor generators precede split k={k}")
        return TrainingMethod(tag, bank=bank)
    return TrainingMethod(tag)


def run_cell(cell: Cell, prepared: PreparedData, config: ExperimentConfig,
             bank_fn: Callable[[], PredictorBank], data_cache: dict) -> list[MetricsRecord]:
    spec = next(s for s in prepared.splits if s.k == cell.k)
    if cell.k not in data_cache:
        data_cache.clear()
        data_cache[cell.k] = cell_data(prepared.partition, spec)
    data = data_cache[cell.k]
    method = _method(cell.method, config, bank_fn, cell.k)
    result = train_classifier(method, data, config, cell_seed(cell.seed, cell.k, cell.method))
    records: list[MetricsRecord] = []
    if config.study == "degradation":
        pools = degradation_pools(prepared.partition, data.normalizer, cell.k)
    else:
        pools = [(j, data.test_X[data.test_period == j], data.test_y[data.test_period == j])
                 for j in spec.test_periods]
    attacks_ = config.robustness_attacks if config.study == "robustness" else ()
    for t in config.fpr_targets:
        sel = result.selected[t]
        model = result.model_for(t)
        for j, X, y in pools:
            records.append(evaluate(model, sel.threshold, X, y, split_k=cell.k, method=cell.method,
                                    fpr_target=t, seed=cell.seed, test_period=j))
        for a in attacks_:
            cfg = config.attack_for(a)
            for j, X, y in pools:
                mal = y == MALWARE
                Xa = X.copy()
                if mal.any():
                    Xa[mal] = attack(cfg, model, X[mal], np.ones(int(mal.sum()), dtype=np.int64), data.box)
                records.append(evaluate(model, sel.threshold, Xa, y, split_k=cell.k,
                                        method=f"{cell.method}@{a}", fpr_target=t, seed=cell.seed,
                                        test_period=j))
    return records


def degradation_pools(part: PeriodPartition, norm: Normalizer, k: int):
    """Every labeled sample of each period from k on, normalized for the window ending at k-1."""
    labels = part.table.labels
    out = []
    for j in range(k, part.n_periods + 1):
        idx = np.flatnonzero((part.period == j) & (labels != UNLABELED))
        out.append((j, norm.apply(part.table.X[idx]), labels[idx].astype(np.int64)))
    return out


def degradation_matrix(records: Iterable[MetricsRecord], fpr_target: float, n_periods: int,
                       seed: int | None = None) -> tuple[list[int], np.ndarray]:
    """TPR by (training window, test period); nan outside the upper triangle.

    Rows are ordered by split k; averaged over seeds unless one is given.
    """
    rows: dict[int, dict[int, list[float]]] = {}
    for r in records:
        if r.method != "normal" or r.fpr_target != fpr_target or (seed is not None and r.seed != seed):
            continue
        rows.setdefault(r.split_k, {}).setdefault(r.test_period, []).append(r.tpr)
    ks = sorted(rows)
    M = np.full((len(ks), n_periods), np.nan)
    for i, k in enumerate(ks):
        for j, vals in rows[k].items():
            M[i, j - 1] = float(np.mean(vals))
    return ks, M


def degradation_study(partition: PeriodPartition, config: ExperimentConfig,
                      features: np.ndarray | None = None) -> list[MetricsRecord]:
    """Train a normal model per window and test it on every later period."""
    if partition.roles is None:
        partition = partition.with_roles(assign_roles(partition, config.role_ratios, config.role_seed))
    specs = admissible_splits(partition.n_periods, config.w1, 0)
    if config.splits is not None:
        specs = [s for s in specs if s.k in set(config.splits)]
    if len(specs) < 3:
        raise DataError("the degradation study needs at least 3 windows")
    cfg = dataclasses.replace(config, study="degradation")
    prepared = PreparedData(partition, np.arange(partition.table.dim) if features is None else features, specs)
    cache: dict = {}
    out: list[MetricsRecord] = []
    for cell in sweep_cells(prepared, cfg):
        out.extend(run_cell(cell, prepared, cfg, lambda: PredictorBank({}, ()), cache))
    return out


# -- results sink -------------------------------------------------------------------

class ResultSink:
    """Results CSV plus a journal of finished cells for crash-safe resume."""

    def __init__(self, path: str | Path, fingerprint: str, resume: bool = False):
        self.path = Path(path)
        self.journal = self.path.with_name(self.path.name + ".progress.jsonl")
        self.skips_path = self.path.with_name(self.path.name + ".skips.csv")
        self.fingerprint = fingerprint
        self.done: dict[tuple, dict] = {}
        self.rows: dict[tuple, list[list[str]]] = {}
        if resume and self.journal.exists():
            self._load()
        else:
            self._start()

    def _start(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)
        with open(self.journal, "w") as fh:
            fh.write(json.dumps({"fingerprint": self.fingerprint}) + "\n")

    def _load(self) -> None:
        lines = self.journal.read_text().splitlines()
        try:
            head = json.loads(lines[0])
        except (IndexError, json.JSONDecodeError) as exc:
            raise DataError(f"{self.journal}: unreadable progress journal") from exc
        if head.get("fingerprint") != self.fingerprint:
            raise DataError("results were produced with a different configuration; rerun without --resume")
        for line in lines[1:]:
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                break  # torn final line
            self.done[tuple(entry["cell"])] = entry
        if self.path.exists():
            with open(self.path, newline="") as fh:
                text = fh.read()
            if not text.endswith("\n"):
                text = text[: text.rfind("\n") + 1]
            reader = csv.reader(text.splitlines()[1:])
            for row in reader:
                key = (int(row[0]), row[1].split("@")[0], int(row[3]))
                if key in self.done:
                    self.rows.setdefault(key, []).append(row)
        # rebuild the CSV from journaled cells only, so torn tails disappear
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for key, rows in self.rows.items():
                w.writerows(rows)
        with open(self.journal, "w") as fh:
            fh.write(json.dumps({"fingerprint": self.fingerprint}) + "\n")
            for entry in self.done.values():
                fh.write(json.dumps(entry) + "\n")

    def is_done(self, cell: Cell) -> bool:
        return (cell.k, cell.method, cell.seed) in self.done

    def _journal(self, entry: dict) -> None:
        with open(self.journal, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.done[tuple(entry["cell"])] = entry

    def write(self, cell: Cell, records: list[MetricsRecord]) -> None:
        rows = [r.row() for r in records]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
            fh.flush()
            os.fsync(fh.fileno())
        self.rows[(cell.k, cell.method, cell.seed)] = rows
        self._journal({"cell": [cell.k, cell.method, cell.seed], "status": "done"})

    def skip(self, cell: Cell, reason: str) -> None:
        self._journal({"cell": [cell.k, cell.method, cell.seed], "status": "skipped", "reason": reason})

    def finalize(self, order: list[Cell]) -> None:
        """Rewrite the CSV and the skip list in sweep order."""
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for c in order:
                w.writerows(self.rows.get((c.k, c.method, c.seed), []))
        with open(self.skips_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split_k", "method", "seed", "reason"])
            for c in order:
                e = self.done.get((c.k, c.method, c.seed))
                if e and e["status"] == "skipped":
                    w.writerow([c.k, c.method, c.seed, e["reason"]])


def run_experiment(
    config: ExperimentConfig,
    dataset: SampleTable,
    out_path: str | Path | None = None,
    resume: bool = False,
    bank: PredictorBank | None = None,
    stop_after: int | None = None,
) -> list[MetricsRecord]:
    """Run every cell of the configured study, appending rows to ``out_path`` as cells finish.

    Cells that fail with a data, numerical or bank error are recorded as skips
    and the sweep continues. ``stop_after`` ends the run after that many newly
    computed cells (used to simulate an interruption).
    """
    prepared = prepare(dataset, config)
    cells = sweep_cells(prepared, config)
    sink = ResultSink(out_path, config.fingerprint(), resume) if out_path is not None else None
    bank_box: list[PredictorBank] = [bank] if bank is not None else []

    def bank_fn() -> PredictorBank:
        if not bank_box:
            bank_box.append(predictor_bank(prepared, config))
        return bank_box[0]

    cache: dict = {}
    records: list[MetricsRecord] = []
    computed = 0
    for cell in cells:
        if sink is not None and sink.is_done(cell):
            continue
        if stop_after is not None and computed >= stop_after:
            return records
        try:
            recs = run_cell(cell, prepared, config, bank_fn, cache)
        except (DriftforgeError, ValueError) as exc:
            log.warning("cell k=%d %s seed=%d skipped: %s", cell.k, cell.method, cell.seed, exc)
            if sink is not None:
                sink.skip(cell, f"{type(exc).__name__}: {exc}")
            computed += 1
            continue
        computed += 1
        log.info("cell k=%d %s seed=%d done", cell.k, cell.method, cell.seed)
        if sink is not None:
            sink.write(cell, recs)
        records.extend(recs)
    if sink is not None:
        sink.finalize(cells)
        return read_results(sink.path)
    return records
