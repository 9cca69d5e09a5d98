"""Family-conditioned CycleGANs that learn one-period malware drift, and a bank of them.

Each generator maps a sample plus a one-hot family code to a sample of the
same dimension. Generators are residual by default: ``G(z, y) = z + net([z, y])``,
which starts them near a small perturbation of the identity and suits the
small per-period shifts they are meant to learn.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import MALWARE, TRAIN, Normalizer, PeriodPartition, fit_normalizer
from .errors import BankUnavailableError, DataError, NumericalError
from .nn import Adam, LayerSpec, MlpModel, backward, forward, mlp_layers

log = logging.getLogger(__name__)

BANK_FORMAT = "driftforge-bank/1"


@dataclass(frozen=True)
class GanArch:
    gen_hidden: tuple[int, ...] = (256, 256)
    disc_hidden: tuple[int, ...] = (128, 64)
    disc_dropout: float = 0.2
    residual: bool = True


@dataclass(frozen=True)
class GanTrainConfig:
    learning_rate: float = 1e-4
    total_steps: int = 3500
    minibatch: int = 512
    alternation_period: int = 50
    lambda_cyc: float = 1.0
    seed: int = 0
    arch: GanArch = field(default_factory=GanArch)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("total_steps", "minibatch", "alternation_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lambda_cyc < 0:
            raise ValueError("lambda_cyc must be >= 0")


def one_hot(codes: np.ndarray, n: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= n):
        raise ValueError(f"family code out of range for vocabulary of size {n}")
    out = np.zeros((codes.size, n))
    out[np.arange(codes.size), codes] = 1.0
    return out


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def gan_losses(real_logits: np.ndarray, fake_logits: np.ndarray) -> tuple[float, float]:
    """Discriminator and (non-saturating) generator losses from raw logits.

    The discriminator loss is ``-(E log D(x) + E log(1 - D(G(z))))``, so minimizing
    it maximizes the GAN criterion; the generator loss is ``-E log D(G(z))``.
    """
    r = np.asarray(real_logits, dtype=np.float64).ravel()
    f = np.asarray(fake_logits, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(f))):
        raise NumericalError("non-finite discriminator output")
    d_loss = float(_softplus(-r).mean() + _softplus(f).mean())
    g_loss = float(_softplus(-f).mean())
    return d_loss, g_loss


@dataclass
class CycleGanPair:
    """G maps source to target, G_b maps back; D judges targets, D_b judges sources."""

    G: MlpModel
    G_b: MlpModel
    D: MlpModel
    D_b: MlpModel
    vocabulary: tuple[str, ...]
    lambda_cyc: float = 1.0
    residual: bool = True

    @classmethod
    def create(cls, dim: int, vocabulary: Sequence[str], arch: GanArch = GanArch(),
               lambda_cyc: float = 1.0, seed: int | np.random.SeedSequence = 0) -> "CycleGanPair":
        vocab = tuple(vocabulary)
        if not vocab:
            raise ValueError("family vocabulary is empty")
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        s = seed.spawn(4)
        width = dim + len(vocab)
        gen = mlp_layers(width, arch.gen_hidden, dim)
        disc = mlp_layers(width, arch.disc_hidden, 1, dropout=arch.disc_dropout)
        return cls(MlpModel(gen, s[0]), MlpModel(gen, s[1]), MlpModel(disc, s[2]), MlpModel(disc, s[3]),
                   vocab, lambda_cyc, arch.residual)

    @property
    def dim(self) -> int:
        return self.G.out_dim

    def check(self, x: np.ndarray, codes: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected samples of dimension {self.dim}, got {x.shape}")
        if len(codes) != len(x):
            raise ValueError("one family code per sample is required")
        if len(codes) and (np.min(codes) < 0 or np.max(codes) >= len(self.vocabulary)):
            raise ValueError("family code outside the vocabulary")


def _gen_forward(net: MlpModel, x: np.ndarray, cond: np.ndarray, residual: bool):
    out, trace = forward(net, np.hstack([x, cond]))
    return (x + out if residual else out), trace


def _gen_backward(net: MlpModel, trace, g_out: np.ndarray, dim: int, residual: bool):
    grads, g_in = backward(net, trace, g_out)
    g_x = g_in[:, :dim]
    return grads, (g_x + g_out if residual else g_x)


def translate(net: MlpModel, x: np.ndarray, codes: np.ndarray, n_families: int, residual: bool = True) -> np.ndarray:
    """Apply one generator to samples with the given family codes (no training side effects)."""
    was = net.training
    net.eval()
    try:
        return _gen_forward(net, np.asarray(x, dtype=np.float64), one_hot(codes, n_families), residual)[0]
    finally:
        net.training = was


@dataclass(frozen=True)
class CycleLossTerms:
    adv_forward: float  # L(G, D)
    adv_backward: float  # L(G_b, D_b)
    rec_target: float  # E|x - G(G_b(x))|_1
    rec_source: float  # E|z - G_b(G(z))|_1
    lambda_cyc: float

    @property
    def reconstruction(self) -> float:
        return self.rec_target + self.rec_source

    @property
    def total(self) -> float:
        return self.adv_forward + self.adv_backward + self.lambda_cyc * self.reconstruction


def _l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum(axis=1).mean()) if len(a) else 0.0


def cycle_loss(pair: CycleGanPair, x_batch: np.ndarray, z_batch: np.ndarray, families) -> CycleLossTerms:
    """Evaluate the cycle objective; ``x_batch`` is the target domain, ``z_batch`` the source.

    ``families`` is ``(x_codes, z_codes)``. Adversarial terms are the GAN
    criterion ``E log D(real) + E log(1 - D(fake))`` (always <= 0).
    """
    fx, fz = (np.asarray(c, dtype=np.int64) for c in families)
    x = np.asarray(x_batch, dtype=np.float64)
    z = np.asarray(z_batch, dtype=np.float64)
    pair.check(x, fx)
    pair.check(z, fz)
    n = len(pair.vocabulary)
    cx, cz = one_hot(fx, n), one_hot(fz, n)
    nets = (pair.G, pair.G_b, pair.D, pair.D_b)
    modes = [m.training for m in nets]
    for m in nets:
        m.eval()
    try:
        res = pair.residual
        fake_x = _gen_forward(pair.G, z, cz, res)[0]
        fake_z = _gen_forward(pair.G_b, x, cx, res)[0]
        rec_z = _gen_forward(pair.G_b, fake_x, cz, res)[0]
        rec_x = _gen_forward(pair.G, fake_z, cx, res)[0]
        d_fwd, _ = gan_losses(pair.D(np.hstack([x, cx])), pair.D(np.hstack([fake_x, cz])))
        d_bwd, _ = gan_losses(pair.D_b(np.hstack([z, cz])), pair.D_b(np.hstack([fake_z, cx])))
    finally:
        for m, was in zip(nets, modes):
            m.training = was
    return CycleLossTerms(-d_fwd, -d_bwd, _l1(x, rec_x), _l1(z, rec_z), pair.lambda_cyc)


@dataclass
class GanHistory:
    d_loss: list[float] = field(default_factory=list)  # D + D_b cross-entropy
    g_adv: list[float] = field(default_factory=list)  # non-saturating generator losses, summed
    rec: list[float] = field(default_factory=list)  # both l1 cycle terms, summed
    updated_discriminators: list[bool] = field(default_factory=list)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in asdict(self).items()}


class _FamilySampler:
    """Draws minibatches in which the source and target rows share family codes."""

    def __init__(self, codes_src: np.ndarray, codes_tgt: np.ndarray, rng: np.random.Generator):
        self.rng = rng
        fams = np.intersect1d(np.unique(codes_src), np.unique(codes_tgt))
        self.families = fams
        self.src = [np.flatnonzero(codes_src == f) for f in fams]
        self.tgt = [np.flatnonzero(codes_tgt == f) for f in fams]

    def draw(self, m: int):
        pick = self.rng.integers(len(self.families), size=m)
        src = np.empty(m, dtype=np.int64)
        tgt = np.empty(m, dtype=np.int64)
        for j in range(len(self.families)):
            sel = pick == j
            cnt = int(sel.sum())
            if cnt:
                src[sel] = self.src[j][self.rng.integers(len(self.src[j]), size=cnt)]
                tgt[sel] = self.tgt[j][self.rng.integers(len(self.tgt[j]), size=cnt)]
        return src, tgt, self.families[pick]


def _add(acc, grads):
    for a, g in zip(acc, grads):
        for k in a:
            a[k] += g[k]
    return acc


def cycle_step_grads(pair: CycleGanPair, x: np.ndarray, z: np.ndarray, c: np.ndarray,
                     lam: float, with_discriminators: bool = True):
    """Losses and gradients of one training step on target ``x`` and source ``z``.

    Generator gradients are for ``g_adv + lam * rec`` (non-saturating adversarial
    terms plus the l1 cycle terms); discriminator gradients are for ``d_loss``.
    """
    m = len(x)
    d = pair.dim
    res = pair.residual
    fake_x, tr_gz = _gen_forward(pair.G, z, c, res)
    fake_z, tr_bx = _gen_forward(pair.G_b, x, c, res)
    rec_z, tr_bf = _gen_forward(pair.G_b, fake_x, c, res)
    rec_x, tr_gf = _gen_forward(pair.G, fake_z, c, res)

    real_d, tr_dr = forward(pair.D, np.hstack([x, c]))
    fake_d, tr_df = forward(pair.D, np.hstack([fake_x, c]))
    real_db, tr_dbr = forward(pair.D_b, np.hstack([z, c]))
    fake_db, tr_dbf = forward(pair.D_b, np.hstack([fake_z, c]))
    d1, g1 = gan_losses(real_d, fake_d)
    d2, g2 = gan_losses(real_db, fake_db)
    r1 = np.abs(rec_x - x).sum(axis=1).mean()
    r2 = np.abs(rec_z - z).sum(axis=1).mean()
    losses = {"d_loss": d1 + d2, "g_adv": g1 + g2, "rec": float(r1 + r2)}

    _, g_fake_x = backward(pair.D, tr_df, -_sigmoid(-fake_d) / m)
    _, g_fake_z = backward(pair.D_b, tr_dbf, -_sigmoid(-fake_db) / m)
    g_fake_x = g_fake_x[:, :d]
    g_fake_z = g_fake_z[:, :d]
    grads_g, g_from_rec_x = _gen_backward(pair.G, tr_gf, lam * np.sign(rec_x - x) / m, d, res)
    grads_b, g_from_rec_z = _gen_backward(pair.G_b, tr_bf, lam * np.sign(rec_z - z) / m, d, res)
    _add(grads_g, _gen_backward(pair.G, tr_gz, g_fake_x + g_from_rec_z, d, res)[0])
    _add(grads_b, _gen_backward(pair.G_b, tr_bx, g_fake_z + g_from_rec_x, d, res)[0])
    grads = {"G": grads_g, "G_b": grads_b}
    if with_discriminators:
        gd_r, _ = backward(pair.D, tr_dr, -_sigmoid(-real_d) / m)
        gd_f, _ = backward(pair.D, tr_df, _sigmoid(fake_d) / m)
        gb_r, _ = backward(pair.D_b, tr_dbr, -_sigmoid(-real_db) / m)
        gb_f, _ = backward(pair.D_b, tr_dbf, _sigmoid(fake_db) / m)
        grads["D"] = _add(gd_r, gd_f)
        grads["D_b"] = _add(gb_r, gb_f)
    return losses, grads


def train_ccygan(
    source: np.ndarray,
    target: np.ndarray,
    source_families: np.ndarray,
    target_families: np.ndarray,
    vocabulary: Sequence[str],
    config: GanTrainConfig = GanTrainConfig(),
) -> tuple[CycleGanPair, GanHistory]:
    """Fit a conditional CycleGAN translating ``source`` samples toward ``target``.

    Inputs are normalized feature rows and integer family codes into
    ``vocabulary``. Training alternates in blocks of ``alternation_period``
    steps: the first block (and every other one after it) updates all four
    networks, the blocks in between update only the generators.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fs = np.asarray(source_families, dtype=np.int64)
    ft = np.asarray(target_families, dtype=np.int64)
    if len(source) == 0 or len(target) == 0:
        raise DataError("source and target pools must be non-empty")
    seq = np.random.SeedSequence(config.seed)
    init_seq, batch_seq = seq.spawn(2)
    pair = CycleGanPair.create(source.shape[1], vocabulary, config.arch, config.lambda_cyc, init_seq)
    pair.check(source, fs)
    pair.check(target, ft)
    sampler = _FamilySampler(fs, ft, np.random.default_rng(batch_seq))
    skipped = sorted(set(np.unique(np.concatenate([fs, ft])).tolist()) - set(sampler.families.tolist()))
    if skipped:
        warnings.warn(
            "families without samples on both sides are not used for conditioning: "
            + ", ".join(pair.vocabulary[i] for i in skipped),
            stacklevel=2,
        )
    if len(sampler.families) == 0:
        raise DataError("no family has samples in both source and target pools")

    n = len(pair.vocabulary)
    lam = config.lambda_cyc
    lr = config.learning_rate
    opt = {name: Adam(getattr(pair, name), lr) for name in ("G", "G_b", "D", "D_b")}
    for net in (pair.G, pair.G_b, pair.D, pair.D_b):
        net.train()
    history = GanHistory()
    m = config.minibatch
    for step in range(config.total_steps):
        update_d = (step // config.alternation_period) % 2 == 0
        si, ti, codes = sampler.draw(m)
        z, x = source[si], target[ti]
        c = one_hot(codes, n)

        losses, grads = cycle_step_grads(pair, x, z, c, lam, update_d)
        history.d_loss.append(losses["d_loss"])
        history.g_adv.append(losses["g_adv"])
        history.rec.append(losses["rec"])
        history.updated_discriminators.append(update_d)
        if update_d:
            opt["D"].step(grads["D"])
            opt["D_b"].step(grads["D_b"])
        opt["G"].step(grads["G"])
        opt["G_b"].step(grads["G_b"])

    for net in (pair.G, pair.G_b, pair.D, pair.D_b):
        net.eval()
    if history.d_loss:
        log.debug("ccygan done: d_loss %.4f g_adv %.4f rec %.4f",
                  history.d_loss[-1], history.g_adv[-1], history.rec[-1])
    return pair, history


@dataclass
class BankEntry:
    """Forward generator G_k' with the normalizer of the window it was trained on."""

    k: int
    generator: MlpModel
    normalizer: Normalizer
    seed: int
    residual: bool = True

    def predict(self, X_raw: np.ndarray, codes: np.ndarray, n_families: int) -> np.ndarray:
        z = self.normalizer.apply(X_raw)
        return self.normalizer.invert(translate(self.generator, z, codes, n_families, self.residual))


@dataclass
class PredictorBank:
    entries: dict[int, BankEntry]
    family_vocabulary: tuple[str, ...]
    arch: GanArch = field(default_factory=GanArch)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> list[int]:
        return sorted(self.entries)

    def restrict(self, k: int) -> "PredictorBank":
        """Sub-bank usable at split k: generators G_k' with k' < k."""
        return PredictorBank({i: e for i, e in self.entries.items() if i < k}, self.family_vocabulary, self.arch)


def bank_windows(k: int, w1: int) -> list[tuple[int, list[int], int]]:
    """(k', source periods, target period) for every k' with w1 < k' < k and a non-empty source."""
    out = []
    for kp in range(w1 + 1, k):
        src = list(range(kp - w1, kp - 1))
        if src:
            out.append((kp, src, kp - 1))
    return out


def build_predictor_bank(
    partition: PeriodPartition,
    k: int,
    w1: int,
    config: GanTrainConfig = GanTrainConfig(),
    vocabulary: Sequence[str] | None = None,
) -> PredictorBank:
    """Train one generator per historical window preceding split k.

    Only malware of vocabulary families is used, restricted to train-role
    samples when roles are assigned. Each generator gets its own seed derived
    from ``config.seed`` and its window index.
    """
    table = partition.table
    vocab = tuple(vocabulary) if vocabulary is not None else tuple(table.family_names())
    if not vocab:
        raise DataError("empty family vocabulary")
    code_of = {f: i for i, f in enumerate(vocab)}
    codes = np.array([code_of.get(f, -1) for f in table.families], dtype=np.int64)
    usable = (table.labels == MALWARE) & (codes >= 0)
    if partition.roles is not None:
        usable &= partition.roles == TRAIN
    entries: dict[int, BankEntry] = {}
    for kp, src_periods, tgt_period in bank_windows(k, w1):
        src = usable & np.isin(partition.period, src_periods)
        tgt = usable & (partition.period == tgt_period)
        if not src.any() or not tgt.any():
            warnings.warn(f"window for generator {kp} has no usable malware; skipped", stacklevel=2)
            continue
        norm = fit_normalizer(table.X[src | tgt])
        seed = int(np.random.SeedSequence([config.seed, kp]).generate_state(1)[0])
        cfg = GanTrainConfig(config.learning_rate, config.total_steps, config.minibatch,
                             config.alternation_period, config.lambda_cyc, seed, config.arch)
        pair, hist = train_ccygan(norm.apply(table.X[src]), norm.apply(table.X[tgt]),
                                  codes[src], codes[tgt], vocab, cfg)
        log.info("generator %d trained on periods %s -> %d (final rec %.3f)",
                 kp, src_periods, tgt_period, hist.rec[-1] if hist.rec else float("nan"))
        entries[kp] = BankEntry(kp, pair.G, norm, seed, pair.residual)
    return PredictorBank(entries, vocab, config.arch)


def predict_samples(
    bank: PredictorBank,
    X_m: np.ndarray,
    quota: int,
    rng: np.random.Generator,
    conditions: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``quota`` triples (x, y', i) uniformly and return (G_i(x, y'), malware labels).

    ``conditions`` restricts the family codes y' drawn; by default the whole vocabulary.
    """
    if len(bank) == 0:
        raise BankUnavailableError("predictor bank is empty; the ccygan method is unavailable for this split")
    X_m = np.asarray(X_m, dtype=np.float64)
    d = bank.entries[bank.indices[0]].normalizer.mean.shape[0]
    if quota < 0:
        raise ValueError("quota must be >= 0")
    if quota == 0:
        return np.zeros((0, d)), np.zeros(0, dtype=np.int8)
    if len(X_m) == 0:
        raise DataError("no current malware to translate")
    n = len(bank.family_vocabulary)
    conds = np.arange(n) if conditions is None else np.asarray(conditions, dtype=np.int64)
    xi = rng.integers(len(X_m), size=quota)
    yi = conds[rng.integers(len(conds), size=quota)]
    keys = bank.indices
    gi = rng.integers(len(keys), size=quota)
    out = np.empty((quota, X_m.shape[1]))
    for j, kp in enumerate(keys):
        sel = gi == j
        if sel.any():
            out[sel] = bank.entries[kp].predict(X_m[xi[sel]], yi[sel], n)
    if not np.all(np.isfinite(out)):
        raise NumericalError("generator produced non-finite samples")
    return out, np.full(quota, MALWARE, dtype=np.int8)


def save_bank(bank: PredictorBank, directory: str | Path) -> Path:
    """Write a JSON manifest plus one little-endian float64 file per generator."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": BANK_FORMAT,
        "family_vocabulary": list(bank.family_vocabulary),
        "arch": {**asdict(bank.arch), "gen_hidden": list(bank.arch.gen_hidden),
                 "disc_hidden": list(bank.arch.disc_hidden)},
        "entries": [],
    }
    for kp in bank.indices:
        e = bank.entries[kp]
        fname = f"G_{kp}.f8"
        arrays = e.generator.state_arrays()
        with open(directory / fname, "wb") as fh:
            for _, a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        manifest["entries"].append({
            "k": kp,
            "seed": e.seed,
            "residual": e.residual,
            "layers": [[s.kind, s.in_dim, s.out_dim, s.dropout_rate, s.bn_momentum] for s in e.generator.layers],
            "arrays": [[name, list(a.shape)] for name, a in arrays],
            "file": fname,
            "normalizer": e.normalizer.to_dict(),
        })
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bank(directory: str | Path) -> PredictorBank:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read bank manifest in {directory}: {exc}") from exc
    if manifest.get("format") != BANK_FORMAT:
        raise DataError(f"unsupported bank format {manifest.get('format')!r}")
    a = manifest["arch"]
    arch = GanArch(tuple(a["gen_hidden"]), tuple(a["disc_hidden"]), a["disc_dropout"], a["residual"])
    entries = {}
    for ent in manifest["entries"]:
        layers = [LayerSpec(kind, i, o, rate, mom) for kind, i, o, rate, mom in ent["layers"]]
        model = MlpModel(layers).eval()
        flat = np.fromfile(directory / ent["file"], dtype="<f8")
        arrays, pos = {}, 0
        for name, shape in ent["arrays"]:
            size = int(np.prod(shape))
            if pos + size > flat.size:
                raise DataError(f"parameter file {ent['file']} is truncated")
            arrays[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        if pos != flat.size:
            raise DataError(f"parameter file {ent['file']} has trailing data")
        model.load_state_arrays(arrays)
        entries[ent["k"]] = BankEntry(ent["k"], model, Normalizer.from_dict(ent["normalizer"]),
                                      ent["seed"], ent["residual"])
    return PredictorBank(entries, tuple(manifest["family_vocabulary"]), arch)
