"""``driftforge`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataset import (
    DAY,
    LABEL_NAMES,
    ROLE_NAMES,
    SampleTable,
    admissible_splits,
    assign_roles,
    ingest_jsonl,
    partition_by_time,
    synth_generate,
    write_jsonl,
)
from .drift import rank_families
from .errors import DataError, NumericalError
from .gan import build_predictor_bank, save_bank
from .harness import (
    ExperimentConfig,
    family_vocabulary,
    prepare,
    read_results,
    run_experiment,
    select_features,
)
from .report import KINDS, report_from_records

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("driftforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    if args.out_dir is not None and not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_table(path: str) -> SampleTable:
    try:
        return ingest_jsonl(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _period_length(args) -> int:
    if args.period_days <= 0:
        raise UsageError("--period-days must be positive")
    return int(round(args.period_days * DAY))


def cmd_synth(args) -> None:
    cfg = _run_config(args).synth
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    table = synth_generate(cfg)
    path = _out(args, "data.jsonl")
    write_jsonl(table, path)
    print(f"wrote {len(table)} samples ({cfg.n_periods} periods, dim {cfg.dim}) to {path}")


def cmd_ingest(args) -> None:
    table = _load_table(args.data)
    labels = {LABEL_NAMES[int(c)]: int(n) for c, n in zip(*np.unique(table.labels, return_counts=True))}
    fams: dict[str, int] = {}
    for f in table.families:
        if f is not None:
            fams[f] = fams.get(f, 0) + 1
    summary = {
        "samples": len(table),
        "dim": table.dim,
        "labels": labels,
        "families": dict(sorted(fams.items())),
        "first_timestamp": int(table.timestamps.min()) if len(table) else None,
        "last_timestamp": int(table.timestamps.max()) if len(table) else None,
    }
    text = json.dumps(summary, indent=2) + "\n"
    if args.out or args.out_dir:
        _out(args, "summary.json").write_text(text)
    sys.stdout.write(text)


def cmd_split(args) -> None:
    table = _load_table(args.data)
    part = partition_by_time(table, _period_length(args))
    roles = assign_roles(part, seed=0 if args.seed is None else args.seed)
    periods = []
    for i in range(1, part.n_periods + 1):
        idx = part.members(i)
        periods.append({
            "period": i,
            "start": part.period_start(i),
            "size": int(len(idx)),
            "roles": {name: int(np.sum(roles[idx] == r)) for r, name in enumerate(ROLE_NAMES)},
        })
    doc = {
        "period_length": part.period_length,
        "n_periods": part.n_periods,
        "periods": periods,
        "splits": [{"k": s.k, "train_periods": list(s.train_periods), "test_periods": list(s.test_periods)}
                   for s in admissible_splits(part.n_periods, args.w1, args.w2)],
    }
    path = _out(args, "splits.json")
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"{part.n_periods} periods, {len(doc['splits'])} admissible splits -> {path}")


def _experiment_from_args(args, **overrides) -> ExperimentConfig:
    base = _run_config(args).experiment
    fields = {"period_length": _period_length(args), **overrides}
    try:
        return dataclasses.replace(base, **fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_select_features(args) -> None:
    table = _load_table(args.data)
    if not 1 <= args.k <= table.dim:
        raise UsageError(f"--k must be in [1, {table.dim}]")
    cfg = _experiment_from_args(args, w1=args.w1, w2=0, feature_mode="reduced", n_features=args.k,
                                l1_strength=args.l1, role_seed=args.seed or 0)
    part = partition_by_time(table, cfg.period_length)
    part = part.with_roles(assign_roles(part, cfg.role_ratios, cfg.role_seed))
    specs = admissible_splits(part.n_periods, cfg.w1, 0)
    if not specs:
        raise DataError("not enough periods for a training window")
    feats = select_features(part, specs[0], args.k, args.l1)
    path = _out(args, "feats.json")
    path.write_text(json.dumps({"k": args.k, "split_k": specs[0].k, "features": feats.tolist()}) + "\n")
    print(f"selected {len(feats)} of {table.dim} features -> {path}")


def cmd_rank_families(args) -> None:
    table = _load_table(args.data)
    part = partition_by_time(table, _period_length(args))
    part = part.with_roles(assign_roles(part, seed=0 if args.seed is None else args.seed))
    specs = admissible_splits(part.n_periods, args.w1, args.w2)
    if not specs:
        raise DataError("not enough periods for any split")
    report = rank_families(part, specs, args.top, args.min_count)
    path = _out(args, "families.csv")
    report.to_csv(path)
    print(f"top {min(args.top, len(report.families))} families: {', '.join(report.selected)} -> {path}")


def cmd_train_gan(args) -> None:
    table = _load_table(args.data)
    rc = _run_config(args)
    gan = rc.experiment.gan
    if args.steps is not None:
        gan = dataclasses.replace(gan, total_steps=args.steps)
    if args.seed is not None:
        gan = dataclasses.replace(gan, seed=args.seed)
    cfg = _experiment_from_args(args, w1=args.w1, w2=0, gan=gan, study="sweep")
    prepared = prepare(table, dataclasses.replace(cfg, splits=None))
    if args.split_k not in {s.k for s in prepared.splits}:
        raise UsageError(f"--split-k {args.split_k} is not an admissible split")
    vocab = family_vocabulary(prepared, cfg)
    bank = build_predictor_bank(prepared.partition, args.split_k, cfg.w1, gan, vocab)
    out = _out(args, "bank")
    save_bank(bank, out)
    print(f"trained {len(bank)} generators {bank.indices} -> {out}")


def cmd_run(args) -> None:
    rc = load_config(args.config)
    exp = rc.experiment
    if args.seed is not None:
        exp = dataclasses.replace(exp, seeds=(args.seed,))
    if args.data:
        table = _load_table(args.data)
    elif rc.data_path is not None:
        table = _load_table(str(rc.data_path))
    else:
        table = synth_generate(rc.synth)
    out = _out(args, "results.csv")
    records = run_experiment(exp, table, out, resume=args.resume)
    print(f"{len(records)} records -> {out}")


def cmd_report(args) -> None:
    records = read_results(args.results)
    out = Path(args.out or "report")
    if args.out_dir is not None and not out.is_absolute():
        out = Path(args.out_dir) / out
    csv_path, svg_path = report_from_records(records, args.kind, out, args.fpr_target)
    print(f"wrote {csv_path} and {svg_path}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="driftforge", description="Concept-drift experiments for malware classifiers.")
    p.add_argument("--version", action="version", version=f"driftforge {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--out", default=None)
        return sp

    sp = command("synth", cmd_synth, "generate the synthetic drifting benchmark")
    sp.add_argument("--config")

    sp = command("ingest", cmd_ingest, "validate a JSONL dataset and summarize it")
    sp.add_argument("--data", required=True)

    def windowed(sp, w2=True):
        sp.add_argument("--data", required=True)
        sp.add_argument("--period-days", type=float, default=7.0)
        sp.add_argument("--w1", type=int, default=3)
        if w2:
            sp.add_argument("--w2", type=int, default=0)

    sp = command("split", cmd_split, "partition a dataset into time periods")
    windowed(sp)

    sp = command("select-features", cmd_select_features, "L1-logistic feature selection")
    windowed(sp, w2=False)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--l1", type=float, default=0.01)
    sp.add_argument("--config")

    sp = command("rank-families", cmd_rank_families, "rank malware families by MMD drift")
    windowed(sp)
    sp.add_argument("--top", type=int, default=21)
    sp.add_argument("--min-count", type=int, default=10)

    sp = command("train-gan", cmd_train_gan, "train the predictor bank for a split")
    windowed(sp, w2=False)
    sp.add_argument("--split-k", type=int, required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--config")

    sp = command("run", cmd_run, "run an experiment sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--resume", action="store_true")

    sp = command("report", cmd_report, "aggregate results into CSV and SVG")
    sp.add_argument("--results", required=True)
    sp.add_argument("--kind", choices=KINDS, default="tpr")
    sp.add_argument("--fpr-target", type=float, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"driftforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"driftforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"driftforge: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
