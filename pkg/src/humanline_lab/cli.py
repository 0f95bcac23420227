"""``humanline-lab`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, merge_dicts
from .data import corpus_filename, read_corpus, write_corpus
from .experiments import (base_policy, build_corpus, evaluate, reward_source, run_variant,
                          write_history)
from .policy import Policy
from .trainer import CollapseAbort, NumericalAbort

log = logging.getLogger("humanline_lab")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_THEORY = 0, 2, 3, 4
CSV_COLUMNS = ("variant", "seed", "step", "metric", "value")
# history fields that identify a row rather than measure something
_ID_FIELDS = {"variant", "seed", "step", "synced", "skipped", "k"}


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _override(text: str) -> dict:
    """``a.b.c=<json>`` -> nested dict (bare words are taken as strings)."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _merge_overrides(items) -> dict:
    out: dict = {}
    for d in items or []:
        out = merge_dicts(out, d)
    return out


def _configure_logging() -> None:
    level = os.environ.get("HL_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_config(args.config, _merge_overrides(args.set))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ----------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    for seed in cfg.seeds:
        records, manifest = build_corpus(cfg, seed)
        path = write_corpus(out, records, manifest)
        print(f"{path}: {len(records)} records, mean reward {manifest.mean_reward:.4f}")
    return EXIT_OK


def _corpus_for(cfg: RunConfig, seed: int, out: Path, base: Policy):
    if cfg.data.corpus_path:
        return read_corpus(cfg.data.corpus_path)
    path = out / corpus_filename(cfg.data.sampler, seed)
    if path.exists():
        log.info("reusing corpus %s", path)
        return read_corpus(path)
    records, manifest = build_corpus(cfg, seed, base)
    write_corpus(out, records, manifest)
    return records


def _sweep_plan(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Expand ``sweep`` (``variants`` and/or humanline ``k`` lists) into labelled configs."""
    variants = cfg.sweep.get("variants", [cfg.variant])
    ks = cfg.sweep.get("k")
    unknown = set(cfg.sweep) - {"variants", "k"}
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    plan = []
    for v in variants:
        vc = cfg.with_variant(v) if v != cfg.variant else cfg
        vc = dataclasses.replace(vc, seeds=cfg.seeds)
        if ks is None:
            plan.append((v, vc))
            continue
        for k in ks:
            hl = dataclasses.replace(vc.humanline, k=None if k is None else int(k))
            plan.append((f"{v}_k{k}", dataclasses.replace(vc, humanline=hl)))
    return plan


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    _write_json(out / "config.json", cfg.to_dict())
    for seed in cfg.seeds:
        base = base_policy(cfg, seed)
        base.save(out / f"policy_initial_seed{seed}.json")
        for label, c in _sweep_plan(cfg):
            corpus = None if c.is_online else _corpus_for(c, seed, out, base)
            res = run_variant(c, seed, corpus, base=base)
            for row in res.history:
                row["seed"] = seed
                row["variant"] = label
            write_history(out / f"metrics_{label}_seed{seed}.jsonl", res.history)
            res.policy.save(out / f"policy_{label}_seed{seed}.json")
            print(f"{label} seed {seed}: reward {res.initial_reward:.4f} -> {res.final_reward:.4f}")
    return EXIT_OK


def _checkpoint(path: str | None, what: str) -> Policy:
    if not path:
        raise ConfigError(f"eval needs a {what} (set eval.{what} or pass --{what.replace('_', '-')})")
    try:
        return Policy.load(path)
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None


def cmd_eval(args) -> int:
    cfg = _load(args)
    policy = _checkpoint(args.checkpoint or cfg.eval.checkpoint, "checkpoint")
    reward = reward_source(cfg)
    baseline = None
    if reward.kind == "scored":
        baseline = _checkpoint(args.baseline_checkpoint or cfg.eval.baseline_checkpoint,
                               "baseline_checkpoint")
    report = evaluate(policy, baseline, reward, cfg.task.contexts(), cfg.eval.n_contexts,
                      cfg.seeds, cfg.eval.temperature, cfg.eval.top_p)
    _write_json(Path(args.out) / "eval.json", report.to_json())
    print(f"{report.metric}: {report.mean:.4f} +- {report.stderr:.4f} "
          f"({len(report.per_seed)} seeds, {report.n_samples} samples)")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    from .verification import run_theory_suite

    seed = 0 if args.seed is None else args.seed
    results = run_theory_suite(seed=seed)
    for r in results:
        print(r.line())
    _write_json(Path(args.out) / "theory.json",
                [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results])
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_THEORY if failed else EXIT_OK


def metric_rows(path) -> list[tuple]:
    """Tidy ``(variant, seed, step, metric, value)`` rows from one metrics JSONL file."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
                variant, seed, step = rec["variant"], rec["seed"], rec["step"]
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed metrics line ({e})") from None
            for key in sorted(rec):
                v = rec[key]
                if key in _ID_FIELDS or isinstance(v, bool) or not isinstance(v, (int, float)):
                    continue
                rows.append((variant, seed, step, key, v))
    return rows


def write_plot_csv(inputs, dest) -> int:
    rows = []
    for p in inputs:
        rows += metric_rows(p)
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        w.writerows(rows)
    return len(rows)


def cmd_plot_data(args) -> int:
    out = Path(args.out)
    inputs = list(args.inputs) or sorted(out.glob("metrics_*.jsonl"))
    n = write_plot_csv(inputs, out / "series.csv")
    print(f"{out / 'series.csv'}: {n} rows from {len(inputs)} files")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-theory": cmd_verify_theory,
    "plot-data": cmd_plot_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="humanline-lab",
                                     description="Humanline alignment experiments on toy policies.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=_seed, help="run this seed only (unsigned 64-bit)")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.steps=50")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--baseline-checkpoint")
        if name == "plot-data":
            p.add_argument("inputs", nargs="*", help="metrics JSONL files (default: OUT/metrics_*.jsonl)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, CollapseAbort) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
