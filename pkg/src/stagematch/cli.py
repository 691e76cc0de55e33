"""Command line entry point: run experiments and write deterministic CSV files."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import yaml

from .experiments import CSV_COLUMNS, DEFAULTS, RUNNERS, ConfigError, ExperimentConfig, run_experiment

CONFIG_KEYS = {"name", "reps", "seed", "params", "out"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: Path, rows, columns=CSV_COLUMNS) -> None:
    """Header plus one line per row; missing fields become empty cells."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def load_config(path, experiment=None) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(CONFIG_KEYS))}")
    if experiment is not None and data.get("name", experiment) != experiment:
        raise ConfigError(f"{path}: config is for {data['name']!r}, not {experiment!r}")
    if not isinstance(data.get("params", {}), dict):
        raise ConfigError(f"{path}: params must be a mapping")
    return data


def build_config(args) -> ExperimentConfig:
    data = load_config(args.config, args.experiment) if args.config else {}
    fields = {"name": args.experiment, "reps": data.get("reps", 100), "seed": data.get("seed", 0),
              "params": dict(data.get("params") or {}), "out": data.get("out", "results")}
    for key in ("reps", "seed", "out"):
        if getattr(args, key) is not None:
            fields[key] = getattr(args, key)
    for key in ("reps", "seed"):
        if isinstance(fields[key], bool) or not isinstance(fields[key], int):
            raise ConfigError(f"{key} must be an integer")
    if fields["name"] == "custom" and args.instance:
        fields["params"]["instance"] = args.instance
    return ExperimentConfig(**fields)


def write_outputs(cfg: ExperimentConfig, rows, extra) -> list:
    out = Path(cfg.out)
    written = [out / f"{cfg.name}.csv"]
    write_rows(written[0], rows)
    if extra.get("matchings"):
        cols = ("method", "arm", "agent")
        written.append(out / f"{cfg.name}_matchings.csv")
        write_rows(written[-1], extra["matchings"], cols)
    return written


def _parser():
    p = argparse.ArgumentParser(prog="stagematch", description="Multi-stage matching market experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write CSV")
    run.add_argument("experiment", help="experiment name (see `stagematch list`)")
    run.add_argument("--config", help="YAML file with name/reps/seed/params/out")
    run.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    run.add_argument("--reps", type=int, help="number of replications")
    run.add_argument("--out", help="output directory")
    run.add_argument("--instance", help="instance file for the custom experiment")
    sub.add_parser("list", help="list experiments and their default parameters")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name in sorted(RUNNERS):
            print(name)
            for k, v in DEFAULTS[name].items():
                print(f"    {k} = {v!r}")
        return 0
    try:
        if args.experiment not in RUNNERS:
            raise ConfigError(f"unknown experiment {args.experiment!r}; valid: {', '.join(sorted(RUNNERS))}")
        cfg = build_config(args)
        rows, extra = run_experiment(cfg)
        for path in write_outputs(cfg, rows, extra):
            print(path)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"stagematch: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
