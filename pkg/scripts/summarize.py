"""Summarize experiment CSVs: mean payoff per group with a bootstrap interval.

Usage: python scripts/summarize.py RESULTS_DIR [--boot 2000] [--seed 0]
"""
import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.stats import bootstrap

GROUP = ("method", "agent_id", "stage_count", "student_count", "eta")


def load(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def interval(x, n_boot, rng):
    x = np.asarray(x, float)
    if x.size < 2 or np.ptp(x) == 0:
        return x.mean(), x.mean(), x.mean()
    res = bootstrap((x,), np.mean, n_resamples=n_boot, random_state=rng, method="percentile")
    return x.mean(), res.confidence_interval.low, res.confidence_interval.high


def summarize(rows, n_boot, rng):
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in GROUP)].append(float(r["payoff"]))
    out = []
    for key in sorted(groups, key=lambda k: tuple((len(v), v) for v in k)):
        mean, lo, hi = interval(groups[key], n_boot, rng)
        out.append((*key, len(groups[key]), mean, lo, hi))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("results", type=Path)
    ap.add_argument("--boot", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    files = sorted(p for p in args.results.glob("*.csv") if not p.stem.endswith("_matchings"))
    if not files:
        print(f"no result CSVs in {args.results}", file=sys.stderr)
        return 1
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("experiment", *GROUP, "n", "mean_payoff", "ci_low", "ci_high"))
    for path in files:
        for row in summarize(load(path), args.boot, rng):
            w.writerow((path.stem, *row[:-3], *(f"{v:.4f}" for v in row[-3:])))
    return 0


if __name__ == "__main__":
    sys.exit(main())
