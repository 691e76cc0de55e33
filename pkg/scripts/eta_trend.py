"""Relative payoff change of agent 0 in the three-agent world, per eta.

Reads three_agent.csv, pairs each replication with its eta = 0 run and reports
the mean relative change, a bootstrap interval and the fitted slope over eta.

Usage: python scripts/eta_trend.py results/three_agent.csv
"""
import csv
import sys
from collections import defaultdict

import numpy as np
from scipy.stats import bootstrap


def main(path):
    pay = defaultdict(dict)
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["agent_id"] == "0":
                pay[float(r["eta"])][int(r["replication"])] = float(r["payoff"])
    if 0.0 not in pay:
        sys.exit("no eta = 0 baseline rows")
    reps = sorted(pay[0.0])
    base = np.array([pay[0.0][k] for k in reps])
    etas, means = [], []
    print("eta,mean_rel_change,ci_low,ci_high")
    for eta in sorted(e for e in pay if e > 0):
        rel = (np.array([pay[eta][k] for k in reps]) - base) / base.mean()
        if np.ptp(rel) > 0:
            ci = bootstrap((rel,), np.mean, n_resamples=2000, random_state=0).confidence_interval
            lo, hi = ci.low, ci.high
        else:
            lo = hi = rel.mean()
        print(f"{eta},{rel.mean():.5f},{lo:.5f},{hi:.5f}")
        etas.append(eta)
        means.append(rel.mean())
    if len(etas) > 1:
        print(f"# slope over eta: {np.polyfit(etas, means, 1)[0]:.5f}")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
