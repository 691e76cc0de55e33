"""Fairness and welfare measurements on simulated outcomes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .baselines import ScriptedStrategy, deferred_acceptance, utility_preference_lists
from .market import AgentProfile, DomainError, MatchOutcome, realized_payoff, run_multistage_match
from .variational import Candidate, greedy_cutoff


class IncompletePreferences(ValueError):
    pass


def uncertainty_level(surface_or_pi, state=None, score=None, delta=None) -> float:
    """Uncertainty measure relative to the acceptance probability.

    Call either as uncertainty_level(pi, delta=d) with numbers, or with an
    object exposing pi/delta (AcceptanceSurface) or predict/delta_hat (a
    fitted model) plus state and score.
    """
    if delta is not None:
        p, d = float(surface_or_pi), float(delta)
    elif hasattr(surface_or_pi, "delta_hat"):
        m = surface_or_pi
        p = float(np.asarray(m.predict(state, score)))
        d = float(np.asarray(m.delta_hat(np.atleast_1d(score)))[0])
    else:
        p = float(surface_or_pi.pi(state, score))
        d = float(surface_or_pi.delta(score))
    if p <= 0:
        raise DomainError("uncertainty level undefined at zero acceptance probability")
    return d / p


@dataclass
class EnvyReport:
    flags: dict                      # arm id -> bool
    stage_flags: dict                # (arm id, stage) -> bool
    level: int
    uncertainty: dict = field(default_factory=dict)   # arm id -> level, when supplied
    witnesses: dict = field(default_factory=dict)     # (arm, stage) -> envied agents

    def __post_init__(self):
        assert self.level == sum(bool(v) for v in self.flags.values())


def _ranks_above(utilities_row, j, jp):
    # arm j ranks above arm jp for this agent (ties to the lower arm id)
    return (-utilities_row[j], j) < (-utilities_row[jp], jp)


def justified_envy_report(outcome: MatchOutcome, arm_prefs: Mapping[int, Sequence[int]], utilities,
                          arm_ids: Optional[Sequence[int]] = None, uncertainty: Optional[Mapping] = None
                          ) -> EnvyReport:
    """Ex-ante justified envy from pull sets.

    arm_prefs[j]: agents acceptable to arm j, best first. utilities[i, j]:
    agent i's latent utility for arm j. An arm is flagged at stage k when it
    was still available, and some agent it likes better than its best puller
    at stage k (or any acceptable agent, when nobody pulled it) pulled a
    lower-ranked arm at stage k without pulling it.
    """
    utilities = np.asarray(utilities, float)
    m, n = utilities.shape
    arms = sorted(arm_ids) if arm_ids is not None else list(range(n))
    touched = {a for v in outcome.pulls.values() for a in v} | set(outcome.matched)
    missing = [a for a in set(arms) | touched if a not in arm_prefs or a >= n]
    if missing:
        raise IncompletePreferences(f"no preference data for arms {sorted(missing)}")
    rank = {j: {i: r for r, i in enumerate(order)} for j, order in arm_prefs.items()}

    matched_at = {}
    for (i, k), acc in outcome.accepts.items():
        for a in acc:
            matched_at[a] = k
    stages = sorted({k for (_, k) in outcome.pulls})
    stage_flags, witnesses = {}, {}
    for k in stages:
        pulled_now = {i: set(v) for (i, kk), v in outcome.pulls.items() if kk == k}
        earlier = {i: set() for i in range(m)}
        for (i, kk), v in outcome.pulls.items():
            if kk < k:
                earlier[i].update(v)
        pullers = {}
        for i, v in pulled_now.items():
            for a in v:
                pullers.setdefault(a, []).append(i)
        for j in arms:
            if matched_at.get(j, k + 1) < k:
                continue
            rk = rank[j]
            best = min((rk[i] for i in pullers.get(j, ()) if i in rk), default=None)
            envied = []
            for ip, pset in sorted(pulled_now.items()):
                if j in pset or j in earlier[ip] or ip not in rk:
                    continue
                if best is not None and rk[ip] >= best:
                    continue
                if any(_ranks_above(utilities[ip], j, jp) for jp in pset):
                    envied.append(ip)
            stage_flags[(j, k)] = bool(envied)
            if envied:
                witnesses[(j, k)] = envied
    flags = {j: any(stage_flags.get((j, k), False) for k in stages) for j in arms}
    return EnvyReport(flags, stage_flags, sum(flags.values()), dict(uncertainty or {}), witnesses)


def envy_band_width(b_hat: float, b_prime: float, eta: float, level: float) -> float:
    """Width of the utility band whose arms are skipped only because of the deduction."""
    if eta * level >= 1:
        raise DomainError("eta times the uncertainty level must stay below 1")
    return b_hat / (1.0 - eta * level) - b_prime


def linear_cutoff(utilities, pi, remaining_quota, penalty):
    """Cutoff value of the undeducted rule, whose rate is the plain utility."""
    cands = [Candidate(j, u, p, p) for j, (u, p) in enumerate(zip(utilities, pi))]
    return greedy_cutoff(cands, remaining_quota, penalty).b_hat


def envy_band_count(utilities, pi, delta, eta, remaining_quota, penalty) -> int:
    """Arms above the undeducted cutoff that the deducted rule drops below its own cutoff."""
    u = np.asarray(utilities, float)
    p = np.asarray(pi, float)
    d = np.asarray(delta, float)
    b_prime = linear_cutoff(u, p, remaining_quota, penalty)
    cands = [Candidate(j, u[j], p[j], max(p[j] - eta * d[j], 0.0)) for j in range(u.size)]
    res = greedy_cutoff(cands, remaining_quota, penalty)
    if b_prime is None or res.b_hat is None:
        return 0
    lvl = np.where(p > 0, d / np.where(p > 0, p, 1), np.inf)
    with np.errstate(divide="ignore"):
        upper = np.where(eta * lvl < 1, res.b_hat / (1 - eta * lvl), np.inf)
    base = greedy_cutoff([Candidate(j, u[j], p[j], p[j]) for j in range(u.size)], remaining_quota, penalty)
    return int(sum(1 for j in range(u.size) if j in base.selected and j not in res.selected
                   and b_prime <= u[j] < upper[j]))


# ---------------------------------------------------------------- welfare

def da_payoffs(arms, agents: Sequence[AgentProfile], arm_prefs):
    """Run arm-proposing DA on the instance and score it with the realized payoff."""
    util = np.array([[a.utility(p.id) for a in arms] for p in agents])
    prefs = utility_preference_lists(util)
    ids = [a.id for a in arms]
    agent_prefs = {i: [ids[j] for j in order] for i, order in prefs.items()}
    match = deferred_acceptance(agent_prefs, {p.id: p.quota for p in agents}, arm_prefs)
    amap = {a.id: a for a in arms}
    pay = {p.id: realized_payoff([amap[j].utility(p.id) for j, w in match.items() if w == p.id],
                                 p.quota, p.penalty) for p in agents}
    return dict(sorted(match.items())), pay


def replay_payoffs(arms, agents: Sequence[AgentProfile], preference_model, stages: int, agent_id: int, seed: int = 0):
    """(single-stage payoff, multi-stage payoff) for one agent replaying its single-stage pulls."""
    single = run_multistage_match(arms, agents, preference_model, 1, seed)
    scripted = []
    for p in agents:
        if p.id == agent_id:
            p = AgentProfile(p.id, p.quota, p.penalty, ScriptedStrategy({1: single.pulls.get((p.id, 1), ())}, p.strategy),
                             p.eta_schedule, p.availability)
        scripted.append(p)
    multi = run_multistage_match(arms, scripted, preference_model, stages, seed)
    return single.payoffs[agent_id], multi.payoffs[agent_id]


def welfare_compare(instance_fn: Callable[[int], tuple], mechanisms: Sequence[str], stage_variants: Sequence[int],
                    reps: int, seed: int = 0):
    """Per-agent realized payoffs per (mechanism, stage count) and replication.

    instance_fn(rep_seed) -> (arms, agents, preference_model, arm_prefs).
    Mechanisms: 'decentralized' (engine with each agent's own strategy) and
    'da'. Returns (rows, means) with means keyed by (mechanism, K, agent).
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    seeds = np.random.SeedSequence(seed).generate_state(reps)
    rows = []
    for r in range(reps):
        arms, agents, model, arm_prefs = instance_fn(int(seeds[r]))
        for mech in mechanisms:
            if mech == "da":
                _, pay = da_payoffs(arms, agents, arm_prefs)
                rows += [dict(mechanism="da", stage_count=None, replication=r, agent_id=i, payoff=v)
                         for i, v in sorted(pay.items())]
                continue
            if mech != "decentralized":
                raise ValueError(f"unknown mechanism {mech!r}")
            for K in stage_variants:
                out = run_multistage_match(arms, agents, model, K, int(seeds[r]))
                rows += [dict(mechanism=mech, stage_count=K, replication=r, agent_id=i, payoff=v)
                         for i, v in sorted(out.payoffs.items())]
    means = {}
    for row in rows:
        means.setdefault((row["mechanism"], row["stage_count"], row["agent_id"]), []).append(row["payoff"])
    return rows, {k: float(np.mean(v)) for k, v in means.items()}


def bootstrap_ci(x, reps: int = 2000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(x, float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(reps, x.size))
    means = x[idx].mean(1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))
