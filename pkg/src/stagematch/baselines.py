"""Comparison strategies: simple cutoff, scripted pulls, reservation-utility
search with Bellman thresholds, and arm-proposing deferred acceptance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .market import AgentView, StrategyDecision

BELLMAN_SAMPLES = 10_000
BELLMAN_TOL = 1e-6


class PreferenceError(ValueError):
    pass


def top_by_utility(view: AgentView, count: int):
    ranked = sorted(view.available, key=lambda a: (-view.utility(a), a))
    return ranked[: max(count, 0)]


def simple_cutoff_strategy(view: AgentView) -> StrategyDecision:
    """Pull the best remaining arms by latent utility, up to the remaining quota."""
    return StrategyDecision(top_by_utility(view, view.remaining_quota), diagnostics={"method": "simple"})


@dataclass
class ScriptedStrategy:
    """Fixed pull lists per stage; stages without a script fall back to `fallback`."""

    script: Mapping[int, Sequence[int]]
    fallback: object = simple_cutoff_strategy

    def __call__(self, view: AgentView) -> StrategyDecision:
        if view.stage in self.script:
            wanted = [a for a in self.script[view.stage] if a in set(view.available)]
            return StrategyDecision(wanted, diagnostics={"method": "scripted"})
        return self.fallback(view)


@dataclass
class ReservationSchedule:
    values: np.ndarray
    rho: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("reservation values must be finite")

    def at(self, stage: int) -> float:
        return float(self.values[min(stage, len(self.values)) - 1])


def patient_strategy_step(agent_utility: float, arm_utility: float, reservation: ReservationSchedule,
                          stage: int, arm_reservation: float = 0.0) -> bool:
    """A met pair matches iff both clear their reservation values."""
    return agent_utility >= reservation.at(stage) and arm_utility >= arm_reservation


def convex_schedule(stages: int, top: float = 50.0, scale: float = 5.0) -> ReservationSchedule:
    k = np.arange(1, stages + 1)
    return ReservationSchedule(top - scale * np.log(k))


def concave_schedule(stages: int, top: float = 50.0, scale: float = 5.0) -> ReservationSchedule:
    k = np.arange(1, stages + 1)
    return ReservationSchedule(top + scale * np.log((stages + 1 - k) / stages))


class BellmanConvergenceError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


def stratified_sample(dist, size: int, rng) -> np.ndarray:
    """One draw per equal-probability stratum, through the inverse CDF."""
    u = (np.arange(size) + rng.random(size)) / size
    return dist.ppf(u)


def bellman_update(v_p, v_a, x, y, rho):
    """One application of the coupled reservation-value map.

    x: utilities an agent gets from met arms; y: utilities an arm gets from
    met agents (independent draws, so the match event factorizes).
    """
    acc_p = x >= v_p
    acc_a = y >= v_a
    p_a = acc_a.mean()
    p_p = acc_p.mean()
    gain_p = np.mean(x * acc_p) * p_a
    gain_a = np.mean(y * acc_a) * p_p
    new_p = rho * (gain_p + v_p * (1 - p_p * p_a))
    new_a = rho * (gain_a + v_a * (1 - p_p * p_a))
    return new_p, new_a


def bellman_iterate(agent_side, arm_side, rho: float, init=(0.0, 0.0), samples: int = BELLMAN_SAMPLES,
                    seed: int = 0, tol: float = BELLMAN_TOL, max_iter: int = 100_000):
    """Fixed point of the reservation-value equations.

    agent_side: distribution of U_i(A) over met arms (needs .ppf);
    arm_side: distribution of U_j(P) over met agents. Returns (v_P, v_A).
    """
    if not 0 <= rho < 1:
        raise ValueError("discount must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    x = stratified_sample(agent_side, samples, rng)
    y = stratified_sample(arm_side, samples, rng)
    v_p, v_a = map(float, init)
    for _ in range(max_iter):
        n_p, n_a = bellman_update(v_p, v_a, x, y, rho)
        if max(abs(n_p - v_p), abs(n_a - v_a)) < tol:
            return float(n_p), float(n_a)
        v_p, v_a = n_p, n_a
    raise BellmanConvergenceError("reservation values did not converge", (v_p, v_a))


def _check_strict(prefs: Mapping, what: str):
    for who, order in prefs.items():
        if len(set(order)) != len(order):
            raise PreferenceError(f"{what} {who}: preference list has ties or repeats")


def deferred_acceptance(agent_prefs: Mapping[int, Sequence[int]], quotas: Mapping[int, int],
                        arm_prefs: Mapping[int, Sequence[int]]) -> dict:
    """Arm-proposing deferred acceptance with agent quotas.

    agent_prefs[i]: acceptable arms, best first; arm_prefs[j]: acceptable
    agents, best first. Returns arm -> agent for matched arms.
    """
    _check_strict(agent_prefs, "agent")
    _check_strict(arm_prefs, "arm")
    rank = {i: {a: r for r, a in enumerate(order)} for i, order in agent_prefs.items()}
    nxt = {j: 0 for j in arm_prefs}
    held = {i: [] for i in agent_prefs}
    free = sorted(arm_prefs)
    while free:
        proposals = {}
        still = []
        for j in free:
            order = arm_prefs[j]
            # skip agents that would never take this arm
            while nxt[j] < len(order) and (order[nxt[j]] not in rank or j not in rank[order[nxt[j]]]
                                           or quotas.get(order[nxt[j]], 0) <= 0):
                nxt[j] += 1
            if nxt[j] >= len(order):
                continue
            proposals.setdefault(order[nxt[j]], []).append(j)
        for i in sorted(proposals):
            pool = held[i] + proposals[i]
            pool.sort(key=lambda a: rank[i][a])
            held[i] = pool[: quotas[i]]
            for j in pool[quotas[i]:]:
                nxt[j] += 1
                still.append(j)
        free = sorted(still)
    return {j: i for i, arms in held.items() for j in arms}


def blocking_pairs(matching: Mapping[int, int], agent_prefs, quotas, arm_prefs):
    """All (agent, arm) pairs that would both rather be together."""
    a_rank = {i: {a: r for r, a in enumerate(o)} for i, o in agent_prefs.items()}
    j_rank = {j: {i: r for r, i in enumerate(o)} for j, o in arm_prefs.items()}
    assigned = {i: [j for j, who in matching.items() if who == i] for i in agent_prefs}
    out = []
    for j, order in arm_prefs.items():
        cur = matching.get(j)
        for i in order:
            if i == cur:
                break
            if j not in a_rank.get(i, {}):
                continue
            if cur is not None and j_rank[j][i] >= j_rank[j][cur]:
                continue
            mine = assigned[i]
            if len(mine) < quotas.get(i, 0):
                out.append((i, j))
            elif mine and a_rank[i][j] < max(a_rank[i][x] for x in mine):
                out.append((i, j))
    return out


def utility_preference_lists(utilities: np.ndarray):
    """Agent preference lists from a (agents, arms) utility matrix; ties to lower arm id."""
    utilities = np.asarray(utilities, float)
    return {i: sorted(range(utilities.shape[1]), key=lambda a: (-utilities[i, a], a))
            for i in range(utilities.shape[0])}
