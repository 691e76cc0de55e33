"""Core market types and the multi-stage decentralized matching engine."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ContractViolation(RuntimeError):
    """A strategy returned a pull set it is not allowed to pull."""


@dataclass(frozen=True)
class Arm:
    id: int
    score: float
    fits: tuple

    def __post_init__(self):
        if self.score < 0:
            raise DomainError(f"arm {self.id}: negative score {self.score}")
        if any(f < 0 for f in self.fits):
            raise DomainError(f"arm {self.id}: negative fit in {self.fits}")
        object.__setattr__(self, "fits", tuple(self.fits))

    def utility(self, agent: int) -> float:
        return latent_utility(self.score, self.fits[agent])


@dataclass
class StrategyDecision:
    """What an agent pulls at one stage, plus diagnostics."""

    pulls: tuple = ()
    calibrated_state: Optional[float] = None
    cutoff: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pulls = tuple(sorted(int(a) for a in self.pulls))


@dataclass
class AgentView:
    """Everything an agent may see when choosing a pull set."""

    agent: int
    stage: int
    stages: int
    available: tuple          # arm ids this agent may pull now
    prior_accepts: int
    quota: int
    penalty: float
    eta: float
    arms: Mapping[int, Arm]
    rng: np.random.Generator

    @property
    def remaining_quota(self) -> int:
        return self.quota - self.prior_accepts

    def utility(self, arm_id: int) -> float:
        return self.arms[arm_id].utility(self.agent)


class Strategy(Protocol):
    def __call__(self, view: AgentView) -> StrategyDecision: ...


@dataclass
class AgentProfile:
    id: int
    quota: int
    penalty: float
    strategy: Callable[[AgentView], StrategyDecision]
    eta_schedule: tuple = (0.0,)
    availability: Optional[frozenset] = None

    def __post_init__(self):
        if self.quota < 0:
            raise DomainError(f"agent {self.id}: negative quota")
        if self.penalty <= 0:
            raise DomainError(f"agent {self.id}: penalty must be positive")
        self.eta_schedule = tuple(float(x) for x in self.eta_schedule)
        if any(x < 0 for x in self.eta_schedule):
            raise DomainError(f"agent {self.id}: negative eta")
        if self.eta_schedule and self.eta_schedule[-1] != 0:
            raise DomainError(f"agent {self.id}: last-stage eta must be 0")

    def eta(self, stage: int) -> float:
        # schedule shorter than K: pad with zeros so stage K is always 0
        if stage - 1 < len(self.eta_schedule):
            return self.eta_schedule[stage - 1]
        return 0.0


# (arm id, sorted pulling agent ids, state, rng) -> chosen agent or None
PreferenceFn = Callable[[int, tuple, float, np.random.Generator], Optional[int]]


@dataclass
class ArmPreferenceModel:
    state: float
    preference_fn: PreferenceFn

    def choose(self, arm: int, pullers: Sequence[int], rng) -> Optional[int]:
        pullers = tuple(sorted(pullers))
        pick = self.preference_fn(arm, pullers, self.state, rng)
        if pick is not None and pick not in pullers:
            raise ContractViolation(f"arm {arm} chose agent {pick} that did not pull it")
        return pick


def ranked_preferences(rankings: Mapping[int, Sequence[int]], state: float = 0.5) -> ArmPreferenceModel:
    """Arms accept the best-ranked puller; agents missing from a ranking are unacceptable."""
    ranks = {a: {p: r for r, p in enumerate(order)} for a, order in rankings.items()}

    def fn(arm, pullers, state, rng):
        rk = ranks[arm]
        ok = [p for p in pullers if p in rk]
        if not ok:
            return None
        return min(ok, key=lambda p: (rk[p], p))

    return ArmPreferenceModel(state, fn)


def utility_preferences(values: np.ndarray, reservation=None, state: float = 0.5) -> ArmPreferenceModel:
    """values[arm, agent] is the arm's utility; ties go to the lowest agent id.

    An arm rejects everyone when its best offer falls below its reservation value.
    """
    values = np.asarray(values, dtype=float)
    res = None if reservation is None else np.broadcast_to(np.asarray(reservation, float), values.shape[:1])

    def fn(arm, pullers, state, rng):
        if not pullers:
            return None
        best = max(pullers, key=lambda p: (values[arm, p], -p))
        if res is not None and values[arm, best] < res[arm]:
            return None
        return best

    return ArmPreferenceModel(state, fn)


@dataclass
class MatchState:
    stage: int
    available: set
    matched: dict
    accepted_counts: dict


@dataclass
class MatchOutcome:
    pulls: dict          # (agent, stage) -> tuple of arm ids
    accepts: dict        # (agent, stage) -> tuple of arm ids
    matched: dict        # arm id -> agent id
    payoffs: dict        # agent id -> realized payoff
    stages_run: int
    decisions: dict = field(default_factory=dict)

    def pairs(self):
        return sorted(self.matched.items())

    def matched_count(self, agent: int) -> int:
        return sum(1 for a in self.matched.values() if a == agent)


def latent_utility(score: float, fit: float) -> float:
    if score < 0 or fit < 0:
        raise DomainError(f"negative score or fit: ({score}, {fit})")
    return score + fit


def expected_payoff(utilities, probs, prior_accepts: int, quota: int, penalty: float):
    """Expected utility of a pull set minus the expected over-quota penalty."""
    if prior_accepts < 0:
        raise DomainError("prior_accepts must be nonnegative")
    if any(p < 0 or p > 1 for p in probs):
        raise DomainError("acceptance probabilities must lie in [0, 1]")
    gain = sum((u * p for u, p in zip(utilities, probs)), 0)
    load = sum(probs, 0) + prior_accepts - quota
    return gain - penalty * max(load, 0)


def realized_payoff(utilities, quota: int, penalty: float) -> float:
    """Payoff from arms that actually accepted: utilities minus the over-quota penalty."""
    return float(sum(utilities)) - penalty * max(len(utilities) - quota, 0)


def _streams(seed: int, n_agents: int):
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_agents + 1)
    return [np.random.default_rng(c) for c in children[:-1]], np.random.default_rng(children[-1])


def run_multistage_match(
    arms: Sequence[Arm],
    agents: Sequence[AgentProfile],
    preference_model,
    stages: int,
    seed: int = 0,
) -> MatchOutcome:
    """Simulate K stages of simultaneous pulls with irreversible arm decisions.

    `preference_model` is either one ArmPreferenceModel or a sequence of them,
    one per stage (stage-specific arm behaviour).
    """
    if stages < 1:
        raise DomainError("need at least one stage")
    arm_map = {a.id: a for a in arms}
    ids = [p.id for p in agents]
    if sorted(ids) != list(range(len(agents))):
        raise DomainError("agent ids must be 0..m-1")
    for a in arms:
        if len(a.fits) != len(agents):
            raise DomainError(f"arm {a.id} has {len(a.fits)} fits for {len(agents)} agents")
    models = list(preference_model) if isinstance(preference_model, (list, tuple)) else [preference_model] * stages

    agent_rngs, arm_rng = _streams(seed, len(agents))
    st = MatchState(1, set(arm_map), {}, {p.id: 0 for p in agents})
    pulled_before = {p.id: set() for p in agents}
    pulls, accepts, decisions = {}, {}, {}
    stages_run = 0

    for k in range(1, stages + 1):
        st.stage = k
        active = [p for p in agents if st.accepted_counts[p.id] < p.quota]
        if not active:
            break
        stages_run = k
        bids = {}
        for p in active:
            allowed = st.available - pulled_before[p.id]
            if p.availability is not None:
                allowed &= p.availability
            view = AgentView(p.id, k, stages, tuple(sorted(allowed)), st.accepted_counts[p.id],
                             p.quota, p.penalty, p.eta(k), arm_map, agent_rngs[p.id])
            dec = p.strategy(view)
            bad = set(dec.pulls) - allowed
            if bad:
                raise ContractViolation(f"agent {p.id} stage {k} pulled unavailable arms {sorted(bad)}")
            decisions[(p.id, k)] = dec
            pulls[(p.id, k)] = dec.pulls
            pulled_before[p.id].update(dec.pulls)
            for a in dec.pulls:
                bids.setdefault(a, []).append(p.id)
        won = {p.id: [] for p in agents}
        model = models[k - 1]
        for a in sorted(bids):
            pick = model.choose(a, bids[a], arm_rng)
            if pick is not None:
                won[pick].append(a)
                st.matched[a] = pick
                st.available.discard(a)
        for p in active:
            accepts[(p.id, k)] = tuple(won[p.id])
            st.accepted_counts[p.id] += len(won[p.id])

    payoffs = {}
    for p in agents:
        got = [arm_map[a].utility(p.id) for a, who in st.matched.items() if who == p.id]
        payoffs[p.id] = realized_payoff(got, p.quota, p.penalty)
    return MatchOutcome(pulls, accepts, dict(sorted(st.matched.items())), payoffs, stages_run, decisions)
