"""Experiment runners. Each returns a list of CSV rows (dicts keyed by
CSV_COLUMNS) and is deterministic given the master seed."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baselines import (bellman_iterate, concave_schedule, convex_schedule, deferred_acceptance,
                        simple_cutoff_strategy, utility_preference_lists)
from .calibration import CalibrationProblem, DiscreteStates
from .learning import HistoryRecord
from .lubcdm import LubCdmConfig, LubCdmStrategy, fit_stage_model
from .market import (AgentProfile, Arm, StrategyDecision, ranked_preferences, realized_payoff,
                     run_multistage_match, utility_preferences)
from .metrics import replay_payoffs

CSV_COLUMNS = ("experiment", "replication", "agent_id", "method", "stage_count", "student_count",
               "payoff", "envy_level", "matched_count", "eta")


class ConfigError(ValueError):
    pass


def derive_seed(master: int, experiment: str, replication: int, *extra: int) -> int:
    """Seed for one replication: hash of (master, experiment name, replication, extra counters)."""
    words = [int(master) & 0xFFFFFFFF, int(master) >> 32, zlib.crc32(experiment.encode()), int(replication)]
    words += [int(x) for x in extra]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def row(experiment, replication, agent_id, method, payoff, stage_count=None, student_count=None,
        envy_level=None, matched_count=None, eta=None):
    return dict(experiment=experiment, replication=replication, agent_id=agent_id, method=method,
                stage_count=stage_count, student_count=student_count, payoff=payoff, envy_level=envy_level,
                matched_count=matched_count, eta=eta)


# ---------------------------------------------------------------- small fixed instances

FOUR_ARM_UTILITIES = np.array([[3, 2.5, 2, 1.2], [3, 2.5, 2, 1.5], [2.5, 2, 3, 1.8]])
FOUR_ARM_SCORES = (2.0, 2.0, 2.0, 1.0)
FOUR_ARM_QUOTAS = (2, 1, 1)
FOUR_ARM_RANKINGS = {0: [2, 0, 1], 1: [1, 0, 2], 2: [0, 2, 1], 3: [0, 1, 2]}
FOUR_ARM_PENALTY = 5.0


def four_arm_example(strategies=None):
    """Four arms, three agents with quotas (2, 1, 1) and fixed arm rankings."""
    arms = [Arm(j, FOUR_ARM_SCORES[j], tuple(FOUR_ARM_UTILITIES[:, j] - FOUR_ARM_SCORES[j])) for j in range(4)]
    strategies = strategies or {}
    agents = [AgentProfile(i, q, FOUR_ARM_PENALTY, strategies.get(i, simple_cutoff_strategy))
              for i, q in enumerate(FOUR_ARM_QUOTAS)]
    return arms, agents, dict(FOUR_ARM_RANKINGS)


def random_ranked_instance(rng, n_arms, n_agents, max_quota=2, penalty=None):
    """Random scores/fits, random quotas and random strict arm rankings."""
    scores = rng.random(n_arms)
    fits = rng.random((n_agents, n_arms))
    quotas = rng.integers(1, max_quota + 1, n_agents)
    pen = 3.0 if penalty is None else penalty
    arms = [Arm(j, float(scores[j]), tuple(float(x) for x in fits[:, j])) for j in range(n_arms)]
    agents = [AgentProfile(i, int(quotas[i]), pen, simple_cutoff_strategy) for i in range(n_agents)]
    rankings = {j: rng.permutation(n_agents).tolist() for j in range(n_arms)}
    return arms, agents, rankings


def run_da_comparison(cfg) -> tuple:
    arms, agents, rankings = four_arm_example()
    util = FOUR_ARM_UTILITIES
    da = deferred_acceptance(utility_preference_lists(util), dict(enumerate(FOUR_ARM_QUOTAS)), rankings)
    dec = run_multistage_match(arms, agents, ranked_preferences(rankings), 2, cfg.seed)
    rows, pairs = [], []
    for method, match in (("da", da), ("decentralized", dec.matched)):
        for i, p in enumerate(agents):
            got = [util[i, j] for j, w in match.items() if w == i]
            rows.append(row("da_comparison", 0, i, method, realized_payoff(got, p.quota, p.penalty),
                            stage_count=None if method == "da" else 2, matched_count=len(got)))
        pairs += [dict(method=method, arm=j, agent=w) for j, w in sorted(match.items())]
    return rows, {"matchings": pairs}


def run_multi_vs_single(cfg) -> tuple:
    p = cfg.params
    rows = []
    arms, agents, rankings = four_arm_example()
    for K in (1, 2):
        out = run_multistage_match(arms, agents, ranked_preferences(rankings), K, cfg.seed)
        for i in range(len(agents)):
            rows.append(row("multi_vs_single", 0, i, "table", out.payoffs[i], stage_count=K,
                            matched_count=out.matched_count(i)))
    for r in range(cfg.reps):
        rng = np.random.default_rng(derive_seed(cfg.seed, "multi_vs_single", r))
        arms, agents, rankings = random_ranked_instance(rng, p["n_arms"], p["n_agents"], p["max_quota"])
        model = ranked_preferences(rankings)
        for i in range(len(agents)):
            single, multi = replay_payoffs(arms, agents, model, p["stages"], i, seed=r)
            rows.append(row("multi_vs_single", r + 1, i, "single", single, stage_count=1))
            rows.append(row("multi_vs_single", r + 1, i, "replay", multi, stage_count=p["stages"]))
    return rows, {}


# ---------------------------------------------------------------- search model with reservation schedules

def adachi_payoff(schedule, n, rng, others_reservation, p1_value=40.0, top=50.0):
    """One search market: each stage every unmatched agent meets a random unmatched arm.

    Arms and agents carry common values on [0, top]; an arm accepts an agent whose
    value is at least its own, an agent takes an arm worth at least its
    reservation. Agent 0 has value p1_value and follows `schedule`; the others
    use a fixed reservation. Returns agent 0's payoff (0 if unmatched).
    """
    arm_val = rng.uniform(0, top, n)
    agent_val = rng.uniform(0, top, n)
    agent_val[0] = p1_value
    arms_left = np.arange(n)
    agents_left = np.arange(n)
    for k in range(1, n + 1):
        if arms_left.size == 0 or agents_left.size == 0:
            break
        met = rng.permutation(arms_left)[: agents_left.size]
        who = agents_left[: met.size]
        res = np.full(who.size, others_reservation)
        res[who == 0] = schedule.at(k)
        ok = (arm_val[met] >= res) & (agent_val[who] >= arm_val[met])
        if np.any(ok & (who == 0)):
            return float(arm_val[met[who == 0][0]])
        arms_left = np.setdiff1d(arms_left, met[ok])
        agents_left = np.setdiff1d(agents_left, who[ok])
        if 0 not in agents_left:
            break
    return 0.0


def run_adachi_search(cfg) -> tuple:
    p = cfg.params
    from scipy.stats import uniform
    v_p, _ = bellman_iterate(uniform(0, p["top"]), uniform(0, p["top"]), p["rho"], seed=cfg.seed)
    rows = []
    for n in p["n_values"]:
        for r in range(cfg.reps):
            for method, sched in (("convex", convex_schedule(n, p["top"], p["scale"])),
                                  ("concave", concave_schedule(n, p["top"], p["scale"]))):
                rng = np.random.default_rng(derive_seed(cfg.seed, "adachi_search", r, n))
                pay = adachi_payoff(sched, n, rng, v_p, p["p1_value"], p["top"])
                rows.append(row("adachi_search", r, 0, method, pay, stage_count=n, student_count=n,
                                matched_count=int(pay > 0)))
    return rows, {"others_reservation": v_p}


# ---------------------------------------------------------------- three-agent example

@dataclass
class ThreeAgentWorld:
    """Two-state market with two competing learners and one score-only agent."""

    n: int = 100
    quota: int = 10
    penalty: float = 5.0
    s_a: float = 0.6
    u: tuple = (1.0, 0.9, 0.8)
    p_star: float = 0.3
    scores: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.scores is None:
            # n evenly spaced scores on (1, 3]
            self.scores = np.round(1.0 + 2.0 * np.arange(1, self.n + 1) / self.n, 10)

    def draw(self, rng):
        """(state, arm types, availability per agent)."""
        state = self.s_a if rng.random() < 0.5 else 1 - self.s_a
        likes_p1 = rng.random(self.n) < state
        avail = [frozenset(np.nonzero(rng.random(self.n) >= self.p_star)[0].tolist()) for _ in range(2)]
        return state, likes_p1, avail

    def arm_values(self, likes_p1):
        u1, u2, u3 = self.u
        v = np.empty((self.n, 3))
        v[:, 0] = np.where(likes_p1, u1, u2)
        v[:, 1] = np.where(likes_p1, u2, u1)
        v[:, 2] = u3
        return v

    def arms(self):
        return [Arm(j, float(self.scores[j]), (0.0, 0.0, 0.0)) for j in range(self.n)]


@dataclass
class RandomProposer:
    """Pulls the top-c remaining arms by utility, c uniform on [1, 2 * remaining quota]."""

    utility_row: np.ndarray

    def __call__(self, view):
        rem = view.remaining_quota
        if rem <= 0 or not view.available:
            return StrategyDecision(())
        ids = np.asarray(view.available)
        c = int(view.rng.integers(1, 2 * rem + 1))
        order = np.lexsort((ids, -self.utility_row[ids]))[:c]
        return StrategyDecision(ids[order].tolist(), diagnostics={"method": "random"})


@dataclass
class FastSimpleCutoff:
    utility_row: np.ndarray

    def __call__(self, view):
        ids = np.asarray(view.available, dtype=int)
        order = np.lexsort((ids, -self.utility_row[ids]))[: max(view.remaining_quota, 0)]
        return StrategyDecision(ids[order].tolist(), diagnostics={"method": "simple"})


def _records(outcome, agent, state, t, arms):
    out = []
    for (i, k), pulled in sorted(outcome.pulls.items()):
        if i != agent:
            continue
        acc = set(outcome.accepts.get((i, k), ()))
        for a in pulled:
            out.append(HistoryRecord(t, k, float(state), float(arms[a].score), float(arms[a].fits[i]), int(a in acc)))
    return out


def three_agent_history(world: ThreeAgentWorld, periods: int, seed: int, rival=None):
    """Histories for agents 0 and 1.

    Agent 0 random-proposes; agent 1 random-proposes too unless `rival` gives
    its strategy; agent 2 pulls by score.
    """
    rng = np.random.default_rng(seed)
    arms = world.arms()
    util = world.scores
    hist = {0: [], 1: []}
    for t in range(periods):
        state, likes, avail = world.draw(rng)
        agents = [AgentProfile(0, world.quota, world.penalty, RandomProposer(util), availability=avail[0]),
                  AgentProfile(1, world.quota, world.penalty, rival or RandomProposer(util), availability=avail[1]),
                  AgentProfile(2, world.quota, world.penalty, FastSimpleCutoff(util))]
        out = run_multistage_match(arms, agents, utility_preferences(world.arm_values(likes)), 2,
                                   int(rng.integers(2 ** 32)))
        hist[0] += _records(out, 0, state, t, arms)
        hist[1] += _records(out, 1, 1 - state, t, arms)
    return hist


def run_three_agent(cfg) -> tuple:
    p = cfg.params
    world = ThreeAgentWorld(n=p["n"], quota=p["quota"], penalty=p["penalty"], s_a=p["s_a"],
                            u=tuple(p["utilities"]), p_star=p["p_star"])
    arms = world.arms()
    util = world.scores
    etas = [0.0] + [float(e) for e in p["eta_grid"] if e != 0]
    rows = []
    for r in range(cfg.reps):
        seed = derive_seed(cfg.seed, "three_agent", r)
        base = LubCdmConfig(eta_schedule=(0.0, 0.0), penalty=world.penalty, quota=world.quota, lam=p["lam"],
                            max_centers=p["max_centers"], calibration=p["calibration"], seed=seed % (2 ** 32),
                            delta_states=p["delta_states"])
        # the rival learns from an exploratory past, then plays the calibrated rule;
        # agent 0's own history is collected against that rival
        pre = three_agent_history(world, p["history_periods"], seed)
        m1 = {k: fit_stage_model([h for h in pre[1] if h.k == k], base) for k in (1, 2)}
        p2 = LubCdmStrategy(base, models=m1, utility_row=util, scores=world.scores)
        hist = three_agent_history(world, p["history_periods"], seed + 1, rival=p2)
        m0 = {k: fit_stage_model([h for h in hist[0] if h.k == k], base) for k in (1, 2)}
        rng = np.random.default_rng([seed, 1])
        state, likes, avail = world.draw(rng)
        model = utility_preferences(world.arm_values(likes))
        for eta in etas:
            cfg1 = LubCdmConfig(**{**base.__dict__, "eta_schedule": (eta, 0.0)})
            p1 = LubCdmStrategy(cfg1, models=m0, utility_row=util, scores=world.scores)
            agents = [AgentProfile(0, world.quota, world.penalty, p1, (eta, 0.0), avail[0]),
                      AgentProfile(1, world.quota, world.penalty, p2, (0.0,), avail[1]),
                      AgentProfile(2, world.quota, world.penalty, FastSimpleCutoff(util))]
            out = run_multistage_match(arms, agents, model, 2, seed % (2 ** 32))
            method = "cdm" if eta == 0 else "lub-cdm"
            for i in range(3):
                rows.append(row("three_agent", r, i, method, out.payoffs[i], stage_count=2,
                                matched_count=out.matched_count(i), eta=eta))
    return rows, {}


def three_agent_calibration_problem(eta: float = 0.1, world: Optional[ThreeAgentWorld] = None):
    """Agent 0's stage-one calibration problem with the structural acceptance curve.

    Every arm can be contested by agent 1, which finds it acceptable with
    probability 1 - p*, and then wins it when the arm prefers agent 1.
    """
    world = world or ThreeAgentWorld()
    lo, hi = 1 - world.s_a, world.s_a

    def pi_fn(states):
        s = np.asarray(states, float)[:, None]
        return np.broadcast_to(1 - (1 - world.p_star) * (1 - s), (s.shape[0], world.n)).copy()

    delta = np.full(world.n, 0.5 * (1 - world.p_star) * (hi - lo))
    return CalibrationProblem(world.scores.astype(float), pi_fn, delta, eta, world.penalty, world.quota,
                              DiscreteStates([lo, hi], [0.5, 0.5]))


# ---------------------------------------------------------------- graduate admissions

@dataclass
class GraduateWorld:
    """Fifty colleges in three tiers; students' tastes shift with a discrete state."""

    tiers: tuple = (5, 10, 35)
    quota: int = 5
    penalty: float = 2.5
    n_states: int = 10
    tilt: float = 1.0
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.m = sum(self.tiers)
        self.tier = np.repeat(np.arange(len(self.tiers)), self.tiers)
        # popularity of every college under each state; the observed state of a college
        self.popularity = rng.random((self.n_states, self.m))

    def students(self, count, rng):
        top, good = 10, 100
        if count < top + good:
            raise ConfigError(f"student count must be at least {top + good}, got {count}")
        scores = np.concatenate([rng.uniform(0.9, 1.0, top), rng.uniform(0.7, 0.9, good),
                                 rng.uniform(0.0, 0.7, count - top - good)])
        fits = rng.random((self.m, count))
        return scores, fits

    def student_values(self, state_idx, count, rng):
        """values[student, college]: tier dominates, popularity tilts the random within-tier taste."""
        noise = rng.random((count, self.m))
        within = self.tilt * self.popularity[state_idx][None, :] + noise
        return (len(self.tiers) - self.tier)[None, :] * 10.0 + within

    def arms(self, scores, fits):
        return [Arm(j, float(scores[j]), tuple(float(x) for x in fits[:, j])) for j in range(scores.size)]


def graduate_training(world: GraduateWorld, count: int, per_state: int, seed: int):
    """Random-proposing history for every college; returns {college: records}."""
    rng = np.random.default_rng(seed)
    hist = {i: [] for i in range(world.m)}
    t = 0
    for l in range(world.n_states):
        for _ in range(per_state):
            scores, fits = world.students(count, rng)
            util = scores[None, :] + fits
            arms = world.arms(scores, fits)
            agents = [AgentProfile(i, world.quota, world.penalty, RandomProposer(util[i])) for i in range(world.m)]
            model = utility_preferences(world.student_values(l, count, rng))
            out = run_multistage_match(arms, agents, model, 2, int(rng.integers(2 ** 32)))
            for i in range(world.m):
                hist[i] += _records(out, i, world.popularity[l, i], t, arms)
            t += 1
    return hist


def run_graduate_admissions(cfg) -> tuple:
    p = cfg.params
    if p["training_per_state"] < 1:
        raise ConfigError("training_per_state must be at least 1")
    measured = [int(x) for x in p["measured"]]
    rows = []
    for count in p["student_counts"]:
        world = GraduateWorld(tuple(p["tiers"]), p["quota"], p["penalty"], p["n_states"], p["tilt"],
                              derive_seed(cfg.seed, "graduate_world", 0, count) % (2 ** 32))
        hist = graduate_training(world, count, p["training_per_state"], derive_seed(cfg.seed, "graduate_train", 0, count))
        base = LubCdmConfig(eta_schedule=tuple(p["eta_schedule"]), penalty=world.penalty, quota=world.quota,
                            lam=p["lam"], max_centers=p["max_centers"], calibration=p["calibration"])
        models = {i: {k: fit_stage_model([h for h in hist[i] if h.k == k], base) for k in (1, 2)}
                  for i in range(world.m)}
        switchers = measured if p["switch"] == "self" else [0]
        for r in range(cfg.reps):
            seed = derive_seed(cfg.seed, "graduate_admissions", r, count)
            rng = np.random.default_rng(seed)
            scores, fits = world.students(count, rng)
            util = scores[None, :] + fits
            arms = world.arms(scores, fits)
            state = int(rng.integers(world.n_states))
            model = utility_preferences(world.student_values(state, count, rng))
            lub = [_CachedStrategy(LubCdmStrategy(base, models=models[i], utility_row=util[i], scores=scores))
                   for i in range(world.m)]
            variants = [("lub-cdm", None)] + [("simple", i) for i in switchers]
            results = {}
            for method, who in variants:
                agents = [AgentProfile(i, world.quota, world.penalty,
                                       FastSimpleCutoff(util[i]) if i == who else lub[i],
                                       tuple(p["eta_schedule"])) for i in range(world.m)]
                results[(method, who)] = run_multistage_match(arms, agents, model, 2, seed % (2 ** 32))
            for i in measured:
                simple_key = ("simple", i if p["switch"] == "self" else 0)
                for method, key in (("lub-cdm", ("lub-cdm", None)), ("simple", simple_key)):
                    out = results[key]
                    rows.append(row("graduate_admissions", r, i, method, out.payoffs[i], stage_count=2,
                                    student_count=count, matched_count=out.matched_count(i)))
    return rows, {}


class _CachedStrategy:
    """Memoizes decisions on (stage, available set, prior accepts): runs that
    differ only in another college's strategy share identical stage-one views."""

    def __init__(self, inner):
        self.inner = inner
        self.memo = {}

    def __call__(self, view):
        key = (view.stage, view.available, view.prior_accepts)
        if key not in self.memo:
            self.memo[key] = self.inner(view)
        return self.memo[key]


# ---------------------------------------------------------------- custom instance

def run_custom(cfg) -> tuple:
    from .io import load_instance
    inst = load_instance(cfg.params["instance"])
    rows = []
    for r in range(cfg.reps):
        out = run_multistage_match(inst.arms, inst.agents, inst.preference_model, inst.stages,
                                   derive_seed(inst.seed if cfg.seed is None else cfg.seed, "custom", r) % (2 ** 32))
        for p in inst.agents:
            rows.append(row("custom", r, p.id, "engine", out.payoffs[p.id], stage_count=inst.stages,
                            matched_count=out.matched_count(p.id)))
    return rows, {}


DEFAULTS = {
    "graduate_admissions": dict(student_counts=[250, 260, 270, 280, 290, 300], tiers=[5, 10, 35], quota=5,
                                penalty=2.5, n_states=10, training_per_state=20, eta_schedule=[0.1, 0.0],
                                switch="self", measured=[0, 5, 15], lam=0.01, max_centers=80,
                                calibration="average", tilt=1.0),
    "three_agent": dict(n=100, quota=10, penalty=5.0, s_a=0.6, utilities=[1.0, 0.9, 0.8], p_star=0.3,
                        eta_grid=[0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2],
                        history_periods=200, lam=0.01, max_centers=80, calibration="average",
                        delta_states="observed"),
    "adachi_search": dict(n_values=[100, 200, 300, 400, 500, 600, 700, 800, 900, 1000], rho=0.95, top=50.0,
                          scale=5.0, p1_value=40.0),
    "da_comparison": dict(),
    "multi_vs_single": dict(n_arms=8, n_agents=4, max_quota=2, stages=3),
    "custom": dict(instance=None),
}

RUNNERS = {
    "graduate_admissions": run_graduate_admissions,
    "three_agent": run_three_agent,
    "adachi_search": run_adachi_search,
    "da_comparison": run_da_comparison,
    "multi_vs_single": run_multi_vs_single,
    "custom": run_custom,
}


@dataclass
class ExperimentConfig:
    name: str
    reps: int = 100
    seed: int = 0
    params: dict = field(default_factory=dict)
    out: str = "results"

    def __post_init__(self):
        if self.name not in RUNNERS:
            raise ConfigError(f"unknown experiment {self.name!r}; valid: {', '.join(sorted(RUNNERS))}")
        if int(self.reps) < 1:
            raise ConfigError("reps must be at least 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        unknown = sorted(set(self.params) - set(DEFAULTS[self.name]))
        if unknown:
            raise ConfigError(f"unknown parameter(s) for {self.name}: {', '.join(unknown)}")
        self.params = {**DEFAULTS[self.name], **self.params}
        if self.name == "custom" and not self.params.get("instance"):
            raise ConfigError("custom experiment needs params.instance")


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.name](cfg)
