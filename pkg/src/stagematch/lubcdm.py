"""The learned strategy: fit acceptance probabilities from history, deduct an
uncertainty penalty, calibrate the state, then apply the rate cutoff."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .calibration import DiscreteStates, CalibrationProblem, calibrate_average, calibrate_minimax
from .learning import (FittedAcceptanceModel, HistoryRecord, fit_acceptance_model,
                       fit_state_density)
from .market import AgentView, StrategyDecision
from .variational import greedy_masks

EMPIRICAL_MAX_STATES = 20


@dataclass
class LubCdmConfig:
    eta_schedule: tuple = (0.1, 0.0)
    penalty: float = 2.5
    quota: int = 5
    lam: Optional[float] = None
    lam_grid: tuple = (1e-3, 1e-2, 1e-1, 1.0)
    max_centers: Optional[int] = 150
    calibration: str = "average"
    delta_s: float = 1e-3
    grid_points: int = 201
    state_model: str = "auto"     # kde | empirical | auto (empirical for few distinct states)
    delta_states: str = "unit"    # unit: extremize over [0, 1]; observed: over the range of seen states
    seed: int = 0

    def __post_init__(self):
        self.eta_schedule = tuple(float(x) for x in self.eta_schedule)
        if any(x < 0 for x in self.eta_schedule):
            raise ValueError("eta entries must be nonnegative")
        if self.eta_schedule and self.eta_schedule[-1] != 0:
            raise ValueError("the last stage must use eta = 0")
        if self.state_model not in ("kde", "empirical", "auto"):
            raise ValueError("state_model must be 'kde', 'empirical' or 'auto'")
        if self.delta_states not in ("unit", "observed"):
            raise ValueError("delta_states must be 'unit' or 'observed'")
        if self.calibration not in ("average", "minimax"):
            raise ValueError("calibration must be 'average' or 'minimax'")

    def eta(self, stage: int) -> float:
        return self.eta_schedule[stage - 1] if stage - 1 < len(self.eta_schedule) else 0.0


@dataclass
class StageModel:
    model: FittedAcceptanceModel
    density: object
    delta_grid: Optional[np.ndarray] = None   # None: the model's own state grid


def fit_stage_model(records: Sequence[HistoryRecord], config: LubCdmConfig) -> StageModel:
    model = fit_acceptance_model(records, lam=config.lam, lam_grid=config.lam_grid,
                                 seed=config.seed, max_centers=config.max_centers)
    # one state observation per period
    per_period = {}
    for r in records:
        per_period.setdefault(r.t, r.state)
    obs = np.array([per_period[t] for t in sorted(per_period)])
    support, counts = np.unique(obs, return_counts=True)
    if config.state_model == "empirical" or (config.state_model == "auto" and support.size <= EMPIRICAL_MAX_STATES):
        density = DiscreteStates(support, counts / counts.sum())
    else:
        density = fit_state_density(obs)
    grid = None
    if config.delta_states == "observed":
        # far from the data the fit relaxes to probability 1/2, which would read as state sensitivity
        grid = np.linspace(obs.min(), obs.max(), model.state_grid.size)
    return StageModel(model, density, grid)


def build_problem(sm: StageModel, utilities, scores, eta, penalty, remaining_quota) -> CalibrationProblem:
    """Calibration problem whose probabilities come from the learned bound."""
    scores = np.asarray(scores, float)
    inside = sm.model.in_range(scores)
    delta = np.where(inside, sm.model.delta_hat(scores, sm.delta_grid), 0.0)

    def pi_fn(states):
        p = expit(sm.model.log_odds_grid(states, scores))
        # untried scores get probability one (exploration branch)
        return np.where(inside[None, :], p, 1.0)

    return CalibrationProblem(np.asarray(utilities, float), pi_fn, delta, eta, penalty,
                              remaining_quota, sm.density)


def lub_cdm_select(sm: Optional[StageModel], ids, util, scores, stage: int, prior_accepts: int,
                   config: LubCdmConfig) -> StrategyDecision:
    """Array form: ids, utilities and scores of the arms this agent may pull."""
    remaining = config.quota - prior_accepts
    ids = np.asarray(ids, dtype=int)
    util = np.asarray(util, float)
    if sm is None:
        order = np.lexsort((ids, -util))[: max(remaining, 0)]
        return StrategyDecision(ids[order].tolist(), diagnostics={"method": "lub-cdm", "cold_start": True})
    if remaining <= 0 or ids.size == 0:
        return StrategyDecision((), diagnostics={"method": "lub-cdm"})
    eta = config.eta(stage)
    problem = build_problem(sm, util, scores, eta, config.penalty, remaining)
    diag = {"method": "lub-cdm"}
    if config.calibration == "average":
        s = calibrate_average(problem, config.grid_points, config.delta_s, diag)
    else:
        s = calibrate_minimax(problem, config.grid_points, diag)
    mask = problem.select([s])[0]
    p = problem.pi([s])[0]
    raw = p - eta * problem.delta
    if np.any(raw < 0):
        diag["clamped_lower_bound"] = int(np.sum(raw < 0))
    cutoff = None
    if mask.any():
        # cutoff value: the smallest rate that made it into the pull set
        cutoff = float(np.min(util[mask] * np.maximum(raw[mask], 0.0) / p[mask]))
    return StrategyDecision(ids[mask].tolist(), calibrated_state=float(s), cutoff=cutoff, diagnostics=diag)


def lub_cdm_decide(sm: Optional[StageModel], view_arms, stage: int, prior_accepts: int,
                   config: LubCdmConfig) -> StrategyDecision:
    """view_arms: sequence of (id, utility, score) still available to this agent."""
    view_arms = list(view_arms)
    ids = [a[0] for a in view_arms]
    util = [a[1] for a in view_arms]
    scores = [a[2] for a in view_arms]
    return lub_cdm_select(sm, ids, util, scores, stage, prior_accepts, config)


@dataclass
class LubCdmStrategy:
    """Engine adapter: per-stage models fitted once from this agent's history."""

    config: LubCdmConfig
    history: Sequence[HistoryRecord] = ()
    models: dict = field(default_factory=dict)
    force_eta_zero: bool = False
    # optional lookup arrays indexed by arm id (skip per-arm Python calls)
    utility_row: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.force_eta_zero:
            self.config = LubCdmConfig(**{**self.config.__dict__,
                                          "eta_schedule": tuple(0.0 for _ in self.config.eta_schedule)})
        by_stage = {}
        for r in self.history:
            by_stage.setdefault(r.k, []).append(r)
        for k, recs in by_stage.items():
            if k not in self.models:
                self.models[k] = fit_stage_model(recs, self.config)

    def __call__(self, view: AgentView) -> StrategyDecision:
        sm = self.models.get(view.stage)
        if self.utility_row is not None:
            ids = np.asarray(view.available, dtype=int)
            return lub_cdm_select(sm, ids, self.utility_row[ids], self.scores[ids], view.stage,
                                  view.prior_accepts, self.config)
        arms = [(a, view.utility(a), view.arms[a].score) for a in view.available]
        return lub_cdm_decide(sm, arms, view.stage, view.prior_accepts, self.config)


def straightforward_cdm(config: LubCdmConfig, history=(), models=None) -> LubCdmStrategy:
    """Same pipeline with the uncertainty deduction switched off at every stage."""
    return LubCdmStrategy(config, history, dict(models or {}), force_eta_zero=True)


def consistency_probe(true_pi, scores, utilities, sizes, state: float, remaining_quota: int, penalty: float,
                      seed: int = 0, lam: float = 1e-2, pulls_per_period: int = 10, max_centers=150):
    """Agreement between the learned and the true-surface cutoff selections.

    true_pi(states, scores) -> (len(states), len(scores)). For each history
    size T, simulate T periods of random pulls with uniformly drawn states,
    fit, and compare selections at `state` with no uncertainty deduction.
    """
    scores = np.asarray(scores, float)
    utilities = np.asarray(utilities, float)
    p_true = np.asarray(true_pi(np.array([state]), scores))[0]
    oracle = greedy_masks(utilities, p_true[None], p_true[None], remaining_quota, penalty)[0]
    out = {}
    for T in sizes:
        rng = np.random.default_rng([seed, T])
        if T == 0:
            top = np.argsort(-utilities, kind="stable")[:remaining_quota]
            learned = np.zeros(scores.size, bool)
            learned[top] = True
            out[T] = float(np.mean(learned == oracle))
            continue
        s_hist, v_hist, y_hist, t_hist = [], [], [], []
        for t in range(T):
            st = rng.random()
            pick = rng.choice(scores.size, min(pulls_per_period, scores.size), replace=False)
            p = np.asarray(true_pi(np.array([st]), scores[pick]))[0]
            y = rng.random(pick.size) < p
            s_hist += [st] * pick.size
            v_hist += scores[pick].tolist()
            y_hist += y.astype(float).tolist()
            t_hist += [t] * pick.size
        from .learning import fit_kernel_logistic
        model = fit_kernel_logistic(s_hist, v_hist, y_hist, lam, t=t_hist, seed=seed, max_centers=max_centers)
        p_hat = model.predict(np.full(scores.size, state), scores)
        p_hat = np.where(model.in_range(scores), p_hat, 1.0)
        learned = greedy_masks(utilities, p_hat[None], p_hat[None], remaining_quota, penalty)[0]
        out[T] = float(np.mean(learned == oracle))
    return out
