"""State calibration: choose the state at which to run the cutoff rule, trading
the opportunity cost of pulling too few arms against the over-quota penalty."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .variational import greedy_masks

GRID_POINTS = 201
BISECT_TOL = 1e-6
DELTA_S = 1e-3


@dataclass
class DiscreteStates:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, float)
        self.weights = np.asarray(self.weights, float)
        order = np.argsort(self.support)
        self.support, self.weights = self.support[order], self.weights[order]
        if np.any((self.support < 0) | (self.support > 1)):
            raise ValueError("support must lie in [0, 1]")
        if not np.isclose(self.weights.sum(), 1.0) or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative and sum to 1")

    def cdf(self, x):
        return float(self.weights[self.support <= x].sum())


@dataclass
class CalibrationProblem:
    """pi_fn(states) -> (len(states), n) acceptance probabilities of the n arms.

    delta: per-arm uncertainty measure; the deducted probability used for
    ranking is max(pi - eta*delta, 0).
    """

    utilities: np.ndarray
    pi_fn: Callable[[np.ndarray], np.ndarray]
    delta: np.ndarray
    eta: float
    penalty: float
    remaining_quota: float
    distribution: object
    quad_points: int = 401
    _cache: dict = field(default_factory=dict, repr=False)
    _pi_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.utilities = np.asarray(self.utilities, float)
        self.delta = np.asarray(self.delta, float)

    def pi(self, states):
        states = np.atleast_1d(np.asarray(states, float))
        key = states.tobytes()
        if key not in self._pi_cache:
            self._pi_cache[key] = np.atleast_2d(self.pi_fn(states))
        return self._pi_cache[key]

    def lower(self, pi):
        return np.maximum(pi - self.eta * self.delta, 0.0)

    def select(self, states):
        """Selection masks for each state (cached by exact state value)."""
        states = np.atleast_1d(np.asarray(states, float))
        todo = [s for s in dict.fromkeys(states.tolist()) if s not in self._cache]
        if todo:
            p = self.pi(todo)
            masks = greedy_masks(self.utilities, p, self.lower(p), self.remaining_quota, self.penalty)
            for s, m in zip(todo, masks):
                self._cache[s] = m
        return np.array([self._cache[s] for s in states.tolist()])

    def selector(self, state):
        return frozenset(np.nonzero(self.select([state])[0])[0].tolist())

    @property
    def support_bounds(self):
        d = self.distribution
        if isinstance(d, DiscreteStates):
            return float(d.support[0]), float(d.support[-1])
        return 0.0, 1.0


def marginal_set(selector: Callable[[float], frozenset], state: float, delta_s: float = DELTA_S):
    """Arms added when the state is lowered by delta_s."""
    if delta_s <= 0:
        raise ValueError("delta_s must be positive")
    if state - delta_s < 0:
        raise ValueError("state - delta_s must be nonnegative")
    return frozenset(selector(state - delta_s)) - frozenset(selector(state))


def _overflow_increment(problem: CalibrationProblem, p_all, idx, s):
    """Per-state increase of the over-quota excess when the marginal arms join B(s)."""
    base = problem.select([s])[0]
    n_base = p_all[:, base].sum(1)
    n_new = p_all[:, idx].sum(1)
    q = problem.remaining_quota
    return np.maximum(n_base + n_new - q, 0.0) - np.maximum(n_base - q, 0.0)


def _balance_terms(problem: CalibrationProblem, arms, s):
    """Opportunity cost and expected extra penalty of adding the marginal arms at s.

    The penalty side is evaluated as the exact expected increase of the
    over-quota excess; with a continuum of arms, overflow happens exactly when
    the true state exceeds s and this reduces to penalty * sum over s* > s of pi.
    """
    idx = np.array(sorted(arms), dtype=int)
    u = problem.utilities[idx]
    d = problem.delta[idx]
    dist = problem.distribution
    if isinstance(dist, DiscreteStates):
        p_all = problem.pi(dist.support)
        p = p_all[:, idx]
        w = dist.weights
        other = dist.support != s
        p_other = w[other].sum()
        if p_other > 0:
            cond = (w[other] @ p[other]) / p_other
            lhs = p_other * float(u @ (cond - problem.eta * d))
        else:
            lhs = 0.0
        rhs = problem.penalty * float(w @ _overflow_increment(problem, p_all, idx, s))
        return lhs, rhs
    grid = np.linspace(0.0, 1.0, problem.quad_points)
    edges = np.concatenate([[0.0], 0.5 * (grid[1:] + grid[:-1]), [1.0]])
    w = np.diff(dist.cdf(edges))
    p_all = problem.pi(grid)
    lhs = float(u @ (w @ p_all[:, idx] - problem.eta * d))
    rhs = problem.penalty * float(w @ _overflow_increment(problem, p_all, idx, s))
    return lhs, rhs


def average_balance(problem: CalibrationProblem, s: float, delta_s: float = DELTA_S):
    """(lhs, rhs, marginal arms) at state s; None when the marginal set is empty."""
    lo = max(s - delta_s, 0.0)
    if lo == s:
        return None
    arms = marginal_set(problem.selector, s, s - lo)
    if not arms:
        return None
    lhs, rhs = _balance_terms(problem, arms, s)
    return lhs, rhs, arms


def _find_change(problem, lo, hi, ref, tol=BISECT_TOL):
    """Highest point below `hi` where the selection stops equalling `ref`.

    Assumes select(lo) != ref. Returns (a, b): b keeps ref, a does not, b - a < tol.
    """
    a, b = lo, hi
    while b - a > tol:
        mid = 0.5 * (a + b)
        if np.array_equal(problem.select([mid])[0], ref):
            b = mid
        else:
            a = mid
    return a, b


def calibrate_average(problem: CalibrationProblem, grid_points: int = GRID_POINTS,
                      delta_s: float = DELTA_S, diagnostics: Optional[dict] = None) -> float:
    diag = diagnostics if diagnostics is not None else {}
    dist = problem.distribution
    if isinstance(dist, DiscreteStates):
        # one vectorized pass fills the selection cache for every support point
        sup = dist.support
        problem.select(sup)
        current, informative = float(sup[-1]), False
        for i in range(sup.size - 1, 0, -1):
            s = float(sup[i])
            # arms gained by dropping to the next support point
            arms = problem.selector(float(sup[i - 1])) - problem.selector(s)
            if arms:
                informative = True
                lhs, rhs = _balance_terms(problem, arms, s)
                if lhs < rhs:
                    break
            current = float(sup[i - 1])
        if not informative:
            diag["calibration"] = "selection constant over the support; using support maximum"
            return float(sup[-1])
        return current

    grid = np.linspace(0.0, 1.0, grid_points)
    masks = problem.select(grid)
    informative = False
    for g in range(grid_points - 1, 0, -1):
        hi, lo = grid[g], grid[g - 1]
        upper = hi
        while not np.array_equal(problem.select([upper])[0], masks[g - 1]):
            ref = problem.select([upper])[0]
            a, b = _find_change(problem, lo, upper, ref)
            res = average_balance(problem, b, delta_s)
            if res is not None:
                informative = True
                lhs, rhs, _ = res
                if lhs < rhs:
                    return float(b)
            upper = a
    if not informative:
        diag["calibration"] = "selection constant in the state; using support maximum"
        return 1.0
    # every marginal group passed the balance test: keep all of them
    diag["calibration"] = "balance never turned negative; using the lowest state"
    return float(grid[0])


def minimax_balance(problem: CalibrationProblem, s: float) -> float:
    """Left minus right side of the worst-case balance at state s."""
    s_lo, s_hi = problem.support_bounds
    m_s, m_lo, m_hi = problem.select([s, s_lo, s_hi])
    p_lo, p_hi = problem.pi([s_lo, s_hi])
    u, d, eta, g = problem.utilities, problem.delta, problem.eta, problem.penalty
    q = problem.remaining_quota
    lhs = 2 * float(u[m_s] @ d[m_s]) + float(u[m_lo] @ (p_lo[m_lo] - eta * d[m_lo]))
    # over-quota terms taken as excesses, so a highest-state selection that
    # already overflows is charged for it and an underfull B(s) is not credited
    rhs = (float(u[m_hi] @ (p_hi[m_hi] - eta * d[m_hi])) - g * max(float(p_hi[m_hi].sum()) - q, 0.0)
           + g * max(float(p_hi[m_s].sum()) - q, 0.0))
    return lhs - rhs


def _endpoint_regret(problem: CalibrationProblem, s: float) -> float:
    """max(R0, R1): shortfall at the lowest state and overshoot at the highest.

    R0 - R1 is exactly the worst-case balance, so both come from the same terms.
    """
    s_lo = problem.support_bounds[0]
    m_s, m_lo = problem.select([s, s_lo])
    p_lo = problem.pi([s_lo])[0]
    u, d, eta = problem.utilities, problem.delta, problem.eta
    r0 = float(u[m_lo] @ (p_lo[m_lo] - eta * d[m_lo])) - float(u[m_s] @ (p_lo[m_s] - eta * d[m_s]))
    return max(r0, r0 - minimax_balance(problem, s))


def calibrate_minimax(problem: CalibrationProblem, grid_points: int = GRID_POINTS,
                      diagnostics: Optional[dict] = None) -> float:
    diag = diagnostics if diagnostics is not None else {}
    dist = problem.distribution
    if isinstance(dist, DiscreteStates):
        problem.select(dist.support)
        best = None
        for s in dist.support[::-1]:
            if minimax_balance(problem, float(s)) >= 0:
                best = float(s)
            else:
                break
        if best is None:
            diag["calibration"] = "worst-case balance negative at every support point; using support maximum"
            return float(dist.support[-1])
        return best

    grid = np.linspace(0.0, 1.0, grid_points)
    vals = np.array([minimax_balance(problem, s) for s in grid])
    if np.all(vals == 0):
        return float(grid[-1])
    for g in range(grid_points - 1, 0, -1):
        if vals[g] >= 0 and vals[g - 1] < 0:
            a, b = grid[g - 1], grid[g]
            while b - a > BISECT_TOL:
                mid = 0.5 * (a + b)
                if minimax_balance(problem, mid) >= 0:
                    b = mid
                else:
                    a = mid
            # the sign may flip by a jump at a selection breakpoint: keep the side
            # whose larger endpoint regret is smaller
            if _endpoint_regret(problem, a) < _endpoint_regret(problem, b):
                return float(a)
            return float(b)
    if np.all(vals >= 0):
        diag["calibration"] = "worst-case balance nonnegative everywhere; using the lowest state"
        return float(grid[0])
    diag["calibration"] = "no sign change of the worst-case balance; using support maximum"
    return float(grid[-1])
