"""Acceptance-probability learning: penalized kernel logistic regression over
(state, score) with a product Gaussian kernel, the lower uncertainty bound, and
a boundary-corrected kernel density for the state distribution."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit, ndtr

STATE_GRID_POINTS = 101
MAX_ITER = 100
TOL = 1e-8


class ConvergenceError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class SeparableDataError(ValueError):
    pass


@dataclass(frozen=True)
class HistoryRecord:
    t: int
    k: int
    state: float
    score: float
    fit: float
    accepted: int

    def __post_init__(self):
        if self.accepted not in (0, 1):
            raise ValueError(f"accepted must be 0/1, got {self.accepted}")
        if not 0.0 <= self.state <= 1.0:
            raise ValueError(f"state {self.state} outside [0, 1]")


def records_to_arrays(records: Sequence[HistoryRecord]):
    s = np.array([r.state for r in records], float)
    v = np.array([r.score for r in records], float)
    y = np.array([r.accepted for r in records], float)
    t = np.array([r.t for r in records])
    return s, v, y, t


def median_bandwidth(x, max_points: int = 400) -> float:
    """Median of nonzero pairwise distances; 1.0 when the sample has no spread."""
    x = np.unique(np.asarray(x, float))
    if x.size < 2:
        return 1.0
    if x.size > max_points:
        x = x[np.linspace(0, x.size - 1, max_points).round().astype(int)]
    d = np.abs(x[:, None] - x[None, :])[np.triu_indices(x.size, 1)]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gauss(a, b, h):
    return np.exp(-0.5 * ((np.asarray(a, float)[:, None] - np.asarray(b, float)[None, :]) / h) ** 2)


@dataclass
class FittedAcceptanceModel:
    h_s: float
    h_v: float
    centers_s: np.ndarray
    centers_v: np.ndarray
    alpha: np.ndarray
    lam: float
    v_min: float
    v_max: float
    state_grid: np.ndarray = field(default_factory=lambda: np.linspace(0, 1, STATE_GRID_POINTS))
    objective_trace: list = field(default_factory=list)

    def log_odds(self, state, score):
        """f(s, v) for broadcastable arrays of states and scores."""
        s, v = np.broadcast_arrays(np.asarray(state, float), np.asarray(score, float))
        ks = gauss(s.ravel(), self.centers_s, self.h_s)
        kv = gauss(v.ravel(), self.centers_v, self.h_v)
        return ((ks * kv) @ self.alpha).reshape(s.shape)

    def log_odds_grid(self, states, scores):
        """f on the outer product states x scores, shape (len(states), len(scores))."""
        ks = gauss(states, self.centers_s, self.h_s)
        kv = gauss(scores, self.centers_v, self.h_v)
        return (ks * self.alpha) @ kv.T

    def predict(self, state, score):
        return expit(self.log_odds(state, score))

    def delta_hat(self, scores, grid=None):
        grid = self.state_grid if grid is None else np.asarray(grid, float)
        p = expit(self.log_odds_grid(grid, np.atleast_1d(np.asarray(scores, float))))
        return 0.5 * (p.max(0) - p.min(0))

    def in_range(self, scores):
        scores = np.asarray(scores, float)
        return (scores >= self.v_min) & (scores <= self.v_max)

    def delta_table(self, points: int = 101):
        grid = np.linspace(self.v_min, self.v_max, points)
        return grid, self.delta_hat(grid)


def penalized_objective(K_xc, K_cc, alpha, y, w, lam):
    f = K_xc @ alpha
    nll = np.sum(w * (np.logaddexp(0.0, f) - y * f))
    return float(nll + lam * alpha @ K_cc @ alpha)


def _period_weights(t, n):
    if t is None:
        return np.ones(n)
    _, inv, counts = np.unique(t, return_inverse=True, return_counts=True)
    return 1.0 / counts[inv]


def _separable(K, y):
    if y.min() == y.max():
        return True
    return np.linalg.matrix_rank(K) == K.shape[0]


def fit_kernel_logistic(
    s, v, y, lam: float, t=None, h_s: Optional[float] = None, h_v: Optional[float] = None,
    max_centers: Optional[int] = None, seed: int = 0, max_iter: int = MAX_ITER, tol: float = TOL,
) -> FittedAcceptanceModel:
    """Newton/IRLS on the kernel coefficients of the penalized log-likelihood.

    Centers are the distinct training points; beyond `max_centers` of them a
    seeded random subset is used (subset of regressors).
    """
    s, v, y = (np.asarray(a, float) for a in (s, v, y))
    n = y.size
    if n == 0:
        raise ValueError("no training records")
    h_s = median_bandwidth(s) if h_s is None else float(h_s)
    h_v = median_bandwidth(v) if h_v is None else float(h_v)
    w = _period_weights(t, n)

    # centers: distinct training points, subsampled when there are too many
    pts = np.unique(np.column_stack([s, v]), axis=0)
    if max_centers is not None and pts.shape[0] > max_centers:
        pts = pts[np.sort(np.random.default_rng(seed).choice(pts.shape[0], max_centers, replace=False))]
    cs, cv = pts[:, 0], pts[:, 1]
    K_xc = gauss(s, cs, h_s) * gauss(v, cv, h_v)
    K_cc = gauss(cs, cs, h_s) * gauss(cv, cv, h_v)

    if lam < 0:
        raise SeparableDataError("negative regularization makes the objective unbounded")
    if lam == 0 and _separable(K_xc, y):
        raise SeparableDataError("data are separable and lambda = 0: objective has no minimizer")

    # whiten the expansion: alpha = R beta with R^T K_cc R = I on the numerical range of K_cc,
    # so the penalty becomes lam*|beta|^2 and Newton steps stay well conditioned
    ev, U = linalg.eigh(K_cc)
    keep = ev > 1e-10 * ev.max()
    R = U[:, keep] / np.sqrt(ev[keep])
    Phi = K_xc @ R
    r = R.shape[1]
    beta = np.zeros(r)

    def objective(b):
        f = Phi @ b
        return float(np.sum(w * (np.logaddexp(0.0, f) - y * f)) + lam * b @ b)

    obj = objective(beta)
    trace = [obj]
    for it in range(max_iter):
        p = expit(Phi @ beta)
        g = Phi.T @ (w * (p - y)) + 2 * lam * beta
        H = (Phi.T * (w * p * (1 - p))) @ Phi + 2 * lam * np.eye(r)
        try:
            step = linalg.solve(H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t_step = 1.0
        while True:
            cand = beta - t_step * step
            new = objective(cand)
            if new <= obj or t_step < 1e-10:
                break
            t_step *= 0.5
        if new > obj:
            new, cand = obj, beta
        drop = obj - new
        beta, obj = cand, new
        trace.append(obj)
        if drop < tol:
            break
    else:
        last = FittedAcceptanceModel(h_s, h_v, cs, cv, R @ beta, lam, float(v.min()), float(v.max()),
                                     objective_trace=trace)
        raise ConvergenceError(f"no convergence after {max_iter} iterations", last)
    alpha = R @ beta
    return FittedAcceptanceModel(h_s, h_v, cs, cv, alpha, lam, float(v.min()), float(v.max()),
                                 objective_trace=trace)


def heldout_loglik(model: FittedAcceptanceModel, s, v, y) -> float:
    f = model.log_odds(s, v)
    return float(np.mean(y * log_expit(f) + (1 - y) * log_expit(-f)))


def select_lambda(s, v, y, t=None, grid=(1e-3, 1e-2, 1e-1, 1.0), holdout: float = 0.25,
                  seed: int = 0, **fit_kw):
    """Pick lambda by held-out log-likelihood on a seeded random split."""
    s, v, y = (np.asarray(a, float) for a in (s, v, y))
    n = y.size
    if n < 8 or len(grid) == 1:
        return float(grid[len(grid) // 2]), {}
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cut = max(1, int(round(holdout * n)))
    te, tr = perm[:cut], perm[cut:]
    tt = None if t is None else np.asarray(t)[tr]
    scores = {}
    for lam in grid:
        try:
            mdl = fit_kernel_logistic(s[tr], v[tr], y[tr], lam, t=tt, seed=seed, **fit_kw)
        except (ConvergenceError, SeparableDataError):
            continue
        scores[lam] = heldout_loglik(mdl, s[te], v[te], y[te])
    if not scores:
        return float(grid[-1]), scores
    best = max(scores, key=lambda k: (scores[k], k))
    return float(best), scores


def fit_acceptance_model(records: Sequence[HistoryRecord], lam: Optional[float] = None,
                         lam_grid=(1e-3, 1e-2, 1e-1, 1.0), seed: int = 0, **fit_kw):
    s, v, y, t = records_to_arrays(records)
    if lam is None:
        lam, _ = select_lambda(s, v, y, t, grid=lam_grid, seed=seed, **fit_kw)
    return fit_kernel_logistic(s, v, y, lam, t=t, seed=seed, **fit_kw)


def predict_pi(model: FittedAcceptanceModel, state, score):
    return model.predict(state, score)


def estimate_delta_hat(model: FittedAcceptanceModel, score, grid=None):
    out = model.delta_hat(score, grid)
    return float(out[0]) if np.ndim(score) == 0 else out


def lower_uncertainty_bound(model: FittedAcceptanceModel, state, score, eta: float, diagnostics=None):
    """pi_hat - eta * delta_hat on trained scores, 1 outside the trained score range.

    Negative values are clamped to 0 (recorded in `diagnostics` when given).
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    scalar = np.ndim(state) == 0 and np.ndim(score) == 0
    s, v = np.broadcast_arrays(np.asarray(state, float), np.asarray(score, float))
    raw = model.predict(s, v) - eta * model.delta_hat(v.ravel()).reshape(v.shape)
    if np.any(raw < 0) and diagnostics is not None:
        diagnostics["clamped_lower_bound"] = int(np.sum(raw < 0))
    out = np.where(model.in_range(v), np.maximum(raw, 0.0), 1.0)
    return float(out) if scalar else out


@dataclass
class StateDensity:
    """Gaussian kernel density truncated to [0, 1] and renormalized."""

    states: np.ndarray
    bandwidth: float

    def _raw_cdf(self, x):
        x = np.asarray(x, float)
        return ndtr((x[..., None] - self.states) / self.bandwidth).mean(-1)

    @property
    def _mass(self):
        return self._raw_cdf(1.0) - self._raw_cdf(0.0)

    def cdf(self, x):
        x = np.clip(np.asarray(x, float), 0.0, 1.0)
        return (self._raw_cdf(x) - self._raw_cdf(0.0)) / self._mass

    def pdf(self, x):
        x = np.asarray(x, float)
        z = (x[..., None] - self.states) / self.bandwidth
        d = np.exp(-0.5 * z ** 2).mean(-1) / (self.bandwidth * np.sqrt(2 * np.pi))
        return np.where((x >= 0) & (x <= 1), d / self._mass, 0.0)

    def cell_weights(self, grid):
        """Probability mass of the cells around each grid point (sums to 1)."""
        grid = np.asarray(grid, float)
        edges = np.concatenate([[0.0], 0.5 * (grid[1:] + grid[:-1]), [1.0]])
        return np.diff(self.cdf(edges))

    def sample(self, size, rng):
        out = np.empty(0)
        while out.size < size:
            draw = rng.choice(self.states, size) + self.bandwidth * rng.standard_normal(size)
            out = np.concatenate([out, draw[(draw >= 0) & (draw <= 1)]])
        return out[:size]


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, float)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def fit_state_density(states, bandwidth: Optional[float] = None, floor: float = 0.05) -> StateDensity:
    states = np.asarray(states, float)
    if states.size == 0:
        raise ValueError("need at least one observed state")
    if np.any((states < 0) | (states > 1)):
        raise ValueError("states must lie in [0, 1]")
    h = silverman_bandwidth(states) if bandwidth is None else float(bandwidth)
    if h <= 0:
        # no spread to estimate from: fall back to a fixed floor
        h = floor
    return StateDensity(states, h)
