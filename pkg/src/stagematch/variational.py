"""Uncertainty-regularized loss, the greedy rate cutoff and its exact-search oracle.

The scalar routines only use +, -, *, / and comparisons, so they run unchanged
on floats or on fractions.Fraction for exact checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_STATE_GRID = np.linspace(0.0, 1.0, 101)


class ConfigurationError(ValueError):
    pass


class InstanceTooLarge(ValueError):
    pass


@dataclass
class AcceptanceSurface:
    """pi_fn(state, score) -> probability, increasing in state."""

    pi_fn: Callable[[float, float], float]
    state_grid: Sequence = field(default_factory=lambda: DEFAULT_STATE_GRID)

    def pi(self, state, score):
        return self.pi_fn(state, score)

    def delta(self, score):
        return uncertainty_measure(self, score)

    def check_monotone(self, scores, strict: bool = True) -> bool:
        for v in scores:
            vals = [self.pi_fn(s, v) for s in sorted(self.state_grid)]
            steps = [b - a for a, b in zip(vals, vals[1:])]
            if any(d < 0 for d in steps) or (strict and any(d == 0 for d in steps)):
                return False
        return True


@dataclass(frozen=True)
class Candidate:
    """One arm as seen by the cutoff rule.

    utility: v + e; pi: acceptance probability used for quota accounting;
    lower: the uncertainty-deducted probability (pi - eta*delta, or the
    lower uncertainty bound when learned).
    """

    id: int
    utility: object
    pi: object
    lower: object

    @property
    def value(self):
        # variational expected utility
        return self.utility * self.lower

    def rate(self):
        return self.utility * self.lower / self.pi


@dataclass
class CutoffResult:
    b_hat: object
    used_plus_branch: bool
    selected: frozenset
    boundary: frozenset
    b_minus_set: frozenset
    ue_dagger: object
    excluded: dict = field(default_factory=dict)
    exact: bool = False
    diagnostics: dict = field(default_factory=dict)


def uncertainty_measure(surface: AcceptanceSurface, score) -> float:
    grid = list(surface.state_grid)
    if not grid:
        raise ConfigurationError("empty state grid")
    vals = [surface.pi_fn(s, score) for s in grid]
    return (max(vals) - min(vals)) / 2


def candidates_from_surface(arms, surface: AcceptanceSurface, state, eta, deltas=None):
    """arms: iterable of (id, utility, score). Returns Candidate list."""
    out = []
    for i, (aid, u, v) in enumerate(arms):
        p = surface.pi_fn(state, v)
        d = deltas[i] if deltas is not None else uncertainty_measure(surface, v)
        out.append(Candidate(aid, u, p, p - eta * d))
    return out


def variational_loss_terms(cands: Sequence[Candidate], prior_accepts, quota, penalty):
    gain = sum((c.value for c in cands), 0)
    load = sum((c.pi for c in cands), 0) + prior_accepts - quota
    return -gain + penalty * max(load, 0)


def variational_loss(pulled, surface: AcceptanceSurface, state, eta, prior_accepts, quota, penalty):
    """pulled: iterable of (id, utility, score)."""
    if eta < 0:
        raise ConfigurationError("eta must be nonnegative")
    return variational_loss_terms(candidates_from_surface(pulled, surface, state, eta),
                                  prior_accepts, quota, penalty)


def rate(utility, pi, delta, eta):
    """Variational expected utility per unit acceptance probability."""
    if pi <= 0:
        raise ZeroDivisionError("arm with zero acceptance probability is unrankable")
    return utility * (pi - eta * delta) / pi


def _rank(cands):
    usable, excluded = [], {}
    for c in cands:
        if c.pi <= 0:
            excluded[c.id] = "zero acceptance probability"
        elif c.lower <= 0:
            excluded[c.id] = "uncertainty deduction exhausts acceptance probability"
        else:
            usable.append(c)
    usable.sort(key=lambda c: (-c.rate(), -c.utility, c.id))
    return usable, excluded


def ue_dagger(b_minus: Sequence[Candidate], remaining_quota, diagnostics: Optional[dict] = None):
    """Worst-case slack of the cutoff rule over the exact optimum."""
    if not b_minus:
        if diagnostics is not None:
            diagnostics["ue_dagger"] = "empty B-minus set; slack reported as 0"
        return 0
    lowest = min(c.utility * c.lower / c.pi for c in b_minus)
    return lowest * (remaining_quota - sum((c.pi for c in b_minus), 0))


def greedy_cutoff(cands: Sequence[Candidate], remaining_quota, penalty) -> CutoffResult:
    """Rank by rate, then pick the cutoff where expected acceptances meet the quota."""
    usable, excluded = _rank(cands)
    diag = {}
    if remaining_quota <= 0 or not usable:
        return CutoffResult(None, False, frozenset(), frozenset(), frozenset(), 0, excluded, False, diag)

    # group arms sharing a rate: each group is one breakpoint of the step function
    groups = []
    for c in usable:
        r = c.rate()
        if groups and groups[-1][0] == r:
            groups[-1][1].append(c)
        else:
            groups.append((r, [c]))

    cum = 0
    levels = []  # (b, cumulative Pi(b), index of last group)
    for gi, (r, members) in enumerate(groups):
        cum = cum + sum((c.pi for c in members), 0)
        levels.append((r, cum, gi))

    def upto(gi):
        return [c for _, members in groups[: gi + 1] for c in members]

    for r, tot, gi in levels:
        if tot == remaining_quota:
            chosen = upto(gi)
            ids = frozenset(c.id for c in chosen)
            return CutoffResult(r, False, ids, frozenset(), ids, 0, excluded, True, diag)

    plus = next(((r, gi) for r, tot, gi in levels if tot > remaining_quota), None)
    minus_levels = [(r, gi) for r, tot, gi in levels if tot < remaining_quota]
    minus = minus_levels[-1] if minus_levels else None

    b_minus = upto(minus[1]) if minus is not None else []
    slack = ue_dagger(b_minus, remaining_quota, diag)
    bm_ids = frozenset(c.id for c in b_minus)
    if plus is None:
        # every positive-rate arm fits under the quota
        b = minus[0] if minus else None
        return CutoffResult(b, False, bm_ids, frozenset(), bm_ids, slack, excluded, False, diag)

    b_plus = upto(plus[1])
    boundary = [c for c in b_plus if c.id not in bm_ids]
    lhs = sum((c.value for c in boundary), 0)
    rhs = penalty * sum((c.pi for c in b_plus), 0) - penalty * remaining_quota
    bd_ids = frozenset(c.id for c in boundary)
    if lhs >= rhs:
        return CutoffResult(plus[0], True, frozenset(c.id for c in b_plus), bd_ids, bm_ids, slack, excluded, False, diag)
    b = minus[0] if minus else None
    return CutoffResult(b, False, bm_ids, bd_ids, bm_ids, slack, excluded, False, diag)


def greedy_select(available, surface: AcceptanceSurface, state, eta, remaining_quota, penalty,
                  stage: Optional[int] = None, stages: Optional[int] = None, deltas=None) -> CutoffResult:
    """available: iterable of (id, utility, score)."""
    if eta < 0:
        raise ConfigurationError("eta must be nonnegative")
    if stage is not None and stages is not None and stage == stages and eta != 0:
        raise ConfigurationError("eta must be 0 at the last stage")
    cands = candidates_from_surface(available, surface, state, eta, deltas)
    return greedy_cutoff(cands, remaining_quota, penalty)


def brute_force_optimal(cands: Sequence[Candidate], remaining_quota, penalty, max_arms: int = 20):
    """Exhaustive minimum of the loss over all subsets (lexicographically first on ties).

    Subsets are visited in Gray-code order so each step updates running sums
    by one arm; the minimizing subset is returned as a sorted id tuple.
    """
    n = len(cands)
    if n > max_arms:
        raise InstanceTooLarge(f"{n} arms exceeds the exhaustive-search limit of {max_arms}")
    cands = sorted(cands, key=lambda c: c.id)
    ids = [c.id for c in cands]
    values = [c.value for c in cands]
    pis = [c.pi for c in cands]

    def loss(g, p):
        return -g + penalty * max(p - remaining_quota, 0)

    zero = 0 * (values[0] if values else 0)
    gain, mass = zero, zero
    inside = [False] * n
    best_loss, best_set = loss(gain, mass), ()
    for step in range(1, 1 << n):
        bit = (step & -step).bit_length() - 1
        inside[bit] = not inside[bit]
        if inside[bit]:
            gain, mass = gain + values[bit], mass + pis[bit]
        else:
            gain, mass = gain - values[bit], mass - pis[bit]
        cur = loss(gain, mass)
        if cur < best_loss:
            best_loss, best_set = cur, tuple(ids[i] for i in range(n) if inside[i])
        elif cur == best_loss:
            here = tuple(ids[i] for i in range(n) if inside[i])
            if here < best_set:
                best_set = here
    return best_set, best_loss


def loss_of(cands: Sequence[Candidate], chosen, remaining_quota, penalty):
    """Loss of a chosen id set, with the quota folded into remaining_quota."""
    sel = [c for c in cands if c.id in set(chosen)]
    return variational_loss_terms(sel, 0, remaining_quota, penalty)


def greedy_masks(utility, pi, lower, remaining_quota, penalty):
    """Vectorized cutoff rule for many states at once.

    utility: (n,); pi, lower: (G, n). Returns a (G, n) boolean selection.
    Rows containing rate ties fall back to the scalar rule so tie groups are
    handled exactly as in greedy_cutoff.
    """
    utility = np.asarray(utility, float)
    pi = np.atleast_2d(np.asarray(pi, float))
    lower = np.atleast_2d(np.asarray(lower, float))
    G, n = pi.shape
    out = np.zeros((G, n), dtype=bool)
    if remaining_quota <= 0 or n == 0:
        return out
    usable = (pi > 0) & (lower > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(usable, utility * lower / np.where(pi > 0, pi, 1.0), -np.inf)
    ids = np.broadcast_to(np.arange(n), (G, n))
    uu = np.broadcast_to(utility, (G, n))
    order = np.lexsort((ids, -uu, -rates), axis=-1)
    r_s = np.take_along_axis(rates, order, 1)
    ok_s = np.isfinite(r_s)
    p_s = np.where(ok_s, np.take_along_axis(pi, order, 1), 0.0)
    val_s = np.where(ok_s, np.take_along_axis(lower, order, 1) * np.take_along_axis(uu, order, 1), 0.0)
    cum = np.cumsum(p_s, axis=1)
    n_ok = ok_s.sum(1)

    tie = np.zeros(G, dtype=bool)
    if n > 1:
        tie = ((r_s[:, 1:] == r_s[:, :-1]) & ok_s[:, 1:]).any(1)

    over = (cum > remaining_quota) & ok_s
    exact = (cum == remaining_quota) & ok_s
    has_plus = over.any(1)
    plus = np.where(has_plus, over.argmax(1), n_ok)
    take = n_ok.copy()
    rows = np.nonzero(has_plus)[0]
    if rows.size:
        pidx = plus[rows]
        lhs = val_s[rows, pidx]
        rhs = penalty * cum[rows, pidx] - penalty * remaining_quota
        take[rows] = np.where(lhs >= rhs, pidx + 1, pidx)
    ex_rows = exact.any(1)
    take[ex_rows] = exact[ex_rows].argmax(1) + 1
    pos = np.arange(n)
    sel_sorted = pos[None, :] < take[:, None]
    np.put_along_axis(out, order, sel_sorted, 1)

    for g in np.nonzero(tie)[0]:
        cands = [Candidate(j, utility[j], pi[g, j], lower[g, j]) for j in range(n)]
        res = greedy_cutoff(cands, remaining_quota, penalty)
        out[g] = False
        out[g, list(res.selected)] = True
    return out
