import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stagematch.baselines import ScriptedStrategy, simple_cutoff_strategy
from stagematch.experiments import random_ranked_instance, four_arm_example
from stagematch.market import AgentProfile, Arm, DomainError, ranked_preferences, run_multistage_match
from stagematch.metrics import (IncompletePreferences, bootstrap_ci, da_payoffs, envy_band_count,
                                envy_band_width, justified_envy_report, replay_payoffs, uncertainty_level,
                                welfare_compare)
from stagematch.variational import AcceptanceSurface
from helpers import LinearLogOdds


def test_uncertainty_level_zero_delta():
    assert uncertainty_level(0.4, delta=0.0) == 0.0


def test_uncertainty_level_two_state_surface():
    surf = AcceptanceSurface(lambda s, v: s, [0.4, 0.6])
    assert uncertainty_level(surf, 0.6, 0.5) == pytest.approx(0.1 / 0.6)


def test_uncertainty_level_fitted_model_composition():
    m = LinearLogOdds(3.0, -1.0, 0.2)
    want = float(m.delta_hat([0.7])[0]) / float(m.predict(0.3, 0.7))
    assert uncertainty_level(m, 0.3, 0.7) == pytest.approx(want)


def test_uncertainty_level_zero_probability():
    with pytest.raises(DomainError):
        uncertainty_level(0.0, delta=0.1)


def _utilities(arms, n_agents):
    return np.array([[a.utility(i) for a in arms] for i in range(n_agents)])


def test_straightforward_four_arm_example_has_no_envy():
    arms, agents, rankings = four_arm_example()
    out = run_multistage_match(arms, agents, ranked_preferences(rankings), 2, 0)
    assert justified_envy_report(out, rankings, _utilities(arms, 3)).level == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_straightforward_play_has_no_envy(seed):
    rng = np.random.default_rng(seed)
    arms, agents, rankings = random_ranked_instance(rng, int(rng.integers(2, 9)), int(rng.integers(1, 5)))
    out = run_multistage_match(arms, agents, ranked_preferences(rankings), 3, seed)
    assert justified_envy_report(out, rankings, _utilities(arms, len(agents))).level == 0


def test_skipping_a_preferred_arm_creates_envy():
    # arm 0 likes agent 1 best, but agent 1 passes it over for the worse arm 1
    arms = [Arm(0, 2.0, (1.0, 1.0)), Arm(1, 1.0, (0.0, 0.0))]
    agents = [AgentProfile(0, 1, 5.0, simple_cutoff_strategy),
              AgentProfile(1, 1, 5.0, ScriptedStrategy({1: [1]}))]
    rankings = {0: [1, 0], 1: [1, 0]}
    out = run_multistage_match(arms, agents, ranked_preferences(rankings), 1, 0)
    rep = justified_envy_report(out, rankings, _utilities(arms, 2))
    assert rep.flags == {0: True, 1: False}
    assert rep.level == 1 and rep.witnesses[(0, 1)] == [1]


def test_envy_report_needs_preferences():
    arms, agents, rankings = four_arm_example()
    out = run_multistage_match(arms, agents, ranked_preferences(rankings), 2, 0)
    with pytest.raises(IncompletePreferences):
        justified_envy_report(out, {0: rankings[0]}, _utilities(arms, 3))


def test_band_width_grows_with_eta():
    widths = [envy_band_width(2.0, 1.9, e, 0.5) for e in (0.0, 0.05, 0.1, 0.15, 0.2)]
    assert all(a < b for a, b in zip(widths, widths[1:]))
    with pytest.raises(DomainError):
        envy_band_width(2.0, 1.9, 2.0, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.3))
def test_band_count_vanishes_without_deduction(seed, eta):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    u, p, d = rng.uniform(0.5, 3, n), rng.uniform(0.05, 1, n), 0.2 * rng.random(n)
    assert envy_band_count(u, p, d, 0.0, 3, 4.0) == 0
    assert envy_band_count(u, p, np.zeros(n), eta, 3, 4.0) == 0


def test_four_arm_da_versus_decentralized():
    arms, agents, rankings = four_arm_example()
    match, da = da_payoffs(arms, agents, rankings)
    dec = run_multistage_match(arms, agents, ranked_preferences(rankings), 2, 0).payoffs
    assert match == {0: 2, 1: 1, 2: 0, 3: 0}
    assert da == pytest.approx({0: 3.2, 1: 2.5, 2: 2.5})
    assert dec == pytest.approx({0: 5.5, 1: 1.5, 2: 3.0})
    assert dec[0] > da[0] and dec[2] > da[2]


def test_four_arm_second_agent_gains_from_second_stage():
    arms, agents, rankings = four_arm_example()
    model = ranked_preferences(rankings)
    assert replay_payoffs(arms, agents, model, 2, 1) == (0.0, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_replay_never_hurts(seed, stages):
    rng = np.random.default_rng(seed)
    arms, agents, rankings = random_ranked_instance(rng, int(rng.integers(1, 9)), int(rng.integers(1, 5)))
    model = ranked_preferences(rankings)
    for p in agents:
        single, multi = replay_payoffs(arms, agents, model, stages, p.id, seed)
        assert multi >= single


def test_welfare_compare_structure():
    def inst(seed):
        arms, agents, rankings = random_ranked_instance(np.random.default_rng(seed), 5, 3)
        return arms, agents, ranked_preferences(rankings), rankings

    rows, means = welfare_compare(inst, ["decentralized", "da"], [1, 2], reps=4, seed=1)
    assert len(rows) == 4 * 3 * 3
    assert set(means) == {(m, k, i) for m, k in (("decentralized", 1), ("decentralized", 2), ("da", None))
                          for i in range(3)}
    with pytest.raises(ValueError):
        welfare_compare(inst, ["lottery"], [1], reps=1)


def test_bootstrap_ci():
    assert bootstrap_ci(np.full(10, 2.5)) == (2.5, 2.5)
    x = np.random.default_rng(0).normal(1.0, 1.0, 400)
    lo, hi = bootstrap_ci(x)
    assert lo < x.mean() < hi and hi - lo < 0.3
    assert bootstrap_ci(x) == bootstrap_ci(x)
