import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stagematch.baselines import ScriptedStrategy
from stagematch.io import (InstanceFormatError, load_instance, model_from_json, model_to_json, parse_instance,
                           read_da_preferences, read_history, write_da_preferences, write_history)
from stagematch.learning import HistoryRecord, fit_kernel_logistic
from stagematch.lubcdm import LubCdmStrategy
from stagematch.market import run_multistage_match

from helpers import FOUR_ARM_YAML


def test_parse_four_arm_and_run():
    inst = parse_instance(FOUR_ARM_YAML)
    out = run_multistage_match(inst.arms, inst.agents, inst.preference_model, inst.stages, inst.seed)
    assert out.pairs() == [(0, 0), (1, 0), (2, 2), (3, 1)]


def test_json_documents_parse_too():
    import json
    import yaml
    inst = parse_instance(json.dumps(yaml.safe_load(FOUR_ARM_YAML)))
    assert len(inst.arms) == 4 and inst.stages == 2


def test_scripted_strategy_from_document():
    text = FOUR_ARM_YAML.replace("{id: 1, quota: 1, penalty: 5}",
                                 "{id: 1, quota: 1, penalty: 5, strategy: {name: scripted, script: {1: [1]}}}")
    inst = parse_instance(text)
    assert isinstance(inst.agents[1].strategy, ScriptedStrategy)
    out = run_multistage_match(inst.arms, inst.agents, inst.preference_model, 2, 0)
    assert out.pairs() == [(0, 0), (1, 1), (2, 2), (3, 0)]


@pytest.mark.parametrize("old,new,line,field", [
    ("score: 1.0", "score: -1.0", 7, "arms[3]"),
    ("fits: [0.2, 0.5, 0.8]", "fits: [0.2, 0.5]", 7, "arms[3].fits"),
    ("quota: 2", "quota: two", 9, "agents[0].quota"),
    ("kind: ranked", "kind: cardinal", 13, "preferences.kind"),
    ("stages: 2", "stages: 2\nrounds: 3", 2, "rounds"),
    ("{0: [2, 0, 1], 1", "{1", 14, "preferences.rankings"),
])
def test_errors_carry_line_and_field(old, new, line, field):
    with pytest.raises(InstanceFormatError) as exc:
        parse_instance(FOUR_ARM_YAML.replace(old, new))
    assert exc.value.line == line
    assert exc.value.field == field
    assert f"line {line}" in str(exc.value)


def test_malformed_yaml_reports_line():
    with pytest.raises(InstanceFormatError) as exc:
        parse_instance("stages: 2\narms: [\n")
    assert exc.value.line is not None


def test_empty_document():
    with pytest.raises(InstanceFormatError):
        parse_instance("")


def test_lub_cdm_agent_with_history_file(tmp_path):
    recs = [HistoryRecord(t, k, s, v, 0.0, int(v < 2 * s))
            for t, s in enumerate([0.3, 0.7] * 10) for k in (1, 2) for v in (1.0, 1.5, 2.0)]
    write_history(tmp_path / "h.csv", recs)
    text = FOUR_ARM_YAML.replace(
        "{id: 0, quota: 2, penalty: 5}",
        "{id: 0, quota: 2, penalty: 5, eta_schedule: [0.1, 0.0],"
        " strategy: {name: lub_cdm, history: h.csv, lam: 0.1}}")
    (tmp_path / "inst.yaml").write_text(text)
    inst = load_instance(tmp_path / "inst.yaml")
    strat = inst.agents[0].strategy
    assert isinstance(strat, LubCdmStrategy) and set(strat.models) == {1, 2}
    out = run_multistage_match(inst.arms, inst.agents, inst.preference_model, 2, 0)
    assert out.stages_run <= 2


def test_utility_preferences_document():
    text = FOUR_ARM_YAML.replace(
        "  kind: ranked\n  rankings: {0: [2, 0, 1], 1: [1, 0, 2], 2: [0, 2, 1], 3: [0, 1, 2]}\n",
        "  kind: utility\n  values: [[1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]\n  reservation: 0.5\n")
    inst = parse_instance(text)
    assert inst.preference_model.choose(0, (0, 1, 2), None) == 2


# ---------------------------------------------------------------- history csv

record = st.builds(HistoryRecord, st.integers(0, 10 ** 6), st.integers(1, 5), st.floats(0, 1),
                   st.floats(0, 100, allow_nan=False), st.floats(0, 100, allow_nan=False), st.integers(0, 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(record, max_size=20))
def test_history_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("h") / "h.csv"
    write_history(path, recs)
    assert read_history(path) == recs


@pytest.mark.parametrize("body,line,field", [
    ("t,k,state,score,fit,accepted\n0,1,0.5,1.0,0.0,yes\n", 2, "accepted"),
    ("t,k,state,score,fit,accepted\n0,1,0.5,1.0\n", 2, None),
    ("time,k,state,score,fit,accepted\n", 1, "header"),
    ("t,k,state,score,fit,accepted\n0,1,0.5,1.0,0.0,1\n0,1,1.5,1.0,0.0,1\n", 3, None),
])
def test_history_errors(tmp_path, body, line, field):
    (tmp_path / "h.csv").write_text(body)
    with pytest.raises(InstanceFormatError) as exc:
        read_history(tmp_path / "h.csv")
    assert exc.value.line == line and exc.value.field == field


# ---------------------------------------------------------------- model and DA files

def test_model_json_round_trip_is_exact():
    rng = np.random.default_rng(0)
    s, v = rng.random(40), rng.random(40)
    m = fit_kernel_logistic(s, v, (rng.random(40) < s).astype(float), 0.1)
    back = model_from_json(model_to_json(m))
    probe_s, probe_v = rng.random(10), rng.random(10)
    assert np.array_equal(back.predict(probe_s, probe_v), m.predict(probe_s, probe_v))
    assert back.objective_trace == m.objective_trace


def test_model_json_missing_field():
    with pytest.raises(InstanceFormatError):
        model_from_json('{"h_s": 1.0}')


def test_da_file_round_trip(tmp_path):
    agent_prefs = {0: [2, 0, 1], 1: [1]}
    quotas = {0: 2, 1: 1}
    arm_prefs = {0: [0, 1], 1: [1, 0], 2: [0]}
    write_da_preferences(tmp_path / "da.csv", agent_prefs, quotas, arm_prefs)
    assert read_da_preferences(tmp_path / "da.csv") == (agent_prefs, quotas, arm_prefs)


def test_da_file_bad_side(tmp_path):
    (tmp_path / "da.csv").write_text("side,id,quota,preferences\ncollege,0,1,0 1\n")
    with pytest.raises(InstanceFormatError) as exc:
        read_da_preferences(tmp_path / "da.csv")
    assert exc.value.line == 2 and exc.value.field == "side"
