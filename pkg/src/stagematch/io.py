"""Readers and writers for market instances, histories, fitted models and DA
preference files. Parse errors carry the line number and field name."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .baselines import ScriptedStrategy, simple_cutoff_strategy
from .learning import FittedAcceptanceModel, HistoryRecord
from .market import AgentProfile, Arm, ranked_preferences, utility_preferences

HISTORY_COLUMNS = ("t", "k", "state", "score", "fit", "accepted")
DA_COLUMNS = ("side", "id", "quota", "preferences")


class InstanceFormatError(ValueError):
    def __init__(self, msg, line: Optional[int] = None, field: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.line, self.field = line, field


# ---------------------------------------------------------------- located YAML

class _Node:
    """A parsed value that remembers the line it came from."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value, self.line = value, line


def _convert(node):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            out[_scalar(k)] = _convert(v)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_convert(v) for v in node.value], line)
    return _Node(_scalar(node), line)


def _scalar(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def load_located(text: str):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise InstanceFormatError(str(getattr(e, "problem", e)), None if mark is None else mark.line + 1) from None
    if node is None:
        raise InstanceFormatError("empty document", 1)
    return _convert(node)


def _plain(n):
    if isinstance(n.value, dict):
        return {k: _plain(v) for k, v in n.value.items()}
    if isinstance(n.value, list):
        return [_plain(v) for v in n.value]
    return n.value


def _get(node: _Node, key: str, path: str, kind=None, default: Any = ...):
    if not isinstance(node.value, dict):
        raise InstanceFormatError("expected a mapping", node.line, path)
    if key not in node.value:
        if default is ...:
            raise InstanceFormatError("missing required field", node.line, f"{path}.{key}" if path else key)
        return default
    child = node.value[key]
    if kind is not None:
        _check(child, kind, f"{path}.{key}" if path else key)
    return child


def _check(node: _Node, kind, path):
    v = node.value
    ok = {
        "int": isinstance(v, int) and not isinstance(v, bool),
        "num": isinstance(v, (int, float)) and not isinstance(v, bool),
        "list": isinstance(v, list),
        "map": isinstance(v, dict),
        "str": isinstance(v, str),
    }[kind]
    if not ok:
        raise InstanceFormatError(f"expected {kind}, got {type(v).__name__}", node.line, path)


def _reject_unknown(node: _Node, allowed, path):
    for k, v in node.value.items():
        if k not in allowed:
            raise InstanceFormatError("unknown field", v.line, f"{path}.{k}" if path else str(k))


# ---------------------------------------------------------------- instances

@dataclass
class MarketInstance:
    arms: list
    agents: list
    preference_model: Any
    stages: int
    seed: int
    arm_rankings: Optional[dict] = None


def _strategy(node: _Node, path: str):
    _check(node, "map", path)
    name = _get(node, "name", path, "str").value
    if name == "simple":
        _reject_unknown(node, {"name"}, path)
        return simple_cutoff_strategy
    if name == "scripted":
        _reject_unknown(node, {"name", "script"}, path)
        script = _plain(_get(node, "script", path, "map"))
        return ScriptedStrategy({int(k): [int(a) for a in v] for k, v in script.items()})
    if name == "lub_cdm":
        _reject_unknown(node, {"name", "history", "eta_schedule", "lam", "calibration"}, path)
        return ("lub_cdm", {k: _plain(v) for k, v in node.value.items() if k != "name"})
    raise InstanceFormatError(f"unknown strategy {name!r}", node.value["name"].line, f"{path}.name")


def parse_instance(text: str, base_dir: Optional[Path] = None) -> MarketInstance:
    """Parse a YAML or JSON instance document."""
    root = load_located(text)
    _check(root, "map", "<root>")
    _reject_unknown(root, {"arms", "agents", "preferences", "stages", "seed"}, "")
    stages = _get(root, "stages", "", "int").value
    seed = _get(root, "seed", "", "int", _Node(0, root.line)).value
    agents_n = _get(root, "agents", "", "list")
    arms_n = _get(root, "arms", "", "list")
    m = len(agents_n.value)

    arms = []
    for i, an in enumerate(arms_n.value):
        path = f"arms[{i}]"
        _check(an, "map", path)
        _reject_unknown(an, {"id", "score", "fits"}, path)
        aid = _get(an, "id", path, "int").value
        score = _get(an, "score", path, "num").value
        fits_n = _get(an, "fits", path, "list")
        for fi, f in enumerate(fits_n.value):
            _check(f, "num", f"{path}.fits[{fi}]")
        fits = tuple(f.value for f in fits_n.value)
        if len(fits) != m:
            raise InstanceFormatError(f"{len(fits)} fits for {m} agents", fits_n.line, f"{path}.fits")
        try:
            arms.append(Arm(aid, float(score), tuple(float(x) for x in fits)))
        except ValueError as e:
            raise InstanceFormatError(str(e), an.line, path) from None

    agents = []
    deferred = []
    for i, pn in enumerate(agents_n.value):
        path = f"agents[{i}]"
        _check(pn, "map", path)
        _reject_unknown(pn, {"id", "quota", "penalty", "eta_schedule", "strategy", "availability"}, path)
        pid = _get(pn, "id", path, "int").value
        quota = _get(pn, "quota", path, "int").value
        penalty = _get(pn, "penalty", path, "num").value
        eta = [e.value for e in _get(pn, "eta_schedule", path, "list", _Node([_Node(0.0, pn.line)], pn.line)).value]
        strat = _strategy(_get(pn, "strategy", path, "map", _Node({"name": _Node("simple", pn.line)}, pn.line)),
                          f"{path}.strategy")
        avail = _get(pn, "availability", path, "list", None)
        avail = None if avail is None else frozenset(int(a.value) for a in avail.value)
        try:
            prof = AgentProfile(pid, quota, float(penalty), simple_cutoff_strategy, tuple(eta), avail)
        except ValueError as e:
            raise InstanceFormatError(str(e), pn.line, path) from None
        if isinstance(strat, tuple):
            deferred.append((prof, strat[1], pn.line, path))
        else:
            prof.strategy = strat
        agents.append(prof)

    for prof, params, line, path in deferred:
        from .lubcdm import LubCdmConfig, LubCdmStrategy
        hist = []
        if "history" in params:
            hp = Path(params["history"])
            if base_dir is not None and not hp.is_absolute():
                hp = base_dir / hp
            hist = read_history(hp)
        cfg = LubCdmConfig(eta_schedule=tuple(params.get("eta_schedule", prof.eta_schedule)),
                           penalty=prof.penalty, quota=prof.quota, lam=params.get("lam"),
                           calibration=params.get("calibration", "average"))
        prof.strategy = LubCdmStrategy(cfg, hist)

    pref = _get(root, "preferences", "", "map")
    _reject_unknown(pref, {"kind", "rankings", "values", "reservation", "state"}, "preferences")
    kind = _get(pref, "kind", "preferences", "str").value
    state = float(_get(pref, "state", "preferences", "num", _Node(0.5, pref.line)).value)
    rankings = None
    if kind == "ranked":
        rn = _get(pref, "rankings", "preferences", "map")
        rankings = {int(k): [int(x) for x in _plain(v)] for k, v in rn.value.items()}
        missing = sorted(a.id for a in arms if a.id not in rankings)
        if missing:
            raise InstanceFormatError(f"no ranking for arms {missing}", rn.line, "preferences.rankings")
        model = ranked_preferences(rankings, state)
    elif kind == "utility":
        vals = np.array(_plain(_get(pref, "values", "preferences", "list")), float)
        res = _get(pref, "reservation", "preferences", None, None)
        model = utility_preferences(vals, None if res is None else _plain(res), state)
    else:
        raise InstanceFormatError(f"unknown preference kind {kind!r}", pref.value["kind"].line, "preferences.kind")
    return MarketInstance(arms, agents, model, stages, seed, rankings)


def load_instance(path) -> MarketInstance:
    path = Path(path)
    return parse_instance(path.read_text(), path.parent)


# ---------------------------------------------------------------- history CSV

def write_history(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in records:
            w.writerow([r.t, r.k, repr(float(r.state)), repr(float(r.score)), repr(float(r.fit)), r.accepted])


def read_history(path):
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(h.strip() for h in header) != HISTORY_COLUMNS:
            raise InstanceFormatError(f"header must be {','.join(HISTORY_COLUMNS)}", 1, "header")
        for line, row in enumerate(rd, start=2):
            if len(row) != len(HISTORY_COLUMNS):
                raise InstanceFormatError(f"expected {len(HISTORY_COLUMNS)} columns", line)
            vals = {}
            for name, cell, cast in zip(HISTORY_COLUMNS, row, (int, int, float, float, float, int)):
                try:
                    vals[name] = cast(cell)
                except ValueError:
                    raise InstanceFormatError(f"bad value {cell!r}", line, name) from None
            try:
                out.append(HistoryRecord(**vals))
            except ValueError as e:
                raise InstanceFormatError(str(e), line) from None
    return out


# ---------------------------------------------------------------- model dump

_MODEL_ARRAYS = ("centers_s", "centers_v", "alpha", "state_grid")
_MODEL_SCALARS = ("h_s", "h_v", "lam", "v_min", "v_max")


def model_to_json(model: FittedAcceptanceModel) -> str:
    # json writes floats with repr, which round-trips exactly
    d = {k: float(getattr(model, k)) for k in _MODEL_SCALARS}
    d.update({k: [float(x) for x in np.asarray(getattr(model, k))] for k in _MODEL_ARRAYS})
    d["objective_trace"] = [float(x) for x in model.objective_trace]
    return json.dumps(d, indent=1, sort_keys=True)


def model_from_json(text: str) -> FittedAcceptanceModel:
    d = json.loads(text)
    missing = [k for k in _MODEL_SCALARS + _MODEL_ARRAYS if k not in d]
    if missing:
        raise InstanceFormatError(f"missing model fields {missing}")
    kw = {k: float(d[k]) for k in _MODEL_SCALARS}
    kw.update({k: np.array(d[k], float) for k in _MODEL_ARRAYS})
    return FittedAcceptanceModel(objective_trace=list(d.get("objective_trace", [])), **kw)


# ---------------------------------------------------------------- DA preference file

def write_da_preferences(path, agent_prefs, quotas, arm_prefs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DA_COLUMNS)
        for i in sorted(agent_prefs):
            w.writerow(["agent", i, quotas[i], " ".join(map(str, agent_prefs[i]))])
        for j in sorted(arm_prefs):
            w.writerow(["arm", j, "", " ".join(map(str, arm_prefs[j]))])


def read_da_preferences(path):
    """Returns (agent_prefs, quotas, arm_prefs)."""
    agent_prefs, quotas, arm_prefs = {}, {}, {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(header) != DA_COLUMNS:
            raise InstanceFormatError(f"header must be {','.join(DA_COLUMNS)}", 1, "header")
        for line, row in enumerate(rd, start=2):
            if len(row) != 4:
                raise InstanceFormatError("expected 4 columns", line)
            side, ident, quota, prefs = row
            try:
                ident = int(ident)
                order = [int(x) for x in prefs.split()]
            except ValueError:
                raise InstanceFormatError("ids must be integers", line, "preferences") from None
            if side == "agent":
                try:
                    quotas[ident] = int(quota)
                except ValueError:
                    raise InstanceFormatError("agent quota must be an integer", line, "quota") from None
                agent_prefs[ident] = order
            elif side == "arm":
                arm_prefs[ident] = order
            else:
                raise InstanceFormatError(f"side must be 'agent' or 'arm', got {side!r}", line, "side")
    return agent_prefs, quotas, arm_prefs
