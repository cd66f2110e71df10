"""Strict JSON case format.

One document describes the grid, the agents, the trading topology, the loss
policy and the solver settings.  Powers are MW/MVAr; impedances are p.u. on
``base_mva`` (100 MVA unless stated).
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .agents import Agent, TradeGraph, blocking, validate
from .grid import AcLine, Bus, ConnectionPoint, DistLine, GridModel, GridError, HvdcLine, TRANSMISSION
from .policy import PolicyConfig

SCHEMA_VERSION = 1


class CaseError(ValueError):
    pass


def _obj(props: dict, required: list[str]) -> dict:
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_ID = {"type": "string", "minLength": 1}

SCHEMA = _obj({
    "version": {"const": SCHEMA_VERSION},
    "name": {"type": "string"},
    "description": {"type": "string"},
    "base_mva": _POS,
    "seed": {"type": "integer", "minimum": 0},
    "grid": _obj({
        "buses": {"type": "array", "minItems": 1, "items": _obj({
            "id": _ID, "level": {"enum": ["transmission", "distribution"]}, "dso": _ID,
            "theta_min": _NUM, "theta_max": _NUM, "v_min": _NUM, "v_max": _NUM,
        }, ["id", "level"])},
        "ac_lines": {"type": "array", "items": _obj({
            "id": _ID, "from": _ID, "to": _ID, "x": _POS, "r": _NONNEG, "capacity": _POS,
        }, ["id", "from", "to", "x", "r", "capacity"])},
        "hvdc_lines": {"type": "array", "items": _obj({
            "id": _ID, "from": _ID, "to": _ID, "capacity": _POS, "r": _NONNEG,
        }, ["id", "from", "to", "capacity"])},
        "dist_lines": {"type": "array", "items": _obj({
            "id": _ID, "from": _ID, "to": _ID, "r": _NONNEG, "x": _NONNEG, "capacity": _POS, "b0": _NUM,
        }, ["id", "from", "to", "r", "x", "capacity"])},
        "connections": {"type": "array", "items": _obj({
            "id": _ID, "tso_bus": _ID, "dso": _ID, "feeder_bus": _ID,
        }, ["id", "tso_bus", "dso", "feeder_bus"])},
        "slack": _ID,
    }, ["buses", "slack"]),
    "agents": {"type": "array", "minItems": 1, "items": _obj({
        "id": _ID, "bus": _ID, "p_min": _NUM, "p_max": _NUM, "q_min": _NUM, "q_max": _NUM,
        "cost_a": _NONNEG, "cost_b": _NUM,
    }, ["id", "bus", "p_min", "p_max"])},
    "trades": _obj({
        "topology": {"enum": ["explicit", "full", "community"]},
        "pairs": {"type": "array", "items": {"type": "array", "items": _ID, "minItems": 2, "maxItems": 2}},
        "managers": {"type": "array", "items": _ID},
    }, ["topology"]),
    "policy": _obj({
        "kind": {"enum": ["soc", "ind", "cap"]},
        "chi": {"type": "number", "minimum": 0, "maximum": 1},
        "scope": {"enum": ["operator", "system"]},
    }, ["kind"]),
    "solver": _obj({
        "backend": {"enum": ["reference", "cvxpy"]},
        "soc_mode": {"enum": ["polygon", "native"]},
        "cuts": {"type": "integer", "minimum": 4},
        "tol": _POS,
        "max_iter": {"type": "integer", "minimum": 1},
        "loss_segments": {"type": "integer", "minimum": 1},
        "grid": {"type": "boolean"},
        "losses": {"type": "boolean"},
        "admm": _obj({
            "rho": _POS, "max_iter": {"type": "integer", "minimum": 1},
            "eps_primal": _POS, "eps_dual": _POS,
        }, []),
    }, []),
}, ["version", "grid", "agents", "trades"])


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    max_iter: int = 5000
    eps_primal: float = 1e-5
    eps_dual: float = 1e-5


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "reference"
    soc_mode: str = "polygon"
    cuts: int = 16
    tol: float = 1e-9
    max_iter: int = 100
    loss_segments: int = 2
    grid: bool = True
    losses: bool = True
    admm: AdmmConfig = field(default_factory=AdmmConfig)


@dataclass
class Case:
    grid: GridModel
    agents: list[Agent]
    trade_graph: TradeGraph
    policy: PolicyConfig
    solver: SolverConfig
    name: str = ""
    seed: int = 0
    document: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return case_hash(self.document)


def case_hash(doc: dict) -> str:
    return hashlib.sha256(dumps(doc).encode()).hexdigest()


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _schema_error(err: jsonschema.ValidationError) -> CaseError:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return CaseError(f"case schema violation at {where}: {err.message}")


def validate_document(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise _schema_error(errors[0])


def community_pairs(grid: GridModel, agents, managers) -> list[tuple[str, str]]:
    """Managers and TSO agents trade with each other; DSO agents only with their manager."""
    bus = grid.bus_by_id
    managers = list(managers)
    by_dso = {}
    for m in managers:
        a = next((x for x in agents if x.id == m), None)
        if a is None:
            raise CaseError(f"community manager {m} is not an agent")
        dso = bus[a.bus].dso
        if dso is None:
            raise CaseError(f"community manager {m} sits on a transmission bus")
        if dso in by_dso:
            raise CaseError(f"DSO {dso} has two community managers")
        by_dso[dso] = m
    upper = [a.id for a in agents if bus[a.bus].level == TRANSMISSION] + managers
    pairs = [(upper[i], upper[j]) for i in range(len(upper)) for j in range(i + 1, len(upper))]
    for a in agents:
        dso = bus[a.bus].dso
        if dso is None or a.id in managers:
            continue
        if dso not in by_dso:
            raise CaseError(f"DSO {dso} has agents but no community manager")
        pairs.append((by_dso[dso], a.id))
    return pairs


def parse(doc: dict) -> Case:
    """Validate a case document and build the model objects."""
    validate_document(doc)
    doc = copy.deepcopy(doc)
    g = doc["grid"]
    try:
        grid = GridModel(
            buses=[Bus(**b) for b in g["buses"]],
            ac_lines=[AcLine(d["id"], d["from"], d["to"], d["x"], d["r"], d["capacity"]) for d in g.get("ac_lines", [])],
            hvdc_lines=[HvdcLine(d["id"], d["from"], d["to"], d["capacity"], d.get("r", 0.0)) for d in g.get("hvdc_lines", [])],
            dist_lines=[DistLine(d["id"], d["from"], d["to"], d["r"], d["x"], d["capacity"], d.get("b0", 0.0))
                        for d in g.get("dist_lines", [])],
            connections=[ConnectionPoint(**c) for c in g.get("connections", [])],
            slack=g["slack"],
            base_mva=doc.get("base_mva", 100.0),
        )
    except GridError as exc:
        raise CaseError(f"grid: {exc}") from exc
    agents = [Agent(**a) for a in doc["agents"]]
    ids = [a.id for a in agents]
    tr = doc["trades"]
    topo = tr["topology"]
    if topo == "full":
        graph = TradeGraph.full(ids)
    elif topo == "explicit":
        if "pairs" not in tr:
            raise CaseError("explicit trade topology needs 'pairs'")
        graph = TradeGraph.from_pairs(ids, [tuple(p) for p in tr["pairs"]])
    else:
        graph = TradeGraph.from_pairs(ids, community_pairs(grid, agents, tr.get("managers", [])))
    problems = blocking(validate(agents, graph, grid))
    if problems:
        raise CaseError("; ".join(problems))
    pol = doc.get("policy", {"kind": "soc"})
    policy = PolicyConfig(pol["kind"], pol.get("chi"), pol.get("scope", "operator"))
    s = dict(doc.get("solver", {}))
    admm = AdmmConfig(**s.pop("admm", {}))
    solver = SolverConfig(admm=admm, **s)
    return Case(grid, agents, graph, policy, solver, doc.get("name", ""), doc.get("seed", 0), doc)


def load_case(path) -> Case:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseError(f"cannot read case file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse(doc)


def dump_case(case_or_doc, path) -> None:
    doc = case_or_doc.document if isinstance(case_or_doc, Case) else case_or_doc
    validate_document(doc)
    Path(path).write_text(dumps(doc))


def bundled_cases() -> dict[str, Path]:
    root = Path(__file__).with_name("cases")
    return {p.stem: p for p in sorted(root.glob("*.json"))}


def bundled(name: str) -> Case:
    cases = bundled_cases()
    if name not in cases:
        raise CaseError(f"no bundled case {name!r}; have {sorted(cases)}")
    return load_case(cases[name])
