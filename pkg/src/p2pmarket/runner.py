"""Case-level pipeline: policy matrix, clearing, reference clearing and output files."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import solverback as sb
from .casefile import Case, bundled_cases, case_hash, load_case, parse
from .clearing import ClearingOptions, ClearingSolution, assemble, extract_prices, solve
from .policy import PolicyConfig, build_policy
from .settlement import SettlementReport, settle

SETTLEMENT_COLUMNS = ["agent", "bus", "payment", "delta", "delta_pct", "losses", "delta_distance", "pi"]
LINE_COLUMNS = ["line", "flow", "limit", "loading", "loss"]
TRADE_COLUMNS = ["i", "j", "t", "w", "z", "tau_t", "tau_z", "tau_l"]


def fmt(v) -> str:
    """Deterministic text form of a table cell."""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        v = 0.0 if v == 0 else v
        return f"{v:.10g}"
    return str(v)


def write_table(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def _jsonable(v):
    if isinstance(v, float):
        return None if math.isnan(v) or math.isinf(v) else float(fmt(v))
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def resolve_case(source: str, seed: int | None = None) -> Case:
    """A case file path or the name of a bundled case.

    ``seed`` regenerates the bundled random case with that seed.
    """
    if source == "random" and seed is not None:
        from .casegen import generate_random_case
        return parse(generate_random_case(seed=seed))
    path = Path(source)
    if path.exists():
        return load_case(path)
    cases = bundled_cases()
    if source in cases:
        return load_case(cases[source])
    return load_case(path)  # raises a readable error


@dataclass
class RunSettings:
    policy: PolicyConfig
    grid: bool
    losses: bool
    soc_mode: str
    cuts: int
    backend: str
    tol: float
    max_iter: int
    loss_segments: int

    @classmethod
    def from_case(cls, case: Case) -> "RunSettings":
        s = case.solver
        return cls(case.policy, s.grid, s.losses, s.soc_mode, s.cuts, s.backend, s.tol, s.max_iter, s.loss_segments)

    @property
    def options(self) -> ClearingOptions:
        return ClearingOptions(grid=self.grid, losses=self.losses, soc_mode=self.soc_mode, cuts=self.cuts,
                               loss_segments=self.loss_segments)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = {"kind": self.policy.kind, "chi": self.policy.effective_chi, "scope": self.policy.scope}
        return d


def allocation_for(case: Case, settings: RunSettings):
    if not settings.losses:
        return None
    return build_policy(case.grid, case.trade_graph, case.agents, settings.policy)


def clear_case(case: Case, settings: RunSettings | None = None) -> ClearingSolution:
    settings = settings or RunSettings.from_case(case)
    problem = assemble(case.grid, case.agents, case.trade_graph, allocation_for(case, settings), settings.options)
    backend = sb.get_backend(settings.backend, settings.tol, settings.max_iter)
    return solve(problem, backend)


def reference_settings(settings: RunSettings) -> RunSettings:
    """Same market without losses in the clearing."""
    return replace(settings, losses=False)


@dataclass
class RunRecord:
    command: str
    case: str
    case_hash: str
    seed: int
    settings: dict
    status: str
    objective: float
    summary: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def write(self, path) -> None:
        write_json(asdict(self), path)


def prices_document(solution: ClearingSolution) -> dict:
    p = extract_prices(solution)

    def keyed(d):
        return {f"{k[0]}->{k[1]}" if isinstance(k, tuple) else str(k): v for k, v in d.items()}

    return {"pi": keyed(p.pi), "tau_t": keyed(p.tau_t), "tau_z": keyed(p.tau_z), "tau_l": keyed(p.tau_l),
            "tau_e": keyed(p.tau_e), "lambda": keyed(p.lam)}


def write_outputs(out_dir, report: SettlementReport, solution: ClearingSolution) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(report.agents, SETTLEMENT_COLUMNS, out / "settlement.csv")
    write_table(report.lines, LINE_COLUMNS, out / "lines.csv")
    write_table(report.trades, TRADE_COLUMNS, out / "trades.csv")
    write_json(prices_document(solution), out / "prices.json")


def clear_and_settle(case: Case, settings: RunSettings):
    """Cleared solution, its losses-off reference and the settlement report."""
    t0 = time.perf_counter()
    sol = clear_case(case, settings)
    timing = {"clear": time.perf_counter() - t0}
    if not sol.optimal:
        return sol, None, None, timing
    ref = sol
    if settings.losses:
        t1 = time.perf_counter()
        ref = clear_case(case, reference_settings(settings))
        timing["reference"] = time.perf_counter() - t1
        if not ref.optimal:
            return sol, ref, None, timing
    return sol, ref, settle(sol, ref), timing


def record(command: str, case: Case, settings: RunSettings, sol: ClearingSolution, summary=None, timing=None):
    return RunRecord(command, case.name, case_hash(case.document), case.seed, settings.as_dict(), sol.status,
                     sol.objective if sol.optimal else math.nan, summary or {}, timing or {})
