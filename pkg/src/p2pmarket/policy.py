"""Loss-allocation matrices mapping line losses onto directed trades.

Rows of every matrix follow ``TradeGraph.trades`` and columns the global line
order of the grid.  Each column sums to one, so the losses allocated to the
trades add up to the modelled line losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import Agent, TradeGraph, capacity
from .grid import TSO, GridModel, build_modified_tf

SOC, IND, CAP = "soc", "ind", "cap"
OPERATOR, SYSTEM = "operator", "system"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationMatrix:
    values: np.ndarray
    kind: str
    chi: float
    capacity_scaled: bool = False
    scope: str = OPERATOR

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class PolicyConfig:
    """``kind`` picks the individual component; ``soc`` means chi = 1."""

    kind: str = SOC
    chi: float | None = None
    scope: str = OPERATOR

    def __post_init__(self):
        if self.kind not in (SOC, IND, CAP):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.scope not in (OPERATOR, SYSTEM):
            raise PolicyError(f"unknown socialization scope {self.scope!r}")
        if self.chi is not None and not 0.0 <= self.chi <= 1.0:
            raise PolicyError(f"chi={self.chi} outside [0, 1]")

    @property
    def effective_chi(self) -> float:
        if self.kind == SOC:
            return 1.0
        return 0.0 if self.chi is None else self.chi


def _agent_map(agents) -> dict[str, Agent]:
    return agents if isinstance(agents, dict) else {a.id: a for a in agents}


def trade_operators(grid: GridModel, agents, i: str, j: str) -> set[str]:
    """Operators whose network a trade between ``i`` and ``j`` uses.

    Both agents' operators, plus the TSO when they sit in different operators.
    """
    amap = _agent_map(agents)
    a, b = grid.bus_by_id[amap[i].bus].so, grid.bus_by_id[amap[j].bus].so
    return {a, b} | ({TSO} if a != b else set())


def _membership(grid, trade_graph, agents) -> np.ndarray:
    """Boolean (trades x lines): trade uses the operator that owns the line."""
    owners = [grid.line_owner(k) for k in range(len(grid.lines))]
    out = np.zeros((len(trade_graph.trades), len(owners)), dtype=bool)
    for k, (i, j) in enumerate(trade_graph.trades):
        ops = trade_operators(grid, agents, i, j)
        out[k] = [o in ops for o in owners]
    return out


def build_socialization(grid: GridModel, trade_graph: TradeGraph, agents, scope: str = OPERATOR) -> AllocationMatrix:
    """Equal split of each line's losses.

    With ``scope="operator"`` a line's losses are shared equally among the
    directed trades that use the owning operator's network; ``"system"``
    spreads every line over all directed trades.
    """
    n_tr, n_l = len(trade_graph.trades), len(grid.lines)
    if n_tr == 0:
        raise PolicyError("no trades to allocate losses to")
    if scope == SYSTEM:
        return AllocationMatrix(np.full((n_tr, n_l), 1.0 / n_tr), SOC, 1.0, scope=SYSTEM)
    if scope != OPERATOR:
        raise PolicyError(f"unknown socialization scope {scope!r}")
    member = _membership(grid, trade_graph, agents)
    counts = member.sum(axis=0)
    empty = [grid.lines[k].id for k in np.flatnonzero(counts == 0)]
    if empty:
        owners = sorted({grid.line_owner(grid.line_index[l]) for l in empty})
        raise PolicyError(f"operators {owners} own lines {empty} but have no trades")
    return AllocationMatrix(member / counts, SOC, 1.0, scope=OPERATOR)


def _usage(grid, trade_graph, agents, tf) -> np.ndarray:
    amap = _agent_map(agents)
    cols = grid.bus_index
    bi = [cols[amap[i].bus] for i, _ in trade_graph.trades]
    bj = [cols[amap[j].bus] for _, j in trade_graph.trades]
    return np.abs(tf[:, bi] - tf[:, bj]).T


def _normalise(raw, grid, trade_graph, agents) -> np.ndarray:
    sums = raw.sum(axis=0)
    out = np.zeros_like(raw)
    ok = sums > 0
    out[:, ok] = raw[:, ok] / sums[ok]
    if not ok.all():
        soc = build_socialization(grid, trade_graph, agents).values
        out[:, ~ok] = soc[:, ~ok]
    return out


def build_individual(grid: GridModel, trade_graph: TradeGraph, agents, tf: np.ndarray | None = None) -> AllocationMatrix:
    """Allocation proportional to ``|TF[l, bus_i] - TF[l, bus_j]|``.

    Columns no trade loads fall back to the socialization coefficients.
    """
    if tf is None:
        tf = build_modified_tf(grid)
    raw = _usage(grid, trade_graph, agents, tf)
    return AllocationMatrix(_normalise(raw, grid, trade_graph, agents), IND, 0.0)


def build_capacity_scaled(grid: GridModel, trade_graph: TradeGraph, agents, tf: np.ndarray | None = None, capacities=None) -> AllocationMatrix:
    """Individual allocation weighted by the selling-side agent capacity K_i.

    Each column is renormalised to sum to one after weighting.
    """
    amap = _agent_map(agents)
    if tf is None:
        tf = build_modified_tf(grid)
    if capacities is None:
        capacities = {a: capacity(ag) for a, ag in amap.items()}
    total = sum(capacities.values())
    if total <= 0:
        raise PolicyError("all agent capacities are zero")
    k = np.array([capacities[i] / total for i, _ in trade_graph.trades])
    raw = _usage(grid, trade_graph, agents, tf) * k[:, None]
    return AllocationMatrix(_normalise(raw, grid, trade_graph, agents), CAP, 0.0, capacity_scaled=True)


def mix(a_soc: AllocationMatrix, a_ind: AllocationMatrix, chi: float) -> AllocationMatrix:
    """Convex combination ``chi * A_soc + (1 - chi) * A_ind``."""
    if a_soc.shape != a_ind.shape:
        raise PolicyError(f"shape mismatch {a_soc.shape} vs {a_ind.shape}")
    if not 0.0 <= chi <= 1.0:
        raise PolicyError(f"chi={chi} outside [0, 1]")
    if chi == 1.0:
        values = a_soc.values.copy()
    elif chi == 0.0:
        values = a_ind.values.copy()
    else:
        values = chi * a_soc.values + (1.0 - chi) * a_ind.values
    return AllocationMatrix(values, a_ind.kind if chi < 1 else SOC, chi, a_ind.capacity_scaled, a_soc.scope)


def build_policy(grid: GridModel, trade_graph: TradeGraph, agents, config: PolicyConfig, tf=None) -> AllocationMatrix:
    chi = config.effective_chi
    soc = build_socialization(grid, trade_graph, agents, config.scope)
    if chi == 1.0:
        return soc
    if tf is None:
        tf = build_modified_tf(grid)
    builder = build_capacity_scaled if config.kind == CAP else build_individual
    return mix(soc, builder(grid, trade_graph, agents, tf), chi)


def check_allocation(a: AllocationMatrix, tol: float = 1e-9) -> None:
    """Raise unless entries are nonnegative and every column sums to one."""
    v = a.values
    if v.size and v.min() < -tol:
        raise PolicyError(f"negative allocation coefficient {v.min():.3g}")
    bad = np.flatnonzero(np.abs(v.sum(axis=0) - 1.0) > tol)
    if bad.size:
        raise PolicyError(f"allocation columns {bad.tolist()} do not sum to 1")
