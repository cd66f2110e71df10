"""Prosumers, their costs and the bilateral trading topology.

Sign convention: ``p > 0`` is generation, ``p < 0`` consumption.  A directed
trade ``t_ij > 0`` is energy sold by ``i`` to ``j``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

from .grid import GridModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Agent:
    id: str
    bus: str
    p_min: float
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    cost_a: float = 0.0
    cost_b: float = 0.0

    @property
    def capacity(self) -> float:
        return capacity(self)


def capacity(agent: Agent) -> float:
    """K_i = max(|P_min|, |P_max|)."""
    return max(abs(agent.p_min), abs(agent.p_max))


def cost_value_and_gradient(agent: Agent, p: float) -> tuple[float, float]:
    """Active-power cost ``a p^2 + b p`` and its derivative."""
    return agent.cost_a * p * p + agent.cost_b * p, 2.0 * agent.cost_a * p + agent.cost_b


@dataclass(frozen=True)
class TradeGraph:
    """Symmetric partner sets; ``partners[i]`` is the ordered tuple Omega_i."""

    partners: dict[str, tuple[str, ...]]

    @classmethod
    def from_pairs(cls, agent_ids, pairs) -> "TradeGraph":
        partners = {a: [] for a in agent_ids}
        for i, j in pairs:
            for a, b in ((i, j), (j, i)):
                if a not in partners:
                    partners[a] = []
                if b not in partners[a]:
                    partners[a].append(b)
        return cls({a: tuple(p) for a, p in partners.items()})

    @classmethod
    def full(cls, agent_ids) -> "TradeGraph":
        return cls.from_pairs(agent_ids, combinations(agent_ids, 2))

    @cached_property
    def trades(self) -> list[tuple[str, str]]:
        """Directed trades (i, j), each unordered pair listed in both directions."""
        return [(i, j) for i, js in self.partners.items() for j in js]

    @cached_property
    def trade_index(self) -> dict[tuple[str, str], int]:
        return {tr: k for k, tr in enumerate(self.trades)}

    @cached_property
    def pairs(self) -> list[tuple[str, str]]:
        """Unordered pairs in order of first appearance."""
        seen, out = set(), []
        for i, j in self.trades:
            key = frozenset((i, j))
            if key not in seen:
                seen.add(key)
                out.append((i, j))
        return out

    def reverse(self, k: int) -> int:
        i, j = self.trades[k]
        return self.trade_index[(j, i)]

    @property
    def isolated(self) -> list[str]:
        return [a for a, js in self.partners.items() if not js]

    def trade_counts(self, grid: GridModel, agents: dict[str, Agent]) -> dict[str, int]:
        """Number of directed trades touching each system operator."""
        counts = {so: 0 for so in grid.operators}
        for i, j in self.trades:
            for so in {grid.bus_by_id[agents[i].bus].so, grid.bus_by_id[agents[j].bus].so}:
                counts[so] += 1
        return counts


def validate(agents, trade_graph: TradeGraph, grid: GridModel | None = None) -> list[str]:
    """Check agent and trade-graph invariants.

    Returns a list of human-readable diagnostics; an empty list means ok.
    """
    diag = []
    ids = [a.id for a in agents]
    if len(set(ids)) != len(ids):
        diag.append("duplicate agent ids")
    known = set(ids)
    for a in agents:
        if a.p_min > a.p_max:
            diag.append(f"agent {a.id}: p_min {a.p_min} > p_max {a.p_max}")
        if a.q_min > a.q_max:
            diag.append(f"agent {a.id}: q_min {a.q_min} > q_max {a.q_max}")
        if a.cost_a < 0:
            diag.append(f"agent {a.id}: quadratic cost {a.cost_a} < 0 (non-convex)")
        if grid is not None and a.bus not in grid.bus_by_id:
            diag.append(f"agent {a.id}: unknown bus {a.bus}")

    partners = trade_graph.partners
    for i, js in partners.items():
        if i not in known:
            diag.append(f"trade graph: unknown agent {i}")
            continue
        if len(set(js)) != len(js):
            diag.append(f"agent {i}: duplicate partners")
        for j in js:
            if j == i:
                diag.append(f"agent {i}: self-trade")
            elif j not in known:
                diag.append(f"agent {i}: unknown partner {j}")
            elif i not in partners.get(j, ()):
                diag.append(f"asymmetric trade: {j} in Omega_{i} but {i} not in Omega_{j}")
    for a in ids:
        if a not in partners or not partners[a]:
            diag.append(f"agent {a}: isolated (no trading partners)")
    return diag


def blocking(diagnostics: list[str]) -> list[str]:
    """Diagnostics that prevent clearing (isolated agents only warn)."""
    return [d for d in diagnostics if "isolated" not in d]


def drop_isolated(agents, trade_graph: TradeGraph):
    """Remove agents without partners, logging a warning for each."""
    iso = set(trade_graph.isolated) | {a.id for a in agents if a.id not in trade_graph.partners}
    for a in sorted(iso):
        log.warning("agent %s has no trading partners and is excluded from clearing", a)
    kept = [a for a in agents if a.id not in iso]
    graph = TradeGraph({i: js for i, js in trade_graph.partners.items() if i not in iso})
    return kept, graph
