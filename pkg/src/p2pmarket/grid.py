"""Joint transmission/distribution network model and its derived matrices.

Flow orientation used throughout the package: a positive flow on a line runs
from its ``from_bus`` to its ``to_bus``.  Powers are in MW/MVAr, impedances
in p.u. on the system base (``GridModel.base_mva``, 100 MVA by default).

Global line ordering is ``ac_lines + hvdc_lines + dist_lines``; global bus
ordering is the order of ``GridModel.buses``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

TSO = "TSO"
TRANSMISSION = "transmission"
DISTRIBUTION = "distribution"


class GridError(ValueError):
    """Structural problem with a grid description."""


@dataclass(frozen=True)
class Bus:
    id: str
    level: str
    dso: str | None = None
    theta_min: float = -np.pi / 2
    theta_max: float = np.pi / 2
    v_min: float = 0.9
    v_max: float = 1.1

    def __post_init__(self):
        if self.level not in (TRANSMISSION, DISTRIBUTION):
            raise GridError(f"bus {self.id}: unknown level {self.level!r}")
        if self.level == DISTRIBUTION and not self.dso:
            raise GridError(f"bus {self.id}: distribution bus needs a DSO id")
        if self.level == TRANSMISSION and self.dso:
            raise GridError(f"bus {self.id}: transmission bus cannot belong to a DSO")
        if not self.theta_min < self.theta_max:
            raise GridError(f"bus {self.id}: theta_min must be < theta_max")
        if not self.v_min < self.v_max:
            raise GridError(f"bus {self.id}: v_min must be < v_max")

    @property
    def so(self) -> str:
        return TSO if self.level == TRANSMISSION else self.dso


@dataclass(frozen=True)
class AcLine:
    id: str
    from_bus: str
    to_bus: str
    x: float
    r: float
    capacity: float

    def __post_init__(self):
        if self.x <= 0:
            raise GridError(f"ac line {self.id}: reactance must be positive")
        if self.r < 0:
            raise GridError(f"ac line {self.id}: resistance must be nonnegative")
        if self.capacity <= 0:
            raise GridError(f"ac line {self.id}: capacity must be positive")


@dataclass(frozen=True)
class HvdcLine:
    """Controllable link; its flow enters the nodal balances as injections."""

    id: str
    from_bus: str
    to_bus: str
    capacity: float
    r: float = 0.0

    def __post_init__(self):
        if self.capacity <= 0:
            raise GridError(f"hvdc line {self.id}: capacity must be positive")
        if self.r < 0:
            raise GridError(f"hvdc line {self.id}: resistance must be nonnegative")


@dataclass(frozen=True)
class DistLine:
    """Distribution line of the linearised AC model.

    ``susceptance`` and ``conductance`` follow the sign convention of the flow
    equations ``f_p = B (th_r - th_s) - G (v_r - v_s)`` and
    ``f_q = (B + 2 b0) (v_r - v_s) + G (th_r - th_s) - b0``, i.e.
    ``B = x / (r^2 + x^2)`` and ``G = -r / (r^2 + x^2)``.
    """

    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    capacity: float
    b0: float = 0.0

    def __post_init__(self):
        if self.r < 0 or self.x < 0 or self.r + self.x == 0:
            raise GridError(f"dist line {self.id}: need r >= 0, x >= 0 and r + x > 0")
        if self.capacity <= 0:
            raise GridError(f"dist line {self.id}: apparent capacity must be positive")

    @property
    def susceptance(self) -> float:
        return self.x / (self.r**2 + self.x**2)

    @property
    def conductance(self) -> float:
        return -self.r / (self.r**2 + self.x**2)

    @property
    def susceptance_star(self) -> float:
        return self.susceptance + 2.0 * self.b0


@dataclass(frozen=True)
class ConnectionPoint:
    id: str
    tso_bus: str
    dso: str
    feeder_bus: str


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    ac_lines: tuple[AcLine, ...] = ()
    hvdc_lines: tuple[HvdcLine, ...] = ()
    dist_lines: tuple[DistLine, ...] = ()
    connections: tuple[ConnectionPoint, ...] = ()
    slack: str | None = None
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "ac_lines", tuple(self.ac_lines))
        object.__setattr__(self, "hvdc_lines", tuple(self.hvdc_lines))
        object.__setattr__(self, "dist_lines", tuple(self.dist_lines))
        object.__setattr__(self, "connections", tuple(self.connections))
        self._check()

    def _check(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        line_ids = [ln.id for ln in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise GridError("duplicate line ids")
        bus = self.bus_by_id
        if self.slack is None or self.slack not in bus:
            raise GridError(f"slack bus {self.slack!r} is not a known bus")
        if bus[self.slack].level != TRANSMISSION:
            raise GridError(f"slack bus {self.slack} must be a transmission bus")

        for ln in self.ac_lines + self.hvdc_lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in bus or bus[end].level != TRANSMISSION:
                    raise GridError(f"line {ln.id}: endpoint {end} is not a transmission bus")
            if ln.from_bus == ln.to_bus:
                raise GridError(f"line {ln.id}: self loop")
        for ln in self.dist_lines:
            ends = [bus.get(ln.from_bus), bus.get(ln.to_bus)]
            if any(b is None or b.level != DISTRIBUTION for b in ends):
                raise GridError(f"dist line {ln.id}: endpoints must be distribution buses")
            if ends[0].dso != ends[1].dso:
                raise GridError(f"dist line {ln.id}: connects two different DSOs")
            if ln.from_bus == ln.to_bus:
                raise GridError(f"dist line {ln.id}: self loop")

        for c in self.connections:
            if c.tso_bus not in bus or bus[c.tso_bus].level != TRANSMISSION:
                raise GridError(f"connection {c.id}: {c.tso_bus} is not a transmission bus")
            fb = bus.get(c.feeder_bus)
            if fb is None or fb.level != DISTRIBUTION or fb.dso != c.dso:
                raise GridError(f"connection {c.id}: feeder {c.feeder_bus} not in DSO {c.dso}")
        for d in self.dsos:
            if not any(c.dso == d for c in self.connections):
                raise GridError(f"DSO {d} has no connection point")

        self._check_connected(
            [b.id for b in self.buses if b.level == TRANSMISSION],
            [(ln.from_bus, ln.to_bus) for ln in self.ac_lines],
            "transmission grid",
        )
        for d in self.dsos:
            self._check_connected(
                self.dso_buses(d),
                [(ln.from_bus, ln.to_bus) for ln in self.dist_lines if bus[ln.from_bus].dso == d],
                f"DSO {d}",
            )

    @staticmethod
    def _check_connected(nodes, edges, label):
        if len(nodes) <= 1:
            return
        pos = {n: k for k, n in enumerate(nodes)}
        rows = [pos[a] for a, _ in edges]
        cols = [pos[b] for _, b in edges]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
        n_comp, labels = connected_components(adj, directed=False)
        if n_comp > 1:
            main = labels[pos[nodes[0]]]
            isolated = [n for n in nodes if labels[pos[n]] != main]
            raise GridError(f"{label} is disconnected; isolated component: {isolated}")

    # -- indexing helpers -------------------------------------------------

    @cached_property
    def bus_by_id(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def transmission_buses(self) -> list[str]:
        return [b.id for b in self.buses if b.level == TRANSMISSION]

    @cached_property
    def distribution_buses(self) -> list[str]:
        return [b.id for b in self.buses if b.level == DISTRIBUTION]

    @cached_property
    def dsos(self) -> list[str]:
        seen = []
        for b in self.buses:
            if b.level == DISTRIBUTION and b.dso not in seen:
                seen.append(b.dso)
        return seen

    @property
    def operators(self) -> list[str]:
        return [TSO] + self.dsos

    def dso_buses(self, dso: str) -> list[str]:
        return [b.id for b in self.buses if b.dso == dso]

    def dso_connections(self, dso: str) -> list[ConnectionPoint]:
        return [c for c in self.connections if c.dso == dso]

    def dso_reference(self, dso: str) -> str:
        """Reference (angle and PTDF slack) bus of a DSO: its first feeder."""
        return self.dso_connections(dso)[0].feeder_bus

    @property
    def lines(self) -> tuple:
        return self.ac_lines + self.hvdc_lines + self.dist_lines

    @cached_property
    def line_index(self) -> dict[str, int]:
        return {ln.id: k for k, ln in enumerate(self.lines)}

    def line_owner(self, k: int) -> str:
        ln = self.lines[k]
        if isinstance(ln, DistLine):
            return self.bus_by_id[ln.from_bus].dso
        return TSO

    @property
    def line_resistances(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines], dtype=float)

    @property
    def line_capacities(self) -> np.ndarray:
        return np.array([ln.capacity for ln in self.lines], dtype=float)


def _ptdf(nodes, edges, weights, slack) -> np.ndarray:
    """PTDF of a connected network: rows edges, columns nodes, slack column 0."""
    n, m = len(nodes), len(edges)
    if m == 0:
        return np.zeros((0, n))
    pos = {b: k for k, b in enumerate(nodes)}
    inc = np.zeros((m, n))
    for k, (a, b) in enumerate(edges):
        inc[k, pos[a]] = 1.0
        inc[k, pos[b]] = -1.0
    bf = weights[:, None] * inc
    bbus = inc.T @ bf
    keep = [k for k in range(n) if k != pos[slack]]
    out = np.zeros((m, n))
    if keep:
        out[:, keep] = np.linalg.solve(bbus[np.ix_(keep, keep)], bf[:, keep].T).T
    return out


def build_ptdf(grid: GridModel) -> np.ndarray:
    """PTDF matrix N of the AC transmission network.

    ``N[k, n]`` is the MW flow on AC line ``k`` (from -> to) caused by a 1 MW
    injection at transmission bus ``n`` withdrawn at the slack.  Columns follow
    ``grid.transmission_buses``.
    """
    x = np.array([ln.x for ln in grid.ac_lines], dtype=float)
    return _ptdf(
        grid.transmission_buses,
        [(ln.from_bus, ln.to_bus) for ln in grid.ac_lines],
        1.0 / x if len(x) else x,
        grid.slack,
    )


def build_modified_tf(grid: GridModel, ptdf: np.ndarray | None = None) -> np.ndarray:
    """Block-per-operator PTDF over all lines and all buses.

    Distribution buses copy the transmission-line sensitivities of their
    DSO's connection bus.  Each DSO block is a PTDF of the distribution
    network weighted by line susceptance, with the DSO reference feeder as
    slack.  HVDC rows are zero since their flows are controlled.
    """
    if ptdf is None:
        ptdf = build_ptdf(grid)
    n_ac = len(grid.ac_lines)
    tf = np.zeros((len(grid.lines), len(grid.buses)))
    bidx = grid.bus_index
    t_cols = [bidx[b] for b in grid.transmission_buses]
    t_pos = {b: k for k, b in enumerate(grid.transmission_buses)}
    tf[:n_ac, t_cols] = ptdf

    for d in grid.dsos:
        conns = grid.dso_connections(d)
        if not conns:
            raise GridError(f"DSO {d} has no connection point")
        nodes = grid.dso_buses(d)
        cols = [bidx[b] for b in nodes]
        tf[:n_ac, cols] = ptdf[:, [t_pos[conns[0].tso_bus]]]
        rows = [grid.line_index[ln.id] for ln in grid.dist_lines
                if grid.bus_by_id[ln.from_bus].dso == d]
        lines = [grid.lines[k] for k in rows]
        block = _ptdf(
            nodes,
            [(ln.from_bus, ln.to_bus) for ln in lines],
            np.array([ln.susceptance for ln in lines], dtype=float),
            grid.dso_reference(d),
        )
        tf[np.ix_(rows, cols)] = block
    return tf


def fit_loss_linearization(r: float, capacity: float, segments: int = 2) -> list[tuple[float, float]]:
    """Least-squares piecewise-linear fit of ``w = r f**2`` on ``|f| <= capacity``.

    The interval ``[0, capacity]`` is split into ``segments`` equal pieces and a
    line ``M f + Q`` is fitted to each piece in the continuous L2 sense.  The
    modelled loss is the max over segments of ``M |f| + Q``.

    On ``[a, b]`` the normal equations have the closed form below; for the
    single segment ``[0, F]`` this gives ``M = r F`` and ``Q = -r F**2 / 6``.
    """
    if r < 0 or capacity <= 0 or segments < 1:
        raise ValueError("need r >= 0, capacity > 0 and segments >= 1")
    if r == 0:
        return [(0.0, 0.0)] * segments
    edges = np.linspace(0.0, capacity, segments + 1)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        # best affine fit of f^2 on [a, b]: slope a + b, intercept -(a^2 + 4ab + b^2) / 6
        m = r * (a + b)
        q = -r * (a * a + 4.0 * a * b + b * b) / 6.0
        out.append((float(m), float(q)))
    return out


def loss_coefficients(grid: GridModel, segments: int = 2) -> list[list[tuple[float, float]]]:
    """Per-line loss segments in MW, i.e. fitted to ``(r / base) f**2``."""
    return [
        fit_loss_linearization(ln.r / grid.base_mva, ln.capacity, segments)
        for ln in grid.lines
    ]


def build_loss_distribution(grid: GridModel) -> np.ndarray:
    """Matrix D (buses x lines) sending half of each line's losses to each end."""
    d = np.zeros((len(grid.buses), len(grid.lines)))
    bidx = grid.bus_index
    for k, ln in enumerate(grid.lines):
        d[bidx[ln.from_bus], k] = 0.5
        d[bidx[ln.to_bus], k] = 0.5
    return d


def pair_distance(grid: GridModel, matrix: np.ndarray, bus_a: str, bus_b: str) -> float:
    """Resistance-weighted L1 distance between two bus columns of a PTDF-like matrix.

    ``matrix`` is either the transmission PTDF (AC lines x transmission buses)
    or the modified TF matrix (all lines x all buses).
    """
    if matrix.shape == (len(grid.lines), len(grid.buses)):
        cols = grid.bus_index
        r = grid.line_resistances
    elif matrix.shape == (len(grid.ac_lines), len(grid.transmission_buses)):
        cols = {b: k for k, b in enumerate(grid.transmission_buses)}
        r = np.array([ln.r for ln in grid.ac_lines], dtype=float)
    else:
        raise ValueError(f"matrix of shape {matrix.shape} does not match the grid")
    for b in (bus_a, bus_b):
        if b not in cols:
            raise KeyError(f"unknown bus {b!r}")
    return float(np.abs(matrix[:, cols[bus_a]] - matrix[:, cols[bus_b]]) @ r)
