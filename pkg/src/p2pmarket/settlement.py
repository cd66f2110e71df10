"""Payments, policy impact, loss shares, trading distances and line loadings.

Payment sign: ``C_i = -sum_j t_ij (tau_t + tau_z)``, so a buyer's payment is
positive and a seller's revenue is negative.  ``delta_pct`` is NaN when the
reference payment is zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clearing import ClearingSolution
from .grid import TSO, DistLine, GridModel, build_modified_tf, build_ptdf, pair_distance


class SettlementError(ValueError):
    pass


def _require(solution: ClearingSolution):
    if not solution.optimal:
        raise SettlementError(f"cannot settle a {solution.status} clearing")


def payments(solution: ClearingSolution) -> dict[str, float]:
    _require(solution)
    t, d = solution.primal["t"], solution.dual
    out = {a.id: 0.0 for a in solution.problem.agents}
    for (i, j), v in t.items():
        out[i] -= v * (d["tau_t"][(i, j)] + d["tau_z"][(i, j)])
    return out


def delta_payments(solution: ClearingSolution, reference: ClearingSolution,
                   atol: float = 1e-9) -> dict[str, tuple[float, float]]:
    """``(C_i - C0_i, 100 (C_i - C0_i) / |C0_i|)`` per agent (change and percent change).

    The ratio is NaN when ``|C0_i| <= atol`` (e.g. pure intermediaries).
    """
    c, c0 = payments(solution), payments(reference)
    if set(c) != set(c0):
        raise SettlementError("solutions cover different agents")
    out = {}
    for a in c:
        dc = c[a] - c0[a]
        out[a] = (dc, 100.0 * dc / abs(c0[a]) if abs(c0[a]) > atol else math.nan)
    return out


def allocated_losses(solution: ClearingSolution) -> dict[str, float]:
    """Sum of w_ij over each agent's trades (zero when losses are off)."""
    _require(solution)
    out = {a.id: 0.0 for a in solution.problem.agents}
    for (i, _), v in solution.primal.get("w", {}).items():
        out[i] += v
    return out


def traded_energy(solution: ClearingSolution) -> dict[str, float]:
    _require(solution)
    out = {a.id: 0.0 for a in solution.problem.agents}
    for (i, _), v in solution.primal["t"].items():
        out[i] += abs(v)
    return out


def weighted_distance(solution: ClearingSolution, grid: GridModel | None = None, matrix: np.ndarray | None = None,
                      threshold: float = 1e-9) -> dict[str, float]:
    """Traded-energy weighted resistance distance between trading partners.

    ``delta_i = sum_j |t_ij| d(i, j) / sum_j |t_ij|`` with
    ``d(i, j) = sum_l r_l |TF[l, n(i)] - TF[l, n(j)]|``.  Gross traded
    energy is used as the weight so that sellers and buyers both get a
    value.  Agents without traded energy get NaN.
    """
    _require(solution)
    grid = grid or solution.problem.grid
    if matrix is None:
        matrix = build_modified_tf(grid)
    amap = solution.problem.agent_by_id
    num, den = {a: 0.0 for a in amap}, {a: 0.0 for a in amap}
    for (i, j), v in solution.primal["t"].items():
        w = abs(v)
        num[i] += w * pair_distance(grid, matrix, amap[i].bus, amap[j].bus)
        den[i] += w
    return {a: num[a] / den[a] if den[a] > threshold else math.nan for a in amap}


def _dso_flows(grid: GridModel, dso: str, p_bus: dict, q_bus: dict) -> dict[str, tuple[float, float]]:
    """Linearised AC flows of one DSO for given nodal injections.

    The reference feeder has ``theta = 0`` and ``v = 1`` and absorbs the
    imbalance; every other bus balances its active and reactive injection.
    """
    buses = grid.dso_buses(dso)
    ref = grid.dso_reference(dso)
    lines = [ln for ln in grid.dist_lines if grid.bus_by_id[ln.from_bus].dso == dso]
    others = [b for b in buses if b != ref]
    if not others:
        return {}
    pos = {b: k for k, b in enumerate(others)}
    n = len(others)
    base = grid.base_mva
    # unknowns: theta (n), v - 1 (n); rows: active (n), reactive (n)
    m, rhs = np.zeros((2 * n, 2 * n)), np.zeros(2 * n)

    def coeffs(ln):
        bb, gg, bs = base * ln.susceptance, base * ln.conductance, base * ln.susceptance_star
        # f_p = bb dth - gg dv ; f_q = bs dv + gg dth - base b0
        return (bb, -gg), (gg, bs), -base * ln.b0

    for ln in lines:
        (pt, pv), (qt, qv), q0 = coeffs(ln)
        for bus, sign in ((ln.from_bus, 1.0), (ln.to_bus, -1.0)):
            if bus == ref:
                continue
            r = pos[bus]
            # net outflow at a bus equals its injection
            for end, s2 in ((ln.from_bus, 1.0), (ln.to_bus, -1.0)):
                if end == ref:
                    continue
                c = pos[end]
                m[r, c] += sign * s2 * pt
                m[r, n + c] += sign * s2 * pv
                m[n + r, c] += sign * s2 * qt
                m[n + r, n + c] += sign * s2 * qv
            rhs[n + r] -= sign * q0
    for b in others:
        rhs[pos[b]] += p_bus.get(b, 0.0)
        rhs[n + pos[b]] += q_bus.get(b, 0.0)
    sol = np.linalg.solve(m, rhs)
    th = {b: sol[pos[b]] for b in others} | {ref: 0.0}
    dv = {b: sol[n + pos[b]] for b in others} | {ref: 0.0}
    out = {}
    for ln in lines:
        (pt, pv), (qt, qv), q0 = coeffs(ln)
        dth, ddv = th[ln.from_bus] - th[ln.to_bus], dv[ln.from_bus] - dv[ln.to_bus]
        out[ln.id] = (pt * dth + pv * ddv, qt * dth + qv * ddv + q0)
    return out


def network_flows(solution: ClearingSolution) -> dict[str, tuple[float, float]]:
    """Per-line (active, reactive) flow.

    With the grid in the clearing these are the solved flows.  Otherwise the
    flows the cleared injections would cause are recomputed: PTDF flows on
    the transmission grid (HVDC links idle) and linearised AC flows in each
    DSO fed from its reference feeder.
    """
    _require(solution)
    prob, x = solution.problem, solution.primal
    grid = prob.grid
    if prob.options.grid:
        out = {ln.id: (x["f_ac"][ln.id], 0.0) for ln in grid.ac_lines}
        out |= {ln.id: (x["f_dc"][ln.id], 0.0) for ln in grid.hvdc_lines}
        out |= {ln.id: (x["f_p"][ln.id], x["f_q"][ln.id]) for ln in grid.dist_lines}
        return out
    p_bus, q_bus = {}, {}
    for a in prob.agents:
        p_bus[a.bus] = p_bus.get(a.bus, 0.0) + x["p"][a.id]
        q_bus[a.bus] = q_bus.get(a.bus, 0.0) + x["q"][a.id]
    out = {}
    inj = {b: p_bus.get(b, 0.0) for b in grid.transmission_buses}
    for d in grid.dsos:
        feeder_tso = grid.dso_connections(d)[0].tso_bus
        inj[feeder_tso] += sum(p_bus.get(b, 0.0) for b in grid.dso_buses(d))
        out |= _dso_flows(grid, d, p_bus, q_bus)
    ptdf = build_ptdf(grid)
    vec = np.array([inj[b] for b in grid.transmission_buses])
    flows = ptdf @ vec if len(grid.ac_lines) else np.zeros(0)
    out |= {ln.id: (float(f), 0.0) for ln, f in zip(grid.ac_lines, flows)}
    out |= {ln.id: (0.0, 0.0) for ln in grid.hvdc_lines}
    return {ln.id: out[ln.id] for ln in grid.lines}


def line_loading(solution: ClearingSolution, grid: GridModel | None = None) -> dict[str, float]:
    """|f| / F for transmission lines, sqrt(fp^2 + fq^2) / S for distribution lines."""
    grid = grid or solution.problem.grid
    flows = network_flows(solution)
    out = {}
    for ln in grid.lines:
        fp, fq = flows[ln.id]
        mag = math.hypot(fp, fq) if isinstance(ln, DistLine) else abs(fp)
        out[ln.id] = mag / ln.capacity
    return out


@dataclass
class MoneyLedger:
    agents: dict[str, float]
    operators: dict[str, float]

    @property
    def imbalance(self) -> float:
        return sum(self.agents.values()) + sum(self.operators.values())

    @property
    def relative_imbalance(self) -> float:
        scale = sum(abs(v) for v in self.agents.values()) + sum(abs(v) for v in self.operators.values())
        return abs(self.imbalance) / max(scale, 1e-12)


def money_ledger(solution: ClearingSolution) -> MoneyLedger:
    """Net market payments of every actor (positive = pays).

    Agents pay for trades, for their loss shares and for reactive power.
    Operators pay for the trade injections they take, for the line losses
    allocated to trades, and settle the exchange at each connection.
    """
    _require(solution)
    prob, x, d = solution.problem, solution.primal, solution.dual
    grid = prob.grid
    bus = grid.bus_by_id
    amap = prob.agent_by_id
    agents = {a: 0.0 for a in amap}
    ops = {so: 0.0 for so in grid.operators}
    for tr, t in x["t"].items():
        i = tr[0]
        agents[i] -= t * (d["tau_t"][tr] + d["tau_z"][tr])
        if "w" in x:
            agents[i] -= x["w"][tr] * (d["tau_z"][tr] + d["tau_l"][tr])
        ops[bus[amap[i].bus].so] += d["tau_z"][tr] * x["z"][tr]
    lam = d.get("lam", {})
    for a in prob.agents:
        if a.bus in lam:
            agents[a.id] -= lam[a.bus] * x["q"][a.id]
    if prob.allocation is not None and "w_line" in x:
        for tr, k_tr in prob.trade_graph.trade_index.items():
            for l_id, wl in x["w_line"].items():
                share = prob.allocation.values[k_tr, grid.line_index[l_id]]
                if share:
                    ops[grid.line_owner(grid.line_index[l_id])] += d["tau_l"][tr] * share * wl
    for c in grid.connections if "e_t" in x else ():
        ops[TSO] -= d["tau_e"][c.id] * x["e_t"][c.id]
        ops[c.dso] += d["tau_e"][c.id] * x["e_d"][c.id]
    for ln in grid.dist_lines if "f_q" in x else ():
        fq = x["f_q"][ln.id]
        ops[bus[ln.from_bus].dso] += lam.get(ln.from_bus, 0.0) * fq - lam.get(ln.to_bus, 0.0) * fq
    return MoneyLedger(agents, ops)


def operator_losses(solution: ClearingSolution) -> dict[str, float]:
    prob = solution.problem
    out = {so: 0.0 for so in prob.grid.operators}
    for l_id, wl in solution.primal.get("w_line", {}).items():
        out[prob.grid.line_owner(prob.grid.line_index[l_id])] += wl
    return out


def congestion_rent(solution: ClearingSolution) -> dict[str, float]:
    """Operator income from binding flow limits (bound duals times limits).

    For polygonal discs each active cut earns its dual times its support
    ``S cos(pi / cuts)``; for native discs the multiplier of
    ``fp^2 + fq^2 <= S^2`` earns ``eta S^2``.
    """
    prob, d = solution.problem, solution.dual
    grid = prob.grid
    out = {so: 0.0 for so in grid.operators}
    for ln in grid.ac_lines:
        out[TSO] += (d.get("mu_lo", {}).get(ln.id, 0.0) + d.get("mu_hi", {}).get(ln.id, 0.0)) * ln.capacity
    for ln in grid.dist_lines:
        eta = d.get("eta_s", {}).get(ln.id, 0.0)
        if eta:
            polygon = solution.result is not None and solution.result.disc_duals.size == 0
            scale = ln.capacity * math.cos(math.pi / prob.options.cuts) if polygon else ln.capacity ** 2
            out[grid.bus_by_id[ln.from_bus].dso] += eta * scale
    return out


@dataclass
class SettlementReport:
    agents: list[dict] = field(default_factory=list)
    operators: list[dict] = field(default_factory=list)
    lines: list[dict] = field(default_factory=list)
    trades: list[dict] = field(default_factory=list)
    money_imbalance: float = 0.0


def settle(solution: ClearingSolution, reference: ClearingSolution | None = None) -> SettlementReport:
    """Collect every per-agent, per-operator, per-line and per-trade quantity."""
    _require(solution)
    prob, x, d = solution.problem, solution.primal, solution.dual
    grid = prob.grid
    pay = payments(solution)
    delta = delta_payments(solution, reference) if reference is not None else \
        {a: (math.nan, math.nan) for a in pay}
    losses = allocated_losses(solution)
    dist = weighted_distance(solution)
    rep = SettlementReport()
    for a in prob.agents:
        rep.agents.append({
            "agent": a.id, "bus": a.bus, "payment": pay[a.id], "delta": delta[a.id][0],
            "delta_pct": delta[a.id][1], "losses": losses[a.id], "delta_distance": dist[a.id],
            "pi": d["pi"][a.id],
        })
    ledger = money_ledger(solution)
    rep.money_imbalance = ledger.relative_imbalance
    lo, rent = operator_losses(solution), congestion_rent(solution)
    for so in grid.operators:
        rep.operators.append({"operator": so, "losses": lo[so], "congestion_rent": rent[so],
                              "net_payment": ledger.operators[so]})
    flows, load = network_flows(solution), line_loading(solution)
    wl = x.get("w_line", {})
    for ln in grid.lines:
        fp, fq = flows[ln.id]
        rep.lines.append({"line": ln.id, "flow": fp, "flow_q": fq, "limit": ln.capacity,
                          "loading": load[ln.id], "loss": wl.get(ln.id, 0.0)})
    for tr, t in x["t"].items():
        rep.trades.append({
            "i": tr[0], "j": tr[1], "t": t, "w": x.get("w", {}).get(tr, 0.0), "z": x["z"][tr],
            "tau_t": d["tau_t"][tr], "tau_z": d["tau_z"][tr], "tau_l": d.get("tau_l", {}).get(tr, math.nan),
        })
    return rep
