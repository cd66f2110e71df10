"""Joint energy / grid / loss market clearing as one convex program.

The program minimises the agents' total cost subject to every actor's
feasible set and the market coupling rows.  Row signs are chosen so that the
backend's equality duals read directly as market prices and satisfy::

    pi_i = tau_t[ij] + tau_z[ij]          (trade stationarity)
    pi_i = tau_z[ij] + tau_l[ij]          (trade-loss stationarity)
    tau_z[ij] = sum_k N[k, n(i)] phi[k]   (TSO agents)
    tau_z[ij] = eta[r(i)]                 (DSO agents)
    tau_e[c]  = sum_k N[k, n(c)] phi[k] = eta[feeder(c)]

Row conventions (``y`` is the dual of each row, Lagrangian ``f + y * row``)::

    balance[i]      sum_j (t_ij + w_ij) - p_i = 0          : pi
    reciprocity     -t_ij - t_ji = 0                        : tau_t
    injection[ij]   z_ij - t_ij - w_ij = 0                  : tau_z
    loss_alloc[ij]  sum_l A[ij, l] w_l - w_ij = 0           : tau_l
    exchange[c]     e_d - e_t = 0                           : tau_e
    reactive[r]     sum out f_q - sum in f_q - sum q_i = 0  : lam
    ptdf[k]         f_k - sum_n N[k, n] inj_n = 0           : phi
    dso_balance[r]  -(sum z + sum e_d - out f_p - D w) = 0  : eta

``e`` is the power sent from the TSO into a DSO at connection ``c``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import solverback as sb
from .agents import Agent, TradeGraph, cost_value_and_gradient
from .grid import DISTRIBUTION, TSO, DistLine, GridModel, HvdcLine, build_loss_distribution, build_ptdf, loss_coefficients
from .policy import AllocationMatrix

log = logging.getLogger(__name__)

POLYGON, NATIVE = "polygon", "native"


class ClearingError(ValueError):
    pass


@dataclass(frozen=True)
class ClearingOptions:
    grid: bool = True
    losses: bool = True
    soc_mode: str = POLYGON
    cuts: int = 16
    loss_segments: int = 2

    def __post_init__(self):
        if self.losses and not self.grid:
            raise ClearingError("losses need line flows; use losses=False with grid=False")
        if self.soc_mode not in (POLYGON, NATIVE):
            raise ClearingError(f"unknown SOC mode {self.soc_mode!r}")
        if self.loss_segments < 1:
            raise ClearingError("loss_segments must be >= 1")


def agent_actor(agent_id: str) -> str:
    return f"agent:{agent_id}"


def operator_actor(so: str) -> str:
    return TSO if so == TSO else f"DSO:{so}"


class _Builder:
    def __init__(self):
        self.lb, self.ub, self.lin, self.quad, self.owner = [], [], [], [], []
        self.vars: dict[str, dict] = {}
        self.eq: list[tuple[dict, float]] = []
        self.eq_rows: dict[str, dict] = {}
        self.ineq: list[tuple[dict, float]] = []
        self.ineq_rows: dict[str, dict] = {}
        self.discs: list[tuple[int, int, float]] = []
        self.disc_keys: list = []

    def var(self, family, key, owner, lb=-np.inf, ub=np.inf, lin=0.0, quad=0.0):
        k = len(self.lb)
        self.vars.setdefault(family, {})[key] = k
        self.lb.append(lb)
        self.ub.append(ub)
        self.lin.append(lin)
        self.quad.append(quad)
        self.owner.append(owner)
        return k

    def row(self, family, key, coefs, rhs=0.0):
        self.eq_rows.setdefault(family, {})[key] = len(self.eq)
        self.eq.append((coefs, rhs))

    def le(self, family, key, coefs, rhs):
        self.ineq_rows.setdefault(family, {})[key] = len(self.ineq)
        self.ineq.append((coefs, rhs))

    def program(self) -> sb.ConicProgram:
        n = len(self.lb)

        def dense(rows):
            m = np.zeros((len(rows), n))
            for r, (coefs, _) in enumerate(rows):
                for j, v in coefs.items():
                    m[r, j] += v
            return m, np.array([rhs for _, rhs in rows], dtype=float)

        A, b = dense(self.eq)
        G, h = dense(self.ineq)
        return sb.ConicProgram(
            P=np.diag(self.quad), c=np.array(self.lin, dtype=float), A=A, b=b, G=G, h=h,
            lb=np.array(self.lb, dtype=float), ub=np.array(self.ub, dtype=float),
            discs=list(self.discs),
        )


@dataclass
class ClearingProblem:
    program: sb.ConicProgram
    vars: dict[str, dict]
    eq_rows: dict[str, dict]
    ineq_rows: dict[str, dict]
    disc_keys: list
    owner: list[str]
    grid: GridModel
    agents: list[Agent]
    trade_graph: TradeGraph
    allocation: AllocationMatrix | None
    options: ClearingOptions
    ptdf: np.ndarray | None = None
    loss_segments: list = field(default_factory=list)

    def index(self, family: str) -> np.ndarray:
        return np.array(list(self.vars.get(family, {}).values()), dtype=int)

    def keys(self, family: str) -> list:
        return list(self.vars.get(family, {}).keys())

    @property
    def agent_by_id(self) -> dict[str, Agent]:
        return {a.id: a for a in self.agents}

    @property
    def actors(self) -> list[str]:
        return list(dict.fromkeys(self.owner))


@dataclass
class ClearingSolution:
    status: str
    objective: float
    problem: ClearingProblem
    result: sb.SolveResult | None
    primal: dict[str, dict] = field(default_factory=dict)
    dual: dict[str, dict] = field(default_factory=dict)
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == sb.OPTIMAL

    def value(self, family: str, key):
        return self.primal[family][key]

    def values(self, family: str) -> np.ndarray:
        return np.array(list(self.primal.get(family, {}).values()), dtype=float)


def _check_allocation(a: AllocationMatrix, n_trades: int, n_lines: int):
    if a.values.shape != (n_trades, n_lines):
        raise ClearingError(f"allocation matrix shape {a.values.shape} != ({n_trades}, {n_lines})")
    if a.values.size and a.values.min() < -1e-12:
        raise ClearingError("allocation matrix has negative entries")
    sums = a.values.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9).tolist()
        raise ClearingError(f"allocation columns {bad} do not sum to 1 (loss conservation)")


def assemble(grid: GridModel, agents, trade_graph: TradeGraph, allocation: AllocationMatrix | None = None,
             options: ClearingOptions | None = None) -> ClearingProblem:
    """Build the clearing program for a validated market."""
    options = options or ClearingOptions()
    agents = list(agents)
    amap = {a.id: a for a in agents}
    trades = trade_graph.trades
    n_lines = len(grid.lines)
    for i, j in trades:
        if i not in amap or j not in amap:
            raise ClearingError(f"trade ({i}, {j}) references an unknown agent")
    for a in agents:
        if a.bus not in grid.bus_by_id:
            raise ClearingError(f"agent {a.id} sits at unknown bus {a.bus}")
    if options.losses:
        if allocation is None:
            raise ClearingError("losses on but no allocation matrix given")
        _check_allocation(allocation, len(trades), n_lines)

    bus = grid.bus_by_id
    so_of = {a.id: bus[a.bus].so for a in agents}
    B = _Builder()

    # -- prosumers ---------------------------------------------------------
    for a in agents:
        actor = agent_actor(a.id)
        B.var("p", a.id, actor, a.p_min, a.p_max, lin=a.cost_b, quad=2.0 * a.cost_a)
        B.var("q", a.id, actor, a.q_min, a.q_max)
    for k, (i, j) in enumerate(trades):
        B.var("t", (i, j), agent_actor(i))
    if options.losses:
        for i, j in trades:
            B.var("w", (i, j), agent_actor(i))
    for i, j in trades:
        B.var("z", (i, j), operator_actor(so_of[i]))

    V = B.vars
    for a in agents:
        coefs = {V["p"][a.id]: -1.0}
        for j in trade_graph.partners.get(a.id, ()):
            coefs[V["t"][(a.id, j)]] = 1.0
            if options.losses:
                coefs[V["w"][(a.id, j)]] = 1.0
        B.row("balance", a.id, coefs)
    for i, j in trade_graph.pairs:
        B.row("reciprocity", (i, j), {V["t"][(i, j)]: -1.0, V["t"][(j, i)]: -1.0})
    for tr in trades:
        coefs = {V["z"][tr]: 1.0, V["t"][tr]: -1.0}
        if options.losses:
            coefs[V["w"][tr]] = -1.0
        B.row("injection", tr, coefs)

    ptdf = None
    segs = []
    if options.grid:
        ptdf = build_ptdf(grid)
        D = build_loss_distribution(grid)
        segs = loss_coefficients(grid, options.loss_segments)
        lossy = [k for k in range(n_lines) if any(m or q for m, q in segs[k])] if options.losses else []

        # -- transmission variables ------------------------------------------
        for ln in grid.ac_lines:
            B.var("f_ac", ln.id, TSO, -ln.capacity, ln.capacity)
        for ln in grid.hvdc_lines:
            B.var("f_dc", ln.id, TSO, -ln.capacity, ln.capacity)
        for c in grid.connections:
            B.var("e_t", c.id, TSO)
            B.var("e_d", c.id, operator_actor(c.dso))
        for k in lossy:
            B.var("w_line", grid.lines[k].id, operator_actor(grid.line_owner(k)), 0.0)
        for ln in grid.dist_lines:
            actor = operator_actor(bus[ln.from_bus].dso)
            B.var("f_p", ln.id, actor)
            B.var("f_q", ln.id, actor)
        for d in grid.dsos:
            ref = grid.dso_reference(d)
            for r in grid.dso_buses(d):
                b = bus[r]
                if r == ref:
                    B.var("theta", r, operator_actor(d), 0.0, 0.0)
                else:
                    B.var("theta", r, operator_actor(d), b.theta_min, b.theta_max)
                B.var("v", r, operator_actor(d), b.v_min, b.v_max)

        # -- market coupling rows ---------------------------------------------
        if options.losses:
            for tr in trades:
                coefs = {V["w"][tr]: -1.0}
                k_tr = trade_graph.trade_index[tr]
                for k in lossy:
                    val = allocation.values[k_tr, k]
                    if val:
                        coefs[V["w_line"][grid.lines[k].id]] = val
                B.row("loss_alloc", tr, coefs)
        for c in grid.connections:
            B.row("exchange", c.id, {V["e_d"][c.id]: 1.0, V["e_t"][c.id]: -1.0})
        agents_at = {}
        for a in agents:
            agents_at.setdefault(a.bus, []).append(a.id)
        for r in grid.distribution_buses:
            coefs = {}
            for ln in grid.dist_lines:
                if ln.from_bus == r:
                    coefs[V["f_q"][ln.id]] = coefs.get(V["f_q"][ln.id], 0.0) + 1.0
                if ln.to_bus == r:
                    coefs[V["f_q"][ln.id]] = coefs.get(V["f_q"][ln.id], 0.0) - 1.0
            for i in agents_at.get(r, []):
                coefs[V["q"][i]] = -1.0
            B.row("reactive", r, coefs)

        # -- TSO: PTDF flows ---------------------------------------------------
        t_pos = {b: k for k, b in enumerate(grid.transmission_buses)}
        inj = {n: {} for n in grid.transmission_buses}

        def add(n, j, v):
            inj[n][j] = inj[n].get(j, 0.0) + v

        for tr in trades:
            if bus[amap[tr[0]].bus].level != DISTRIBUTION:
                add(amap[tr[0]].bus, V["z"][tr], 1.0)
        for ln in grid.hvdc_lines:
            add(ln.from_bus, V["f_dc"][ln.id], -1.0)
            add(ln.to_bus, V["f_dc"][ln.id], 1.0)
        for c in grid.connections:
            add(c.tso_bus, V["e_t"][c.id], -1.0)
        bidx = grid.bus_index
        for k in lossy:
            ln = grid.lines[k]
            for end in (ln.from_bus, ln.to_bus):
                if bus[end].level != DISTRIBUTION:
                    add(end, V["w_line"][ln.id], -D[bidx[end], k])
        for kk, ln in enumerate(grid.ac_lines):
            coefs = {V["f_ac"][ln.id]: 1.0}
            for n, terms in inj.items():
                nk = ptdf[kk, t_pos[n]]
                if nk == 0.0:
                    continue
                for j, v in terms.items():
                    coefs[j] = coefs.get(j, 0.0) - nk * v
            B.row("ptdf", ln.id, coefs)

        # -- DSO: linearised AC flows and nodal balances ------------------------
        base = grid.base_mva
        for ln in grid.dist_lines:
            th_r, th_s = V["theta"][ln.from_bus], V["theta"][ln.to_bus]
            v_r, v_s = V["v"][ln.from_bus], V["v"][ln.to_bus]
            bb, gg, bs = base * ln.susceptance, base * ln.conductance, base * ln.susceptance_star
            B.row("flow_p", ln.id, {V["f_p"][ln.id]: 1.0, th_r: -bb, th_s: bb, v_r: gg, v_s: -gg})
            B.row("flow_q", ln.id, {V["f_q"][ln.id]: 1.0, v_r: -bs, v_s: bs, th_r: -gg, th_s: gg},
                  -base * ln.b0)
        for r in grid.distribution_buses:
            coefs = {}
            for tr in trades:
                if amap[tr[0]].bus == r:
                    coefs[V["z"][tr]] = -1.0
            for c in grid.connections:
                if c.feeder_bus == r:
                    coefs[V["e_d"][c.id]] = -1.0
            for ln in grid.dist_lines:
                if ln.from_bus == r:
                    coefs[V["f_p"][ln.id]] = coefs.get(V["f_p"][ln.id], 0.0) + 1.0
                if ln.to_bus == r:
                    coefs[V["f_p"][ln.id]] = coefs.get(V["f_p"][ln.id], 0.0) - 1.0
            for k in lossy:
                if D[bidx[r], k]:
                    j = V["w_line"][grid.lines[k].id]
                    coefs[j] = coefs.get(j, 0.0) + D[bidx[r], k]
            B.row("dso_balance", r, coefs)

        # -- losses: w_l >= +/- M_s f_l + Q_s ------------------------------------
        for k in lossy:
            ln = grid.lines[k]
            if isinstance(ln, DistLine):
                fj = V["f_p"][ln.id]
            elif isinstance(ln, HvdcLine):
                fj = V["f_dc"][ln.id]
            else:
                fj = V["f_ac"][ln.id]
            wj = V["w_line"][ln.id]
            for s, (m, q) in enumerate(segs[k]):
                B.le("loss", (ln.id, s, +1), {fj: m, wj: -1.0}, -q)
                B.le("loss", (ln.id, s, -1), {fj: -m, wj: -1.0}, -q)

        # -- apparent-power limits -----------------------------------------------
        for ln in grid.dist_lines:
            B.discs.append((V["f_p"][ln.id], V["f_q"][ln.id], ln.capacity))
            B.disc_keys.append(ln.id)

    program = B.program()
    return ClearingProblem(
        program=program, vars=B.vars, eq_rows=B.eq_rows, ineq_rows=B.ineq_rows,
        disc_keys=B.disc_keys, owner=B.owner, grid=grid, agents=agents,
        trade_graph=trade_graph, allocation=allocation if options.losses else None,
        options=options, ptdf=ptdf, loss_segments=segs,
    )


def prepare_program(problem: ClearingProblem, backend) -> sb.ConicProgram:
    """Program as handed to ``backend``: discs polygonalized unless native."""
    if problem.options.soc_mode == NATIVE and getattr(backend, "native_cones", False):
        return problem.program
    if problem.options.soc_mode == NATIVE:
        log.warning("backend %s has no native cones; using %d-gon cuts", backend.name, problem.options.cuts)
    return sb.polygonalize_cones(problem.program, problem.options.cuts)


def solution_from_result(problem: ClearingProblem, program: sb.ConicProgram, res: sb.SolveResult,
                         solve_time: float = 0.0) -> ClearingSolution:
    """Map a backend result onto named primal and dual families."""
    sol = ClearingSolution(res.status, res.objective, problem, res, solve_time=solve_time,
                           info=dict(res.info, iterations=res.iterations))
    if res.status != sb.OPTIMAL:
        return sol
    x = res.x
    sol.primal = {fam: {k: float(x[j]) for k, j in idx.items()} for fam, idx in problem.vars.items()}
    eq = problem.eq_rows
    names = {
        "balance": "pi", "reciprocity": "tau_t", "injection": "tau_z", "loss_alloc": "tau_l",
        "exchange": "tau_e", "reactive": "lam", "ptdf": "phi", "dso_balance": "eta",
        "flow_p": "eta_p", "flow_q": "eta_q",
    }
    for fam, rows in eq.items():
        sol.dual[names[fam]] = {k: float(res.y[r]) for k, r in rows.items()}
    # the reciprocity price is shared by both directions of a pair
    tau_t = {}
    for (i, j), v in sol.dual.get("tau_t", {}).items():
        tau_t[(i, j)] = tau_t[(j, i)] = v
    sol.dual["tau_t"] = {tr: tau_t[tr] for tr in problem.trade_graph.trades}
    if "f_ac" in problem.vars:
        idx = problem.vars["f_ac"]
        sol.dual["mu_lo"] = {k: float(res.z_lb[j]) for k, j in idx.items()}
        sol.dual["mu_hi"] = {k: float(res.z_ub[j]) for k, j in idx.items()}
    if "loss" in problem.ineq_rows:
        sol.dual["loss"] = {k: float(res.z[r]) for k, r in problem.ineq_rows["loss"].items()}
    if problem.disc_keys:
        if program.cut_rows:
            groups = program.cut_rows[-len(problem.disc_keys):]
            sol.dual["eta_s"] = {k: float(res.z[g].sum()) for k, g in zip(problem.disc_keys, groups)}
        else:
            sol.dual["eta_s"] = {k: float(d) for k, d in zip(problem.disc_keys, res.disc_duals)}
    for fam in ("theta", "v"):
        if fam in problem.vars:
            idx = problem.vars[fam]
            sol.dual[f"eta_{fam}_lo"] = {k: float(res.z_lb[j]) for k, j in idx.items()}
            sol.dual[f"eta_{fam}_hi"] = {k: float(res.z_ub[j]) for k, j in idx.items()}
    return sol


def solve(problem: ClearingProblem, backend=None) -> ClearingSolution:
    """Solve the clearing program and return named primal and dual values."""
    backend = backend or sb.ReferenceBackend()
    program = prepare_program(problem, backend)
    t0 = time.perf_counter()
    res = backend.solve(program)
    elapsed = time.perf_counter() - t0
    if res.status != sb.OPTIMAL:
        log.warning("clearing ended with status %s (%s)", res.status, res.info)
    return solution_from_result(problem, program, res, elapsed)


def clear(grid, agents, trade_graph, allocation=None, options=None, backend=None) -> ClearingSolution:
    return solve(assemble(grid, agents, trade_graph, allocation, options), backend)


@dataclass
class PriceTables:
    pi: dict
    tau_t: dict
    tau_z: dict
    tau_l: dict
    tau_e: dict
    lam: dict


def extract_prices(solution: ClearingSolution) -> PriceTables:
    """Trade, grid, loss, exchange, reactive and perceived prices."""
    if not solution.optimal:
        raise ClearingError(f"no prices for a {solution.status} clearing")
    d = solution.dual
    return PriceTables(
        pi=dict(d["pi"]), tau_t=dict(d["tau_t"]), tau_z=dict(d["tau_z"]),
        tau_l=dict(d.get("tau_l", {})), tau_e=dict(d.get("tau_e", {})), lam=dict(d.get("lam", {})),
    )


@dataclass
class KktReport:
    residuals: dict[str, float]
    tol: float

    @property
    def ok(self) -> bool:
        return all(v <= self.tol for v in self.residuals.values())

    def violations(self) -> dict[str, float]:
        return {k: v for k, v in self.residuals.items() if v > self.tol}


def verify_kkt(solution: ClearingSolution, tol: float = 1e-6, interior_margin: float = 1e-5) -> KktReport:
    """Check the price identities and the program's KKT conditions.

    ``trade``: pi_i - tau_t - tau_z; ``trade_loss``: pi_i - tau_z - tau_l;
    ``grid_price``: tau_z - sum_k N phi (TSO) or - eta (DSO);
    ``exchange``: tau_e against the TSO-side and feeder prices;
    ``dispatch``: df/dp - pi for agents strictly inside their bounds.
    """
    if not solution.optimal:
        raise ClearingError(f"cannot verify a {solution.status} clearing")
    prob, d = solution.problem, solution.dual
    grid, amap = prob.grid, prob.agent_by_id
    res: dict[str, float] = {}

    def worst(vals):
        vals = list(vals)
        return float(max((abs(v) for v in vals), default=0.0))

    trades = prob.trade_graph.trades
    res["trade"] = worst(d["pi"][i] - d["tau_t"][(i, j)] - d["tau_z"][(i, j)] for i, j in trades)
    if "tau_l" in d:
        res["trade_loss"] = worst(d["pi"][i] - d["tau_z"][(i, j)] - d["tau_l"][(i, j)] for i, j in trades)
    if "phi" in d or "eta" in d:
        phi = np.array([d["phi"][ln.id] for ln in grid.ac_lines]) if grid.ac_lines else np.zeros(0)
        t_pos = {b: k for k, b in enumerate(grid.transmission_buses)}

        def tso_price(n):
            return float(prob.ptdf[:, t_pos[n]] @ phi) if len(phi) else 0.0

        gaps = []
        for i, j in trades:
            b = grid.bus_by_id[amap[i].bus]
            ref = d["eta"][b.id] if b.level == DISTRIBUTION else tso_price(b.id)
            gaps.append(d["tau_z"][(i, j)] - ref)
        res["grid_price"] = worst(gaps)
        if grid.connections:
            res["exchange"] = worst(
                v for c in grid.connections
                for v in (d["tau_e"][c.id] - tso_price(c.tso_bus), d["tau_e"][c.id] - d["eta"][c.feeder_bus])
            )
    gaps = []
    for a in prob.agents:
        p = solution.primal["p"][a.id]
        span = a.p_max - a.p_min
        if span > 0 and a.p_min + interior_margin * (1 + span) < p < a.p_max - interior_margin * (1 + span):
            gaps.append(cost_value_and_gradient(a, p)[1] - d["pi"][a.id])
    res["dispatch"] = worst(gaps)

    if solution.result is not None:
        program = prepare_program(prob, _NativeProbe(solution.result))
        kkt = sb.kkt_residuals(program, solution.result)
        res["stationarity"] = kkt["stationarity"]
        res["primal_feasibility"] = kkt["primal"]
        res["complementarity"] = kkt["complementarity"]
    return KktReport(res, tol)


class _NativeProbe:
    """Tells ``prepare_program`` whether the stored result used native discs."""

    name = "probe"

    def __init__(self, result: sb.SolveResult):
        self.native_cones = result.disc_duals.size > 0


def objective_check(solution: ClearingSolution) -> float:
    """|objective - sum_i f_i(p_i)|: the program carries no other cost terms."""
    total = sum(cost_value_and_gradient(a, solution.primal["p"][a.id])[0] for a in solution.problem.agents)
    return abs(solution.objective - total)
