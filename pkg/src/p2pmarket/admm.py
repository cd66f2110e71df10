"""Decentralised clearing by sharing ADMM over the market coupling rows.

Actors are the prosumers, the TSO and every DSO; each owns a block of the
clearing variables.  An equality row touching variables of more than one
actor is a coupling row ``sum_a B_a x_a = b``; all other rows stay inside the
owning actor's subproblem.  One synchronous round:

1. every actor solves ``min f_a(x_a) + rho/2 sum_r w_r (B_ar x_a - v_ar)^2``
   over its own feasible set, where ``v_ar = d_ar - u_r``;
2. the contributions ``c_ar = B_ar x_a`` are projected onto the coupling
   hyperplane, ``d_ar = c_ar - (sum_a c_ar - b_r) / N_r``;
3. the scaled duals are updated, ``u_r += (sum_a c_ar - b_r) / N_r``.

Prices are ``y_r = rho w_r u_r`` with the same sign convention as the
centralised clearing.  The primal residual is ``||sum_a c_a - b||_2`` and
the dual residual ``rho ||d^{k+1} - d^k||_2``.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import solverback as sb
from .clearing import ClearingProblem, ClearingSolution, prepare_program, solution_from_result

log = logging.getLogger(__name__)


class AdmmError(RuntimeError):
    pass


@dataclass
class _Actor:
    name: str
    idx: np.ndarray
    eq_rows: np.ndarray
    ineq_rows: np.ndarray
    discs: list
    coupling: list  # (row position in the coupling list, coefficient vector over idx)
    last: sb.SolveResult | None = None


@dataclass
class NegotiationState:
    rho: float
    contributions: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]
    u: np.ndarray
    iteration: int = 0
    primal_history: list[float] = field(default_factory=list)
    dual_history: list[float] = field(default_factory=list)
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.rho <= 0:
            raise AdmmError("rho must be positive")


@dataclass
class AdmmResult:
    solution: ClearingSolution
    state: NegotiationState
    converged: bool
    elapsed: float

    @property
    def iterations(self) -> int:
        return self.state.iteration

    def write_log(self, path) -> None:
        write_log(self.state, path)


def residuals(state: NegotiationState) -> tuple[float, float]:
    """Latest (primal, dual) residual norms; zeros before the first round."""
    if not state.primal_history:
        return 0.0, 0.0
    return state.primal_history[-1], state.dual_history[-1]


def write_log(state: NegotiationState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "primal", "dual", "objective"])
        for k, (p, d, o) in enumerate(zip(state.primal_history, state.dual_history, state.objective_history), 1):
            w.writerow([k, f"{p:.10g}", f"{d:.10g}", f"{o:.10g}"])


def _partition(program: sb.ConicProgram, owner: list[str]):
    owners = np.array(owner)
    names = list(dict.fromkeys(owner))
    col = {n: np.flatnonzero(owners == n) for n in names}
    eq_local = {n: [] for n in names}
    coupling_rows = []
    for r in range(program.A.shape[0]):
        who = set(owners[np.flatnonzero(program.A[r])])
        if len(who) > 1:
            coupling_rows.append(r)
        elif who:
            eq_local[who.pop()].append(r)
        elif abs(program.b[r]) > 1e-12:
            raise AdmmError(f"empty equality row {r} with nonzero right-hand side")
    ineq_local = {n: [] for n in names}
    for r in range(program.G.shape[0]):
        who = set(owners[np.flatnonzero(program.G[r])])
        if len(who) > 1:
            raise AdmmError(f"inequality row {r} couples actors {sorted(who)}")
        if who:
            ineq_local[who.pop()].append(r)
    discs = {n: [] for n in names}
    pos = {n: {int(j): k for k, j in enumerate(col[n])} for n in names}
    for i, j, rad in program.discs:
        a = owners[i]
        if owners[j] != a:
            raise AdmmError("a disc couples two actors")
        discs[a].append((pos[a][i], pos[a][j], rad))
    actors = []
    for n in names:
        coup = []
        for k, r in enumerate(coupling_rows):
            coef = program.A[r, col[n]]
            if np.any(coef):
                coup.append((k, coef))
        actors.append(_Actor(n, col[n], np.array(eq_local[n], dtype=int), np.array(ineq_local[n], dtype=int),
                             discs[n], coup))
    return actors, np.array(coupling_rows, dtype=int)


def _local_program(program, actor: _Actor, rho, weights, targets) -> sb.ConicProgram:
    idx = actor.idx
    P = program.P[np.ix_(idx, idx)].copy()
    c = program.c[idx].copy()
    for (k, coef), v in zip(actor.coupling, targets):
        rw = rho * weights[k]
        P += rw * np.outer(coef, coef)
        c -= rw * v * coef
    return sb.ConicProgram(
        P=P, c=c,
        A=program.A[np.ix_(actor.eq_rows, idx)] if len(actor.eq_rows) else np.zeros((0, len(idx))),
        b=program.b[actor.eq_rows],
        G=program.G[np.ix_(actor.ineq_rows, idx)] if len(actor.ineq_rows) else np.zeros((0, len(idx))),
        h=program.h[actor.ineq_rows],
        lb=program.lb[idx], ub=program.ub[idx], discs=list(actor.discs),
    )


def family_weights(problem: ClearingProblem, rows: np.ndarray, family_rho: dict[str, float] | None) -> np.ndarray:
    """Per-row penalty multipliers from per-family settings (default 1)."""
    if not family_rho:
        return np.ones(len(rows))
    fam_of = {}
    for fam, keyed in problem.eq_rows.items():
        for r in keyed.values():
            fam_of[r] = fam
    return np.array([family_rho.get(fam_of.get(int(r), ""), 1.0) for r in rows], dtype=float)


def run(problem: ClearingProblem, rho: float = 1.0, max_iter: int = 5000, eps_primal: float = 1e-5,
        eps_dual: float = 1e-5, backend=None, workers: int = 1, family_rho: dict[str, float] | None = None,
        callback=None) -> AdmmResult:
    """Negotiate the clearing by synchronous ADMM rounds.

    Returns the consensus solution even when ``max_iter`` is hit; the result
    is then flagged ``converged=False`` and the solution info carries
    ``"converged": False``.
    """
    if rho <= 0:
        raise AdmmError("rho must be positive")
    backend = backend or sb.ReferenceBackend()
    program = prepare_program(problem, backend)
    actors, rows = _partition(program, problem.owner)
    b = program.b[rows]
    weights = family_weights(problem, rows, family_rho)
    n_share = np.zeros(len(rows))
    for a in actors:
        for k, _ in a.coupling:
            n_share[k] += 1
    state = NegotiationState(
        rho=rho,
        contributions={a.name: np.zeros(len(a.coupling)) for a in actors},
        targets={a.name: np.zeros(len(a.coupling)) for a in actors},
        u=np.zeros(len(rows)),
    )
    x = np.zeros(program.n)
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def local(actor):
        ks = [k for k, _ in actor.coupling]
        v = state.targets[actor.name] - state.u[ks]
        return backend.solve(_local_program(program, actor, rho, weights, v))

    converged = False
    try:
        for it in range(1, max_iter + 1):
            results = list(pool.map(local, actors)) if pool else [local(a) for a in actors]
            total = -b.copy()
            for a, res in zip(actors, results):
                if res.status != sb.OPTIMAL:
                    raise AdmmError(f"subproblem of {a.name} ended {res.status} at iteration {it}")
                a.last = res
                x[a.idx] = res.x
                contrib = np.array([coef @ res.x for _, coef in a.coupling])
                state.contributions[a.name] = contrib
                for (k, _), v in zip(a.coupling, contrib):
                    total[k] += v
            share = total / n_share
            dual_sq = 0.0
            for a in actors:
                ks = [k for k, _ in a.coupling]
                d_new = state.contributions[a.name] - share[ks]
                dual_sq += float(np.sum((weights[ks] * (d_new - state.targets[a.name])) ** 2))
                state.targets[a.name] = d_new
            state.u += share
            state.iteration = it
            r_p, r_d = float(np.linalg.norm(total)), rho * float(np.sqrt(dual_sq))
            state.primal_history.append(r_p)
            state.dual_history.append(r_d)
            state.objective_history.append(program.objective(x))
            if callback is not None:
                callback(state)
            if r_p <= eps_primal and r_d <= eps_dual:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    elapsed = time.perf_counter() - t0
    if not converged:
        log.warning("ADMM stopped after %d rounds without convergence (primal %.3g, dual %.3g)",
                    state.iteration, *residuals(state))
    return AdmmResult(_assemble_solution(problem, program, actors, rows, weights, state, x, converged, elapsed),
                      state, converged, elapsed)


def _assemble_solution(problem, program, actors, rows, weights, state, x, converged, elapsed):
    y = np.zeros(program.A.shape[0])
    z = np.zeros(program.G.shape[0])
    z_lb, z_ub = np.zeros(program.n), np.zeros(program.n)
    y[rows] = state.rho * weights * state.u
    discs = np.zeros(len(program.discs))
    disc_pos = {(i, j): k for k, (i, j, _) in enumerate(program.discs)}
    for a in actors:
        res = a.last
        if res is None:
            continue
        if len(a.eq_rows):
            y[a.eq_rows] = res.y
        if len(a.ineq_rows):
            z[a.ineq_rows] = res.z
        z_lb[a.idx] = res.z_lb
        z_ub[a.idx] = res.z_ub
        for (i, j, _), dv in zip(a.discs, res.disc_duals):
            discs[disc_pos[(int(a.idx[i]), int(a.idx[j]))]] = dv
    res = sb.SolveResult(sb.OPTIMAL, x.copy(), y, z, z_lb, z_ub, discs, program.objective(x),
                         state.iteration, {"converged": converged, "method": "admm"})
    return solution_from_result(problem, program, res, elapsed)
