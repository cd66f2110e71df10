"""Convex QP backends with dual extraction.

Program form::

    min  1/2 x'Px + c'x + c0
    s.t. A x = b            : y   (free)
         G x <= h           : z   (>= 0)
         lb <= x <= ub      : z_lb, z_ub (>= 0)
         x_i^2 + x_j^2 <= r^2   for each disc (i, j, r)

Duals follow the Lagrangian ``f + y'(Ax - b) + z'(Gx - h) + z_ub'(x - ub)
+ z_lb'(lb - x)``, so stationarity reads ``Px + c + A'y + G'z + z_ub - z_lb = 0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


class SolverError(RuntimeError):
    pass


@dataclass
class ConicProgram:
    P: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    discs: list[tuple[int, int, float]] = field(default_factory=list)
    c0: float = 0.0
    # G rows produced by polygonalize_cones, one index array per former disc
    cut_rows: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.c)
        self.P = np.asarray(self.P, dtype=float).reshape(n, n)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.h = np.asarray(self.h, dtype=float).ravel()
        self.lb = np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.asarray(self.ub, dtype=float).ravel()
        if len(self.b) != self.A.shape[0] or len(self.h) != self.G.shape[0]:
            raise ValueError("constraint right-hand sides do not match row counts")
        if len(self.lb) != n or len(self.ub) != n:
            raise ValueError("bounds do not match the number of variables")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound above upper bound")

    @property
    def n(self) -> int:
        return len(self.c)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.c @ x + self.c0)

    def check_psd(self, tol: float = 1e-10) -> None:
        if self.n == 0:
            return
        if not np.allclose(self.P, self.P.T):
            raise ValueError("quadratic term is not symmetric")
        ev = np.linalg.eigvalsh(self.P)
        if ev.min() < -tol * max(1.0, abs(ev).max()):
            raise ValueError("quadratic term is not positive semidefinite")


@dataclass
class SolveResult:
    status: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    disc_duals: np.ndarray
    objective: float
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(program: ConicProgram, res: SolveResult) -> dict[str, float]:
    """Stationarity, feasibility and complementarity residuals (inf-norms)."""
    p, x = program, res.x
    stat = p.P @ x + p.c + p.A.T @ res.y + p.G.T @ res.z + res.z_ub - res.z_lb
    for (i, j, _), d in zip(p.discs, res.disc_duals):
        # disc dual multiplies x_i^2 + x_j^2 - r^2
        stat[i] += 2 * d * x[i]
        stat[j] += 2 * d * x[j]
    slack = p.h - p.G @ x
    fin_lb, fin_ub = np.isfinite(p.lb), np.isfinite(p.ub)
    comp = [np.abs(res.z * slack)]
    comp.append(np.abs(res.z_lb[fin_lb] * (x[fin_lb] - p.lb[fin_lb])))
    comp.append(np.abs(res.z_ub[fin_ub] * (p.ub[fin_ub] - x[fin_ub])))
    disc_slack = np.array([r * r - x[i] ** 2 - x[j] ** 2 for i, j, r in p.discs])
    comp.append(np.abs(res.disc_duals * disc_slack) if len(p.discs) else np.zeros(0))
    primal = [np.abs(p.A @ x - p.b), np.maximum(-slack, 0)]
    primal.append(np.maximum(p.lb[fin_lb] - x[fin_lb], 0))
    primal.append(np.maximum(x[fin_ub] - p.ub[fin_ub], 0))
    if len(p.discs):
        primal.append(np.maximum(-disc_slack, 0))
    dual_neg = np.concatenate([np.minimum(v, 0) for v in (res.z, res.z_lb, res.z_ub, res.disc_duals)])

    def inf(vs):
        vs = [v for v in vs if v.size]
        return float(max((np.max(v) for v in vs), default=0.0))

    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "primal": inf(primal),
        "dual": float(-dual_neg.min()) if dual_neg.size else 0.0,
        "complementarity": inf(comp),
    }


def dual_objective(program: ConicProgram, res: SolveResult) -> float:
    """Lagrange dual function value at the returned multipliers (QP part)."""
    p, x = program, res.x
    fin_lb, fin_ub = np.isfinite(p.lb), np.isfinite(p.ub)
    val = -0.5 * x @ p.P @ x - p.b @ res.y - p.h @ res.z + p.c0
    val += res.z_lb[fin_lb] @ p.lb[fin_lb] - res.z_ub[fin_ub] @ p.ub[fin_ub]
    val -= sum(d * r * r for (_, _, r), d in zip(p.discs, res.disc_duals))
    return float(val)


def polygonalize_cones(program: ConicProgram, cuts: int = 16) -> ConicProgram:
    """Replace every disc by the ``cuts`` edges of its inscribed regular polygon.

    Vertices sit at angles ``2 pi k / cuts`` on the circle (so the positive
    x-axis point is feasible); edge ``k`` has outward normal angle
    ``(2k + 1) pi / cuts`` and support ``r cos(pi / cuts)``.
    """
    if cuts < 4 or cuts % 2:
        raise ValueError("cuts must be an even number >= 4")
    if not program.discs:
        return replace(program, discs=[], cut_rows=list(program.cut_rows))
    n = program.n
    ang = (2 * np.arange(cuts) + 1) * np.pi / cuts
    rows, rhs, groups = [], [], []
    start = program.G.shape[0]
    for i, j, r in program.discs:
        g = np.zeros((cuts, n))
        g[:, i] = np.cos(ang)
        g[:, j] = np.sin(ang)
        rows.append(g)
        rhs.append(np.full(cuts, r * np.cos(np.pi / cuts)))
        groups.append(np.arange(start, start + cuts))
        start += cuts
    return replace(
        program,
        G=np.vstack([program.G] + rows),
        h=np.concatenate([program.h] + rhs),
        discs=[],
        cut_rows=list(program.cut_rows) + groups,
    )


def _expand_bounds(p: ConicProgram):
    """Turn bounds into equality rows (fixed vars) and inequality rows."""
    n = p.n
    fixed = np.flatnonzero(p.lb == p.ub)
    lo = np.flatnonzero(np.isfinite(p.lb) & (p.lb != p.ub))
    hi = np.flatnonzero(np.isfinite(p.ub) & (p.lb != p.ub))
    eye = np.eye(n)
    A = np.vstack([p.A, eye[fixed]])
    b = np.concatenate([p.b, p.lb[fixed]])
    G = np.vstack([p.G, -eye[lo], eye[hi]])
    h = np.concatenate([p.h, -p.lb[lo], p.ub[hi]])
    return A, b, G, h, fixed, lo, hi


def _independent_rows(A: np.ndarray, b: np.ndarray, tol: float = 1e-10):
    """Indices of a maximal independent subset of equality rows.

    Also reports whether the dropped rows are consistent with the kept ones.
    """
    m = A.shape[0]
    if m == 0:
        return np.arange(0), True
    _, r, piv = sla.qr(A.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > tol * max(1.0, d.max(initial=0))))
    keep = np.sort(piv[:rank])
    if rank == m:
        return keep, True
    drop = np.setdiff1d(np.arange(m), keep)
    # express dropped rows through kept rows and compare right-hand sides
    coef = np.linalg.lstsq(A[keep].T, A[drop].T, rcond=None)[0]
    gap = np.abs(coef.T @ b[keep] - b[drop])
    consistent = bool(np.all(gap <= 1e-8 * (1.0 + np.abs(b).max())))
    return keep, consistent


def _max_violation(program: ConicProgram, tol: float, max_iter: int) -> float | None:
    """Smallest uniform relaxation of the inequalities that admits a solution.

    Solves ``min s`` over ``Ax = b, Gx - s <= h, lb - s <= x <= ub + s,
    s >= 0``; returns None when that auxiliary problem fails as well.
    """
    n = program.n
    fin_lb, fin_ub = np.flatnonzero(np.isfinite(program.lb)), np.flatnonzero(np.isfinite(program.ub))
    eye = np.eye(n)
    G = np.vstack([program.G, -eye[fin_lb], eye[fin_ub]])
    h = np.concatenate([program.h, -program.lb[fin_lb], program.ub[fin_ub]])
    aux = ConicProgram(
        P=np.zeros((n + 1, n + 1)), c=np.r_[np.zeros(n), 1.0],
        A=np.hstack([program.A, np.zeros((program.A.shape[0], 1))]), b=program.b,
        G=np.hstack([G, -np.ones((G.shape[0], 1))]), h=h,
        lb=np.r_[np.full(n, -np.inf), 0.0], ub=np.full(n + 1, np.inf),
    )
    res = solve_reference(aux, tol=tol, max_iter=max_iter, _phase_one=False)
    return float(res.x[-1]) if res.status == OPTIMAL else None


def solve_reference(program: ConicProgram, tol: float = 1e-9, max_iter: int = 100,
                    _phase_one: bool = True) -> SolveResult:
    """Mehrotra predictor-corrector primal-dual interior point method.

    Discs must be polygonalized first.  Returns an optimal result when scaled
    primal/dual residuals and every complementarity product are below
    ``tol``; infeasibility and unboundedness are detected from Farkas-type
    certificates built from the iterates.
    """
    if program.discs:
        raise SolverError("reference backend needs polygonalized cones")
    n = program.n
    P, c = program.P, program.c
    A_full, b_full, G, h, fixed, lo, hi = _expand_bounds(program)
    keep, consistent = _independent_rows(A_full, b_full)
    A, b = A_full[keep], b_full[keep]
    me, mi = A.shape[0], G.shape[0]
    reg = 1e-11

    def split(y_kept, z):
        y = np.zeros(A_full.shape[0])
        y[keep] = y_kept
        y_orig, y_fix = y[: program.A.shape[0]], y[program.A.shape[0]:]
        z_orig = z[: program.G.shape[0]]
        z_lb, z_ub = np.zeros(n), np.zeros(n)
        z_lb[lo] = z[program.G.shape[0]: program.G.shape[0] + len(lo)]
        z_ub[hi] = z[program.G.shape[0] + len(lo):]
        z_ub[fixed] += np.maximum(y_fix, 0)
        z_lb[fixed] += np.maximum(-y_fix, 0)
        return y_orig, z_orig, z_lb, z_ub

    def result(status, x, y, z, it, **info):
        y_o, z_o, z_lb, z_ub = split(y, z)
        obj = program.objective(x) if status == OPTIMAL else float("nan")
        return SolveResult(status, x, y_o, z_o, z_lb, z_ub, np.zeros(0), obj, it, info)

    if not consistent:
        return result(INFEASIBLE, np.zeros(n), np.zeros(me), np.zeros(mi), 0,
                      reason="inconsistent equality constraints")

    scale_p = 1.0 + max(np.abs(b).max(initial=0), np.abs(h).max(initial=0))
    scale_d = 1.0 + np.abs(c).max(initial=0)

    # initial point: least-squares fit to the constraints
    K0 = np.block([[P + G.T @ G + reg * np.eye(n), A.T], [A, -reg * np.eye(me)]])
    try:
        sol0 = np.linalg.solve(K0, np.concatenate([-c + G.T @ h, b]))
    except np.linalg.LinAlgError:
        sol0 = np.linalg.lstsq(K0, np.concatenate([-c + G.T @ h, b]), rcond=None)[0]
    x = sol0[:n]
    y = np.zeros(me)
    s = h - G @ x
    shift = -s.min(initial=1.0)
    s = s + max(shift, 0.0) + 1.0
    z = np.ones(mi)

    it = 0
    for it in range(1, max_iter + 1):
        rd = P @ x + c + A.T @ y + G.T @ z
        rp = A @ x - b
        ri = G @ x + s - h
        mu = s @ z / mi if mi else 0.0
        pres = max(np.abs(rp).max(initial=0), np.abs(ri).max(initial=0))
        dres = np.abs(rd).max(initial=0)
        if (pres <= tol * scale_p and dres <= tol * scale_d
                and (mi == 0 or (s * z).max() <= tol)):
            return result(OPTIMAL, x, y, z, it, primal_residual=pres, dual_residual=dres, mu=mu)

        kappa = -(b @ y + h @ z)
        if kappa > 0 and mi:
            cert = np.abs(A.T @ y + G.T @ z).max(initial=0) / kappa
            if cert <= 1e-8 and max(np.abs(y).max(initial=0), z.max()) > 1e6:
                return result(INFEASIBLE, x, y, z, it, certificate=cert)
        kappa = -(c @ x)
        if kappa > 0 and np.abs(x).max() > 1e6:
            cert = max(np.abs(P @ x).max(initial=0), np.abs(A @ x).max(initial=0),
                       np.maximum(G @ x, 0).max(initial=0)) / kappa
            if cert <= 1e-6:
                return result(UNBOUNDED, x, y, z, it, certificate=cert)

        w = z / s
        H = P + (G.T * w) @ G
        K = np.block([[H + reg * np.eye(n), A.T], [A, -reg * np.eye(me)]])
        try:
            lu = sla.lu_factor(K, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            return result(NUMERICAL_FAILURE, x, y, z, it, reason=str(exc))

        def newton(rc):
            rhs_x = -rd - G.T @ ((rc + z * ri) / s)
            sol = sla.lu_solve(lu, np.concatenate([rhs_x, -rp]))
            # one step of iterative refinement against the unregularised system
            resid = np.concatenate([rhs_x - (H @ sol[:n] + A.T @ sol[n:]), -rp - A @ sol[:n]])
            sol = sol + sla.lu_solve(lu, resid)
            dx, dy = sol[:n], sol[n:]
            dz = (rc + z * ri) / s + w * (G @ dx)
            ds = -ri - G @ dx
            return dx, dy, dz, ds

        def max_step(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg]))) if neg.any() else 1.0

        dx, dy, dz, ds = newton(-s * z)
        a_aff = min(max_step(s, ds), max_step(z, dz))
        if mi:
            mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / mi
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, dy, dz, ds = newton(-s * z + sigma * mu - ds * dz)
        alpha = min(1.0, 0.99 * min(max_step(s, ds), max_step(z, dz)))
        x, y, z, s = x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            reason = "non-finite iterate"
            break
    else:
        reason = "iteration limit"

    try:
        cond = float(np.linalg.cond(K))
    except Exception:  # noqa: BLE001 - diagnostics only
        cond = float("nan")
    if _phase_one:
        gap = _max_violation(program, tol, max_iter)
        if gap is not None and gap > 1e-7 * scale_p:
            return result(INFEASIBLE, x, y, z, it, reason="phase-one residual", violation=gap)
    return result(NUMERICAL_FAILURE, x, y, z, it, reason=reason, condition=cond)


class ReferenceBackend:
    name = "reference"
    native_cones = False

    def __init__(self, tol: float = 1e-9, max_iter: int = 100):
        self.tol, self.max_iter = tol, max_iter

    def solve(self, program: ConicProgram) -> SolveResult:
        return solve_reference(program, tol=self.tol, max_iter=self.max_iter)


class CvxpyBackend:
    """External conic solver (Clarabel through cvxpy) with native discs."""

    name = "cvxpy"
    native_cones = True

    def __init__(self, tol: float = 1e-9, solver: str = "CLARABEL"):
        self.tol, self.solver = tol, solver

    def solve(self, program: ConicProgram) -> SolveResult:
        import cvxpy as cp

        p = program
        x = cp.Variable(p.n)
        obj = p.c @ x
        if np.any(p.P):
            obj = obj + 0.5 * cp.quad_form(x, cp.psd_wrap(p.P))
        cons = []
        eq = cp.Constant(p.A) @ x == p.b if p.A.shape[0] else None
        ineq = cp.Constant(p.G) @ x <= p.h if p.G.shape[0] else None
        fin_lb, fin_ub = np.flatnonzero(np.isfinite(p.lb)), np.flatnonzero(np.isfinite(p.ub))
        lbc = x[fin_lb] >= p.lb[fin_lb] if len(fin_lb) else None
        ubc = x[fin_ub] <= p.ub[fin_ub] if len(fin_ub) else None
        discs = [cp.SOC(cp.Constant(r), cp.hstack([x[i], x[j]])) for i, j, r in p.discs]
        cons = [k for k in (eq, ineq, lbc, ubc) if k is not None] + discs
        prob = cp.Problem(cp.Minimize(obj), cons)
        kwargs = {}
        if self.solver == "CLARABEL":
            kwargs = dict(tol_gap_abs=self.tol, tol_gap_rel=self.tol, tol_feas=self.tol)
        try:
            prob.solve(solver=self.solver, **kwargs)
        except cp.error.SolverError as exc:
            return SolveResult(NUMERICAL_FAILURE, np.full(p.n, np.nan), np.zeros(p.A.shape[0]),
                               np.zeros(p.G.shape[0]), np.zeros(p.n), np.zeros(p.n),
                               np.zeros(len(p.discs)), float("nan"), info={"reason": str(exc)})
        status = {
            cp.OPTIMAL: OPTIMAL, cp.OPTIMAL_INACCURATE: OPTIMAL,
            cp.INFEASIBLE: INFEASIBLE, cp.INFEASIBLE_INACCURATE: INFEASIBLE,
            cp.UNBOUNDED: UNBOUNDED, cp.UNBOUNDED_INACCURATE: UNBOUNDED,
        }.get(prob.status, NUMERICAL_FAILURE)
        if status != OPTIMAL:
            return SolveResult(status, np.full(p.n, np.nan), np.zeros(p.A.shape[0]),
                               np.zeros(p.G.shape[0]), np.zeros(p.n), np.zeros(p.n),
                               np.zeros(len(p.discs)), float("nan"), info={"cvxpy_status": prob.status})
        xv = np.asarray(x.value, dtype=float)
        z_lb, z_ub = np.zeros(p.n), np.zeros(p.n)
        if lbc is not None:
            z_lb[fin_lb] = lbc.dual_value
        if ubc is not None:
            z_ub[fin_ub] = ubc.dual_value
        y = np.asarray(eq.dual_value, dtype=float) if eq is not None else np.zeros(0)
        z = np.asarray(ineq.dual_value, dtype=float) if ineq is not None else np.zeros(0)
        # SOC dual (u, v) with u = |v| at optimum; convert to the multiplier of
        # x_i^2 + x_j^2 <= r^2, i.e. u / (2 r)
        disc = np.array([float(np.ravel(k.dual_value[0])[0]) / (2 * r)
                         for k, (_, _, r) in zip(discs, p.discs)])
        return SolveResult(OPTIMAL, xv, y, z, z_lb, z_ub, disc, p.objective(xv),
                           info={"cvxpy_status": prob.status})


def get_backend(name: str = "reference", tol: float = 1e-9, max_iter: int = 100):
    if name == "reference":
        return ReferenceBackend(tol=tol, max_iter=max_iter)
    if name == "cvxpy":
        return CvxpyBackend(tol=tol)
    raise ValueError(f"unknown backend {name!r}")
