import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2pmarket import solverback as sb

cvxpy = pytest.importorskip("cvxpy")


def random_qp(seed, n=6, m_eq=2, m_in=3, disc=False):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    P = L @ L.T * 0.1 + np.diag(rng.uniform(0, 1, n) * (rng.uniform(size=n) > 0.3))
    x0 = rng.uniform(-1, 1, n)  # a feasible point
    A = rng.normal(size=(m_eq, n))
    G = rng.normal(size=(m_in, n))
    discs = [(0, 1, float(np.hypot(x0[0], x0[1]) + 0.5))] if disc else []
    return sb.ConicProgram(P=P, c=rng.normal(size=n), A=A, b=A @ x0, G=G, h=G @ x0 + rng.uniform(0, 1, m_in),
                           lb=x0 - 2, ub=x0 + rng.uniform(0.5, 2, n), discs=discs)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_reference_matches_external_solver(seed):
    prog = random_qp(seed)
    ours = sb.ReferenceBackend().solve(prog)
    ext = sb.CvxpyBackend().solve(prog)
    assert ours.optimal and ext.optimal
    assert abs(ours.objective - ext.objective) <= 1e-6 * (1 + abs(ext.objective))
    res = sb.kkt_residuals(prog, ours)
    assert max(res.values()) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_polygon_is_inner_approximation(seed):
    prog = random_qp(seed, disc=True)
    native = sb.CvxpyBackend().solve(prog)
    poly = sb.polygonalize_cones(prog, cuts=16)
    inner = sb.ReferenceBackend().solve(poly)
    assert native.optimal and inner.optimal
    assert inner.objective >= native.objective - 1e-7
    i, j, r = prog.discs[0]
    assert np.hypot(inner.x[i], inner.x[j]) <= r + 1e-7


def test_infeasible_is_reported():
    prog = sb.ConicProgram(P=np.zeros((2, 2)), c=np.ones(2), A=np.array([[1.0, 1.0]]), b=np.array([5.0]),
                           G=np.zeros((0, 2)), h=np.zeros(0), lb=np.zeros(2), ub=np.ones(2))
    assert sb.ReferenceBackend().solve(prog).status == sb.INFEASIBLE


def test_equality_dual_sign():
    # min x^2/2 s.t. x = 3: stationarity x + y = 0 with L = f + y (x - 3)
    prog = sb.ConicProgram(P=np.eye(1), c=np.zeros(1), A=np.eye(1), b=np.array([3.0]), G=np.zeros((0, 1)),
                           h=np.zeros(0), lb=np.array([-np.inf]), ub=np.array([np.inf]))
    res = sb.ReferenceBackend().solve(prog)
    assert res.x[0] == pytest.approx(3.0)
    assert res.y[0] == pytest.approx(-3.0)


def test_program_validation():
    with pytest.raises(ValueError):
        sb.ConicProgram(P=np.zeros((1, 1)), c=np.zeros(1), A=np.zeros((0, 1)), b=np.zeros(0), G=np.zeros((0, 1)),
                        h=np.zeros(0), lb=np.ones(1), ub=np.zeros(1))
    with pytest.raises(ValueError):
        sb.get_backend("nope")
