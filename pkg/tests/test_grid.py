import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from p2pmarket.casefile import bundled
from p2pmarket.grid import (AcLine, Bus, DistLine, GridError, GridModel, build_loss_distribution,
                            build_modified_tf, build_ptdf, fit_loss_linearization, pair_distance)


def ring(n, xs, slack="1"):
    buses = [Bus(str(k), "transmission") for k in range(1, n + 1)]
    lines = [AcLine(f"l{k}", str(k), str(k % n + 1), x, 0.01, 100.0) for k, x in zip(range(1, n + 1), xs)]
    return GridModel(buses=buses, ac_lines=lines, slack=slack)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 7).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n),
    st.lists(st.floats(-50, 50), min_size=n, max_size=n))))
def test_ptdf_flows_satisfy_kirchhoff(data):
    n, xs, inj = data
    g = ring(n, xs)
    ptdf = build_ptdf(g)
    p = np.array(inj)
    p[0] = -p[1:].sum()  # slack balances
    f = ptdf @ p
    # nodal balance: injection = outgoing - incoming
    for k, b in enumerate(g.transmission_buses):
        out = sum(f[m] for m, ln in enumerate(g.ac_lines) if ln.from_bus == b)
        inc = sum(f[m] for m, ln in enumerate(g.ac_lines) if ln.to_bus == b)
        assert abs(out - inc - p[k]) <= 1e-8 * (1 + np.abs(p).max())
    # loop law: sum of x f around the ring vanishes
    assert abs(np.dot(xs, f)) <= 1e-8 * (1 + np.abs(f).max())
    assert np.allclose(ptdf[:, 0], 0.0)


def test_two_bus_ptdf():
    g = GridModel(buses=[Bus("a", "transmission"), Bus("b", "transmission")],
                  ac_lines=[AcLine("l", "a", "b", 0.1, 0.0, 1.0)], slack="a")
    assert np.allclose(build_ptdf(g), [[0.0, -1.0]])


def test_modified_tf_copies_connection_column():
    g = bundled("five_bus").grid
    tf = build_modified_tf(g)
    bi = g.bus_index
    n_ac = len(g.ac_lines)
    for b in ("4", "5"):
        assert np.allclose(tf[:n_ac, bi[b]], tf[:n_ac, bi["3"]])
    # feeder line sees only its downstream bus
    k = g.line_index["l45"]
    assert tf[k, bi["4"]] == 0.0 and tf[k, bi["5"]] == pytest.approx(-1.0)
    assert np.allclose(tf[k, [bi["1"], bi["2"], bi["3"]]], 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.5, 500.0), st.integers(1, 4))
def test_loss_fit_matches_numeric_least_squares(r, cap, segs):
    fit = fit_loss_linearization(r, cap, segs)
    edges = np.linspace(0, cap, segs + 1)
    for (m, q), a, b in zip(fit, edges[:-1], edges[1:]):
        # continuous normal equations by quadrature
        gram = np.array([[integrate.quad(lambda f: f * f, a, b)[0], integrate.quad(lambda f: f, a, b)[0]],
                         [integrate.quad(lambda f: f, a, b)[0], b - a]])
        rhs = np.array([integrate.quad(lambda f: r * f**3, a, b)[0], integrate.quad(lambda f: r * f**2, a, b)[0]])
        mm, qq = np.linalg.solve(gram, rhs)
        scale = r * cap * cap
        assert abs(m - mm) * cap <= 1e-7 * scale
        assert abs(q - qq) <= 1e-7 * scale


def test_loss_fit_error_shrinks_with_segments():
    f = np.linspace(0, 10, 2001)

    def err(s):
        model = np.max([m * f + q for m, q in fit_loss_linearization(0.1, 10, s)], axis=0)
        return np.max(np.abs(model - 0.1 * f**2))

    assert err(4) < err(2) < err(1)


def test_loss_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_loss_linearization(-1, 1)
    assert fit_loss_linearization(0.0, 5.0, 3) == [(0.0, 0.0)] * 3


def test_loss_distribution_halves():
    g = bundled("five_bus").grid
    d = build_loss_distribution(g)
    assert np.allclose(d.sum(axis=0), 1.0)


def test_pair_distance_symmetry_and_zero():
    g = bundled("five_bus").grid
    tf = build_modified_tf(g)
    assert pair_distance(g, tf, "1", "1") == 0.0
    assert pair_distance(g, tf, "1", "5") == pytest.approx(pair_distance(g, tf, "5", "1"))
    assert pair_distance(g, tf, "3", "5") > pair_distance(g, tf, "3", "4")
    with pytest.raises(KeyError):
        pair_distance(g, tf, "1", "zz")


def test_invalid_components():
    with pytest.raises(GridError):
        Bus("x", "distribution")
    with pytest.raises(GridError):
        AcLine("l", "a", "b", 0.0, 0.0, 1.0)
    with pytest.raises(GridError):
        DistLine("d", "a", "b", 0.0, 0.0, 1.0)


def test_dist_line_admittance_signs():
    ln = DistLine("d", "a", "b", 0.03, 0.04, 1.0)
    assert ln.susceptance == pytest.approx(0.04 / 0.0025)
    assert ln.conductance == pytest.approx(-0.03 / 0.0025)
