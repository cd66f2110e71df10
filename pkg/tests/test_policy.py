import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2pmarket.agents import Agent, TradeGraph, validate
from p2pmarket.casefile import bundled
from p2pmarket.policy import (CAP, IND, SOC, PolicyConfig, PolicyError, build_capacity_scaled, build_individual,
                              build_policy, build_socialization, check_allocation, mix)


@pytest.fixture(scope="module")
def five():
    return bundled("five_bus")


def test_socialisation_operator_scope_only_touches_operator_trades(five):
    a = build_socialization(five.grid, five.trade_graph, five.agents, "operator").values
    k = five.grid.line_index["l45"]
    trades = five.trade_graph.trades
    for t, (i, j) in enumerate(trades):
        touches = {"3", "4"} & {i, j}
        assert (a[t, k] > 0) == bool(touches)
    assert np.allclose(a.sum(axis=0), 1.0)


def test_system_scope_is_uniform(five):
    a = build_socialization(five.grid, five.trade_graph, five.agents, "system").values
    assert np.allclose(a, 1.0 / len(five.trade_graph.trades))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.sampled_from([IND, CAP]), st.sampled_from(["operator", "system"]))
def test_mixtures_are_valid_allocations(chi, kind, scope):
    case = bundled("five_bus")
    a = build_policy(case.grid, case.trade_graph, case.agents, PolicyConfig(kind, chi, scope))
    check_allocation(a)
    assert a.values.min() >= 0
    assert np.allclose(a.values.sum(axis=0), 1.0, atol=1e-12)


def test_mix_endpoints(five):
    soc = build_socialization(five.grid, five.trade_graph, five.agents)
    ind = build_individual(five.grid, five.trade_graph, five.agents)
    assert np.allclose(mix(soc, ind, 1.0).values, soc.values)
    assert np.allclose(mix(soc, ind, 0.0).values, ind.values)


def test_individual_policy_charges_far_agent_more_on_feeder(five):
    a = build_individual(five.grid, five.trade_graph, five.agents).values
    idx = five.trade_graph.trade_index
    k = five.grid.line_index["l45"]
    assert a[idx[("4", "1")], k] > a[idx[("3", "1")], k]


def test_capacity_scaling_weights_by_capacity():
    case = bundled("five_bus")
    agents = [a if a.id != "4" else Agent("4", "5", -15.0, -15.0, -2, 2) for a in case.agents]
    ind = build_individual(case.grid, case.trade_graph, agents).values
    cap = build_capacity_scaled(case.grid, case.trade_graph, agents).values
    idx = case.trade_graph.trade_index
    k = case.grid.line_index["l45"]
    ratio_ind = ind[idx[("4", "1")], k] / ind[idx[("1", "4")], k]
    ratio_cap = cap[idx[("4", "1")], k] / cap[idx[("1", "4")], k]
    # each directed trade is weighted by the capacity of its first agent
    assert ratio_cap == pytest.approx(ratio_ind * 15.0 / 100.0)


def test_bad_config():
    with pytest.raises(PolicyError):
        PolicyConfig("nope")
    with pytest.raises(PolicyError):
        PolicyConfig(IND, 1.5)
    assert PolicyConfig(SOC).effective_chi == 1.0
    assert PolicyConfig(IND).effective_chi == 0.0


def test_trade_graph_and_validation():
    g = TradeGraph.from_pairs(["a", "b", "c"], [("a", "b")])
    assert g.trades == [("a", "b"), ("b", "a")]
    assert g.isolated == ["c"]
    assert g.reverse(0) == 1
    assert len(TradeGraph.full(["a", "b", "c"]).pairs) == 3
    diag = validate([Agent("a", "1", 2.0, 1.0), Agent("a", "1", 0, 1, cost_a=-1)], g)
    assert any("duplicate" in d for d in diag)
    assert any("p_min" in d for d in diag)
    assert any("non-convex" in d for d in diag)
