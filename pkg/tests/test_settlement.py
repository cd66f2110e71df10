import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from p2pmarket.casefile import bundled, parse
from p2pmarket.casegen import generate_random_case
from p2pmarket.policy import CAP, PolicyConfig
from p2pmarket.runner import RunSettings, clear_case
from p2pmarket.settlement import (allocated_losses, congestion_rent, delta_payments, line_loading, money_ledger, network_flows,
                                  operator_losses, payments, settle, traded_energy, weighted_distance)


@pytest.fixture(scope="module")
def five():
    case = bundled("five_bus")
    s = RunSettings.from_case(case)
    return case, clear_case(case, s), clear_case(case, replace(s, losses=False))


def test_payments_equal_perceived_price_times_power(five):
    _, sol, _ = five
    pay, w = payments(sol), allocated_losses(sol)
    for a, v in pay.items():
        # trades plus covered losses make up p_i, and each is priced at pi_i
        total = v - sol.dual["pi"][a] * w[a]
        assert total == pytest.approx(-sol.dual["pi"][a] * sol.primal["p"][a], rel=1e-9, abs=1e-9)
    assert pay["1"] < 0 < pay["2"]


def test_delta_pct_is_percent(five):
    _, sol, ref = five
    d = delta_payments(sol, ref)
    c0 = payments(ref)
    for a, (dc, pct) in d.items():
        assert pct == pytest.approx(100 * dc / abs(c0[a]))


def test_delta_pct_undefined_without_reference_payment():
    case = bundled("random")
    s = RunSettings.from_case(case)
    d = delta_payments(clear_case(case, s), clear_case(case, replace(s, losses=False)))
    assert math.isnan(d["D1M"][1])


def test_money_ledger_balances(five):
    _, sol, _ = five
    led = money_ledger(sol)
    assert abs(led.imbalance) <= 1e-9
    assert led.operators["TSO"] + led.operators["D1"] < 0  # net receivers of the loss charges


def test_losses_and_flows(five):
    case, sol, _ = five
    lo = operator_losses(sol)
    assert lo["TSO"] > 0 and lo["D1"] > 0
    flows = network_flows(sol)
    # feeder line carries agent 4's demand
    assert flows["l45"][0] == pytest.approx(5.0, abs=0.1)
    assert all(v >= 0 for v in congestion_rent(sol).values())
    assert traded_energy(sol)["1"] == pytest.approx(40.0 + sum(sol.primal["w"][("1", j)] for j in "234"), abs=1e-6)


def test_weighted_distance_orders_feeder(five):
    _, sol, _ = five
    dist = weighted_distance(sol)
    assert dist["4"] > dist["3"]


def test_grid_off_flows_are_ex_post():
    case = bundled("tight")
    s = RunSettings.from_case(case)
    off = clear_case(case, replace(s, grid=False, losses=False))
    on = clear_case(case, s)
    assert max(line_loading(off).values()) > 1
    assert max(line_loading(on).values()) <= 1 + 1e-6


def test_report_rows(five):
    case, sol, ref = five
    rep = settle(sol, ref)
    assert [r["agent"] for r in rep.agents] == [a.id for a in case.agents]
    assert {r["operator"] for r in rep.operators} == {"TSO", "D1"}
    assert len(rep.trades) == len(case.trade_graph.trades)
    assert rep.money_imbalance <= 1e-12


@settings(max_examples=6, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 500))
def test_money_conserved_on_random_markets(seed):
    case = parse(generate_random_case(n_tso_bus=4, n_dso=1, seed=seed, dso_buses=4, agents_per_bus=2))
    sol = clear_case(case)
    assert sol.optimal
    assert money_ledger(sol).relative_imbalance <= 1e-6
    t = sol.primal["t"]
    assert max(abs(v + t[(j, i)]) for (i, j), v in t.items()) <= 1e-7


@settings(max_examples=5, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 500))
def test_capacity_scaling_equalises_inflexible_agents(seed):
    doc = generate_random_case(n_tso_bus=4, n_dso=1, seed=seed, dso_buses=4, agents_per_bus=3)
    for a in doc["agents"]:
        if a["id"].startswith("D") and not a["id"].endswith("M"):
            a["p_max"] = a["p_min"]
    case = parse(doc)
    s = replace(RunSettings.from_case(case), policy=PolicyConfig(CAP, 0.0))
    d = delta_payments(clear_case(case, s), clear_case(case, replace(s, losses=False)))
    by_bus = {}
    for a in case.agents:
        if a.id in d and not math.isnan(d[a.id][1]) and case.grid.bus_by_id[a.bus].dso:
            by_bus.setdefault(a.bus, []).append(d[a.id][1])
    for vals in by_bus.values():
        assert np.ptp(vals) <= 1e-6 * (1 + np.abs(vals).max())


@pytest.mark.parametrize("name", ["five_bus", "tight", "radial_chain", "random"])
def test_money_conserved_without_grid(name):
    case = bundled(name)
    sol = clear_case(case, replace(RunSettings.from_case(case), grid=False, losses=False))
    assert money_ledger(sol).relative_imbalance <= 1e-9
    assert settle(sol).money_imbalance <= 1e-9
