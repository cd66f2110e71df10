"""Bundled and randomly sampled market cases.

All impedances, capacities and costs of the small cases are chosen here for
the package; they are illustrative and not taken from any published dataset.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .casefile import SCHEMA_VERSION, dump_case, validate_document


def _doc(name, buses, agents, trades, *, ac=(), hvdc=(), dist=(), conn=(), slack, policy=None, solver=None,
         seed=0, description=""):
    doc = {
        "version": SCHEMA_VERSION,
        "name": name,
        "description": description,
        "base_mva": 100.0,
        "seed": seed,
        "grid": {
            "buses": list(buses), "ac_lines": list(ac), "hvdc_lines": list(hvdc),
            "dist_lines": list(dist), "connections": list(conn), "slack": slack,
        },
        "agents": list(agents),
        "trades": trades,
        "policy": policy or {"kind": "soc"},
        "solver": solver or {},
    }
    validate_document(doc)
    return doc


def _tbus(i):
    return {"id": str(i), "level": "transmission"}


def _dbus(i, dso):
    return {"id": str(i), "level": "distribution", "dso": dso}


def _ac(i, a, b, x, r, cap):
    return {"id": i, "from": str(a), "to": str(b), "x": x, "r": r, "capacity": cap}


def _dl(i, a, b, r, x, cap, b0=0.0):
    return {"id": i, "from": str(a), "to": str(b), "r": r, "x": x, "capacity": cap, "b0": b0}


def _agent(i, bus, p_min, p_max, cost_b=0.0, cost_a=0.0, q_min=0.0, q_max=0.0):
    return {"id": str(i), "bus": str(bus), "p_min": p_min, "p_max": p_max, "q_min": q_min,
            "q_max": q_max, "cost_a": cost_a, "cost_b": cost_b}


def generate_five_bus() -> dict:
    """Meshed 3-bus TSO with a 2-bus radial DSO under bus 3.

    Agent 1 is the only generator (bus 1); agent 2 is a TSO load at bus 2,
    reached from bus 1 over the weak line 1-2; agent 3 sits at the feeder (4)
    and agent 4 at the end of the feeder line (5).  Lines are sized so that
    nothing congests, which makes the loss policy the only driver of payment
    changes.  Losses of every line are shared over all trades of the market.
    """
    buses = [_tbus(1), _tbus(2), _tbus(3), _dbus(4, "D1"), _dbus(5, "D1")]
    ac = [_ac("l12", 1, 2, 0.2, 0.06, 60.0), _ac("l13", 1, 3, 0.1, 0.03, 60.0), _ac("l23", 2, 3, 0.1, 0.03, 60.0)]
    dist = [_dl("l45", 4, 5, 0.05, 0.05, 20.0)]
    conn = [{"id": "c1", "tso_bus": "3", "dso": "D1", "feeder_bus": "4"}]
    agents = [
        _agent(1, 1, 0.0, 100.0, cost_b=20.0),
        _agent(2, 2, -30.0, -30.0),
        _agent(3, 4, -5.0, -5.0, q_min=-2.0, q_max=2.0),
        _agent(4, 5, -5.0, -5.0, q_min=-2.0, q_max=2.0),
    ]
    trades = {"topology": "explicit", "pairs": [["1", "2"], ["1", "3"], ["1", "4"]]}
    return _doc("five_bus", buses, agents, trades, ac=ac, dist=dist, conn=conn, slack="1",
                policy={"kind": "soc", "scope": "system"},
                solver={"admm": {"rho": 1.0, "max_iter": 5000, "eps_primal": 1e-5, "eps_dual": 1e-5}},
                description="illustrative TSO/DSO case: one generator and three loads")


def generate_radial_chain(n: int = 6) -> dict:
    """One TSO bus feeding an ``n``-bus distribution chain with equal loads."""
    buses = [_tbus("T")] + [_dbus(f"B{k}", "D1") for k in range(1, n + 1)]
    dist = [_dl(f"d{k}", f"B{k}", f"B{k + 1}", 0.02, 0.04, 30.0) for k in range(1, n)]
    conn = [{"id": "c1", "tso_bus": "T", "dso": "D1", "feeder_bus": "B1"}]
    agents = [_agent("G", "T", 0.0, 50.0, cost_b=25.0)]
    agents += [_agent(f"L{k}", f"B{k}", -2.0, -2.0, q_min=-1.0, q_max=1.0) for k in range(1, n + 1)]
    pairs = [["G", f"L{k}"] for k in range(1, n + 1)]
    return _doc("radial_chain", buses, agents, {"topology": "explicit", "pairs": pairs}, dist=dist, conn=conn,
                slack="T", policy={"kind": "ind", "chi": 0.0},
                description="radial feeder with identical loads at increasing distance")


def generate_tight() -> dict:
    """Cheap remote generation behind a weak TSO line and a weak feeder line."""
    buses = [_tbus(1), _tbus(2), _tbus(3), _dbus(4, "D1"), _dbus(5, "D1")]
    ac = [_ac("l12", 1, 2, 0.1, 0.01, 25.0), _ac("l13", 1, 3, 0.1, 0.01, 25.0), _ac("l23", 2, 3, 0.1, 0.01, 100.0)]
    dist = [_dl("l45", 4, 5, 0.02, 0.04, 8.0)]
    conn = [{"id": "c1", "tso_bus": "3", "dso": "D1", "feeder_bus": "4"}]
    agents = [
        _agent("cheap", 1, 0.0, 100.0, cost_b=10.0),
        _agent("dear", 2, 0.0, 100.0, cost_b=40.0),
        _agent("city", 2, -60.0, -60.0),
        _agent("feeder", 4, -5.0, -5.0, q_min=-3.0, q_max=3.0),
        _agent("far", 5, -10.0, -10.0, q_min=-3.0, q_max=3.0),
        _agent("pv", 5, 0.0, 4.0, cost_b=5.0, q_min=-3.0, q_max=3.0),
    ]
    return _doc("tight", buses, agents, {"topology": "full"}, ac=ac, dist=dist, conn=conn, slack="1",
                policy={"kind": "soc"}, description="limits bind when the grid is cleared")


def generate_uniform() -> dict:
    """Single operator, no losses, no congestion: one uniform price."""
    buses = [_tbus(1), _tbus(2), _tbus(3)]
    ac = [_ac("l12", 1, 2, 0.1, 0.0, 500.0), _ac("l13", 1, 3, 0.1, 0.0, 500.0), _ac("l23", 2, 3, 0.1, 0.0, 500.0)]
    agents = [
        _agent("g1", 1, 0.0, 10.0, cost_b=20.0),
        _agent("g2", 2, 0.0, 30.0, cost_b=30.0),
        _agent("d", 3, -15.0, -15.0),
    ]
    return _doc("uniform", buses, agents, {"topology": "full"}, ac=ac, slack="1",
                policy={"kind": "soc"}, solver={"losses": False},
                description="lossless uncongested TSO, marginal generator g2")


def generate_two_bus() -> dict:
    """Two agents on a congested lossless line, quadratic costs."""
    buses = [_tbus(1), _tbus(2)]
    ac = [_ac("l12", 1, 2, 0.1, 0.0, 6.0)]
    agents = [
        _agent("g", 1, 0.0, 10.0, cost_b=5.0, cost_a=0.5),
        _agent("d", 2, -10.0, 0.0, cost_b=25.0, cost_a=0.3),
    ]
    return _doc("two_bus", buses, agents, {"topology": "full"}, ac=ac, slack="1",
                policy={"kind": "soc"}, solver={"losses": False},
                description="two-agent oracle case for lattice search")


def generate_random_case(n_tso_bus: int = 6, n_dso: int = 2, seed: int = 10, *, dso_buses: int = 6,
                         agents_per_bus: int = 3) -> dict:
    """Seeded TSO ring with radial DSO feeders organised as energy communities.

    Flexibility ``p_max - p_min`` of sampled agents is U(0, 1) and linear costs
    are U(10, 50).  Each DSO has a community manager at its feeder; DSO
    agents trade only with their manager while managers and TSO agents trade
    with each other.
    """
    if n_tso_bus < 3 or n_dso < 1 or dso_buses < 2 or agents_per_bus < 1:
        raise ValueError("need n_tso_bus >= 3, n_dso >= 1, dso_buses >= 2, agents_per_bus >= 1")
    if n_dso > n_tso_bus:
        raise ValueError("at most one DSO per TSO bus")
    rng = np.random.default_rng(seed)

    def u(lo, hi):
        return round(float(rng.uniform(lo, hi)), 6)

    buses = [_tbus(f"T{k}") for k in range(1, n_tso_bus + 1)]
    ac = []
    for k in range(1, n_tso_bus + 1):
        nxt = k % n_tso_bus + 1
        ac.append(_ac(f"t{k}_{nxt}", f"T{k}", f"T{nxt}", u(0.05, 0.2), u(0.005, 0.03), 200.0))
    for k in range(1, n_tso_bus // 2):
        far = k + n_tso_bus // 2
        ac.append(_ac(f"t{k}_{far}", f"T{k}", f"T{far}", u(0.05, 0.2), u(0.005, 0.03), 200.0))

    agents, dist, conn, managers = [], [], [], []
    hosts = rng.choice(np.arange(2, n_tso_bus + 1), size=n_dso, replace=False) if n_dso < n_tso_bus \
        else np.arange(1, n_tso_bus + 1)
    for d in range(1, n_dso + 1):
        dso = f"D{d}"
        ids = [f"{dso}B{k}" for k in range(1, dso_buses + 1)]
        buses += [_dbus(b, dso) for b in ids]
        for k in range(2, dso_buses + 1):
            parent = ids[0] if k == 2 else ids[int(rng.integers(max(0, k - 3), k - 1))]
            dist.append(_dl(f"{dso}l{k}", parent, ids[k - 1], u(0.01, 0.05), u(0.01, 0.05), 80.0))
        conn.append({"id": f"c{d}", "tso_bus": f"T{int(hosts[d - 1])}", "dso": dso, "feeder_bus": ids[0]})
        mgr = f"{dso}M"
        agents.append(_agent(mgr, ids[0], 0.0, 0.0, q_min=-5.0, q_max=5.0))
        managers.append(mgr)
        for b in ids[1:]:
            for k in range(agents_per_bus):
                demand = u(1.0, 3.0) * (k + 1)
                flex = u(0.0, 1.0)
                agents.append(_agent(f"{b}a{k}", b, -demand, -demand + flex, cost_b=u(10.0, 50.0),
                                     q_min=-0.5, q_max=0.5))
    for k in range(1, n_tso_bus + 1):
        if k % 2:
            agents.append(_agent(f"T{k}g", f"T{k}", 0.0, u(100.0, 160.0), cost_b=u(10.0, 50.0)))
        demand = u(5.0, 20.0)
        agents.append(_agent(f"T{k}l", f"T{k}", -demand, -demand + u(0.0, 1.0), cost_b=u(10.0, 50.0)))
    return _doc(f"random_{seed}", buses, agents, {"topology": "community", "managers": managers},
                ac=ac, dist=dist, conn=conn, slack="T1", seed=seed,
                policy={"kind": "ind", "chi": 0.0},
                description=f"seeded community case ({n_tso_bus} TSO buses, {n_dso} DSOs)")


BUNDLED = {
    "five_bus": generate_five_bus,
    "radial_chain": generate_radial_chain,
    "tight": generate_tight,
    "uniform": generate_uniform,
    "two_bus": generate_two_bus,
    "random": generate_random_case,
}


def write_bundled(directory=None) -> list[Path]:
    directory = Path(directory) if directory else Path(__file__).with_name("cases")
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, fn in BUNDLED.items():
        path = directory / f"{name}.json"
        dump_case(fn(), path)
        out.append(path)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description="write the bundled case files")
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args(argv)
    for p in write_bundled(args.out_dir):
        print(p)


if __name__ == "__main__":
    main()
