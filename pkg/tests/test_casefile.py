import json

import pytest
from hypothesis import given, settings, strategies as st

from p2pmarket.casefile import CaseError, bundled, bundled_cases, case_hash, dumps, load_case, parse
from p2pmarket.casegen import BUNDLED, generate_five_bus, generate_random_case


def test_bundled_files_match_generators():
    files = bundled_cases()
    assert set(files) == set(BUNDLED)
    for name, fn in BUNDLED.items():
        assert files[name].read_text() == dumps(fn())


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_cases_parse(name):
    case = bundled(name)
    assert case.agents and case.trade_graph.trades
    assert not case.trade_graph.isolated


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_random_case_is_seeded(seed):
    a, b = generate_random_case(seed=seed), generate_random_case(seed=seed)
    assert case_hash(a) == case_hash(b)
    case = parse(a)
    assert case.seed == seed
    assert parse(json.loads(dumps(a))).document == case.document


def test_schema_errors_name_the_field():
    doc = generate_five_bus()
    doc["agents"][0]["p_max"] = "lots"
    with pytest.raises(CaseError, match="agents/0/p_max"):
        parse(doc)
    doc = generate_five_bus()
    doc["extra"] = 1
    with pytest.raises(CaseError):
        parse(doc)


def test_semantic_errors():
    doc = generate_five_bus()
    doc["agents"][1]["bus"] = "99"
    with pytest.raises(CaseError, match="unknown bus"):
        parse(doc)
    doc = generate_five_bus()
    doc["grid"]["buses"][3]["dso"] = None
    with pytest.raises(CaseError):
        parse(doc)


def test_json_syntax_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"version": 1,\n "name": }')
    with pytest.raises(CaseError, match="line 2"):
        load_case(p)
    with pytest.raises(CaseError):
        load_case(tmp_path / "missing.json")


def test_community_topology():
    case = parse(generate_random_case(n_tso_bus=4, n_dso=1, seed=3, dso_buses=3, agents_per_bus=1))
    partners = case.trade_graph.partners
    for a in case.agents:
        if case.grid.bus_by_id[a.bus].dso and a.id != "D1M":
            assert partners[a.id] == ("D1M",)


def test_random_case_argument_checks():
    with pytest.raises(ValueError):
        generate_random_case(n_tso_bus=2)
    with pytest.raises(ValueError):
        generate_random_case(n_tso_bus=3, n_dso=4)
