import csv
import json

import pytest

from p2pmarket.casegen import generate_tight
from p2pmarket.cli import EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, main
from p2pmarket.runner import SETTLEMENT_COLUMNS, fmt


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_clear_writes_outputs(tmp_path):
    assert main(["clear", "five_bus", "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "settlement.csv")
    assert list(rows[0]) == SETTLEMENT_COLUMNS
    assert [r["agent"] for r in rows] == ["1", "2", "3", "4"]
    assert list(read_csv(tmp_path / "lines.csv")[0]) == ["line", "flow", "limit", "loading", "loss"]
    assert list(read_csv(tmp_path / "trades.csv")[0]) == ["i", "j", "t", "w", "z", "tau_t", "tau_z", "tau_l"]
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["status"] == "optimal" and len(run["case_hash"]) == 64
    prices = json.loads((tmp_path / "prices.json").read_text())
    assert set(prices["pi"]) == {"1", "2", "3", "4"}


def test_case_option_and_overrides(tmp_path):
    assert main(["clear", "--case", "five_bus", "--no-grid", "--out-dir", str(tmp_path)]) == EXIT_OK
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["settings"]["grid"] is False and run["settings"]["losses"] is False
    assert main(["clear", "five_bus", "--policy", "ind", "--chi", "0.5", "--cuts", "24",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["settings"]["policy"]["chi"] == 0.5 and run["settings"]["cuts"] == 24


def test_infeasible_exit_code(tmp_path):
    doc = generate_tight()
    doc["grid"]["dist_lines"][0]["capacity"] = 1.0
    path = tmp_path / "case.json"
    path.write_text(json.dumps(doc))
    assert main(["clear", str(path), "--out-dir", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    assert json.loads((tmp_path / "o" / "run.json").read_text())["status"] == "infeasible"


def test_error_exit_codes(tmp_path, capsys):
    assert main(["clear", str(tmp_path / "nope.json")]) == EXIT_ERROR
    assert main(["clear"]) == EXIT_ERROR
    assert "error" in capsys.readouterr().err


def test_analysis_commands(tmp_path):
    assert main(["compare-grid", "tight", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "run.json").read_text())["summary"]["violations_no_grid"] >= 1
    assert main(["compare-policies", "five_bus", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert {r["policy"] for r in read_csv(tmp_path / "policies.csv")} == {"soc", "ind", "cap"}
    assert main(["sweep-chi", "five_bus", "--chis", "0,1", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert len(read_csv(tmp_path / "sweep.csv")) == 8


def test_admm_command(tmp_path):
    assert main(["admm", "two_bus", "--rho", "1", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "admm_log.csv").exists()
    assert json.loads((tmp_path / "run.json").read_text())["summary"]["converged"] is True


def test_seed_regenerates_random_case(tmp_path):
    assert main(["clear", "random", "--seed", "4", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "run.json").read_text())["case"] == "random_4"


@pytest.mark.parametrize("v,s", [(0.0, "0"), (-0.0, "0"), (1 / 3, "0.3333333333"), (float("nan"), "nan"), (7, "7")])
def test_number_format(v, s):
    assert fmt(v) == s
