"""Command line driver.

Exit codes: 0 success, 1 error, 3 infeasible clearing.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import admm as admm_mod
from .casefile import CaseError
from .clearing import ClearingError, assemble, solve
from .policy import CAP, IND, SOC, PolicyConfig, PolicyError
from .runner import (RunSettings, allocation_for, clear_and_settle, clear_case, fmt, record, resolve_case,
                     write_outputs, write_table)
from .settlement import delta_payments, line_loading, settle, traded_energy
from . import solverback as sb

log = logging.getLogger("p2pmarket")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 3


class _Infeasible(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("case_pos", nargs="?", metavar="CASE", help="case file or bundled case name")
    common.add_argument("--case", dest="case_opt")
    common.add_argument("--out-dir", default="out")
    common.add_argument("--policy", choices=[SOC, IND, CAP])
    common.add_argument("--chi", type=float)
    common.add_argument("--no-grid", action="store_true", help="clear without network constraints (implies --no-losses)")
    common.add_argument("--no-losses", action="store_true")
    common.add_argument("--soc-mode", choices=["native", "polygon"])
    common.add_argument("--cuts", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iter", type=int)
    common.add_argument("--rho", type=float)
    common.add_argument("--backend", choices=["reference", "cvxpy"])
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="p2pmarket", description="P2P market clearing with TSO/DSO grid and losses")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("clear", parents=[common], help="clear one case and settle it")
    sub.add_parser("compare-grid", parents=[common], help="clear with and without grid constraints")
    sub.add_parser("compare-policies", parents=[common], help="soc vs ind vs capacity-scaled loss policies")
    sw = sub.add_parser("sweep-chi", parents=[common], help="sweep the socialization factor")
    sw.add_argument("--chis", default="0,0.25,0.5,0.75,1", help="comma separated values in [0, 1]")
    sub.add_parser("admm", parents=[common], help="decentralised ADMM negotiation")
    return ap


def _settings(case, args) -> RunSettings:
    s = RunSettings.from_case(case)
    pol = s.policy
    if args.policy or args.chi is not None:
        kind = args.policy or pol.kind
        chi = args.chi if args.chi is not None else (pol.chi if kind == pol.kind else None)
        if kind == SOC and chi not in (None, 1.0):
            kind = IND  # a partial socialization needs an individual component
        pol = PolicyConfig(kind, chi, pol.scope)
    s = replace(s, policy=pol)
    if args.no_grid:
        s = replace(s, grid=False, losses=False)
    if args.no_losses:
        s = replace(s, losses=False)
    for attr in ("soc_mode", "cuts", "tol", "max_iter", "backend"):
        v = getattr(args, attr)
        if v is not None:
            s = replace(s, **{attr: v})
    return s


def _summary(sol, report) -> dict:
    out = {"objective": sol.objective, "iterations": sol.info.get("iterations")}
    if report is not None:
        out["money_imbalance"] = report.money_imbalance
        out["max_loading"] = max((r["loading"] for r in report.lines), default=0.0)
        out["total_losses"] = sum(r["loss"] for r in report.lines)
    return out


def cmd_clear(case, settings, args) -> int:
    out = Path(args.out_dir)
    sol, ref, report, timing = clear_and_settle(case, settings)
    if not sol.optimal or report is None:
        record("clear", case, settings, sol if not sol.optimal else ref, timing=timing).write(_mk(out) / "run.json")
        raise _Infeasible(sol.status if not sol.optimal else f"reference {ref.status}")
    write_outputs(out, report, sol)
    record("clear", case, settings, sol, _summary(sol, report), timing).write(out / "run.json")
    print(f"{case.name}: {sol.status}, objective {fmt(sol.objective)}, wrote {out}")
    return EXIT_OK


def _mk(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _solve_or_fail(case, settings):
    sol = clear_case(case, settings)
    if not sol.optimal:
        raise _Infeasible(sol.status)
    return sol


def cmd_compare_grid(case, settings, args) -> int:
    out = _mk(Path(args.out_dir))
    on = _solve_or_fail(case, replace(settings, grid=True))
    off = _solve_or_fail(case, replace(settings, grid=False, losses=False))
    rows = []
    for a in case.agents:
        p_on, p_off = on.dual["pi"][a.id], off.dual["pi"][a.id]
        rows.append({"agent": a.id, "bus": a.bus, "pi_grid": p_on, "pi_no_grid": p_off,
                     "pi_change_pct": (p_on - p_off) / abs(p_off) * 100 if p_off else math.nan,
                     "p_grid": on.primal["p"][a.id], "p_no_grid": off.primal["p"][a.id]})
    write_table(rows, list(rows[0]), out / "grid_prices.csv")
    l_on, l_off = line_loading(on), line_loading(off)
    lines = [{"line": k, "loading_grid": l_on[k], "loading_no_grid": l_off[k],
              "violated_no_grid": int(l_off[k] > 1 + 1e-6)} for k in l_on]
    write_table(lines, list(lines[0]), out / "grid_lines.csv")
    summary = {"violations_no_grid": sum(r["violated_no_grid"] for r in lines),
               "max_loading_grid": max(l_on.values(), default=0.0),
               "max_loading_no_grid": max(l_off.values(), default=0.0),
               "mean_pi_grid": sum(r["pi_grid"] for r in rows) / len(rows),
               "mean_pi_no_grid": sum(r["pi_no_grid"] for r in rows) / len(rows)}
    record("compare-grid", case, settings, on, summary).write(out / "run.json")
    print(f"{case.name}: {summary['violations_no_grid']} line(s) overloaded without grid constraints")
    return EXIT_OK


POLICIES = {"soc": PolicyConfig(SOC), "ind": PolicyConfig(IND, 0.0), "cap": PolicyConfig(CAP, 0.0)}


def cmd_compare_policies(case, settings, args) -> int:
    out = _mk(Path(args.out_dir))
    base = replace(settings, grid=True, losses=True)
    ref = _solve_or_fail(case, replace(base, losses=False))
    rows, summary = [], {}
    for name, pol in POLICIES.items():
        pol = replace(pol, scope=case.policy.scope)
        sol = _solve_or_fail(case, replace(base, policy=pol))
        rep = settle(sol, ref)
        traded = traded_energy(sol)
        for r in rep.agents:
            rows.append({"policy": name, **{k: r[k] for k in ("agent", "bus", "payment", "delta", "delta_pct",
                                                              "losses", "delta_distance", "pi")},
                         "traded": traded[r["agent"]]})
        summary[name] = {"objective": sol.objective, "money_imbalance": rep.money_imbalance}
    write_table(rows, list(rows[0]), out / "policies.csv")
    record("compare-policies", case, base, ref, summary).write(out / "run.json")
    print(f"{case.name}: wrote {out / 'policies.csv'}")
    return EXIT_OK


def cmd_sweep_chi(case, settings, args) -> int:
    out = _mk(Path(args.out_dir))
    try:
        chis = [float(c) for c in args.chis.split(",") if c.strip()]
    except ValueError as exc:
        raise CaseError(f"bad --chis value: {exc}") from exc
    kind = settings.policy.kind if settings.policy.kind != SOC else IND
    base = replace(settings, grid=True, losses=True)
    ref = _solve_or_fail(case, replace(base, losses=False))
    rows = []
    for chi in chis:
        sol = _solve_or_fail(case, replace(base, policy=PolicyConfig(kind, chi, case.policy.scope)))
        for a, (dc, dp) in delta_payments(sol, ref).items():
            rows.append({"chi": chi, "agent": a, "delta": dc, "delta_pct": dp, "pi": sol.dual["pi"][a]})
    write_table(rows, ["chi", "agent", "delta", "delta_pct", "pi"], out / "sweep.csv")
    record("sweep-chi", case, base, ref, {"chis": chis, "kind": kind}).write(out / "run.json")
    print(f"{case.name}: swept {len(chis)} values of chi")
    return EXIT_OK


def cmd_admm(case, settings, args) -> int:
    out = _mk(Path(args.out_dir))
    cfg = case.solver.admm
    rho = args.rho if args.rho is not None else cfg.rho
    max_iter = args.max_iter if args.max_iter is not None else cfg.max_iter
    problem = assemble(case.grid, case.agents, case.trade_graph, allocation_for(case, settings), settings.options)
    backend = sb.get_backend(settings.backend, settings.tol, 100)
    central = sb.get_backend(settings.backend, settings.tol, 100)
    t0 = time.perf_counter()
    cen = solve(problem, central)
    if not cen.optimal:
        raise _Infeasible(cen.status)
    t_cen = time.perf_counter() - t0
    res = admm_mod.run(problem, rho=rho, max_iter=max_iter, eps_primal=cfg.eps_primal, eps_dual=cfg.eps_dual,
                       backend=backend)
    res.write_log(out / "admm_log.csv")
    sol = res.solution
    gap = abs(sol.objective - cen.objective) / max(1.0, abs(cen.objective))
    price_gap = max((abs(sol.dual["tau_t"][k] - v) for k, v in cen.dual["tau_t"].items()), default=0.0)
    primal, dual = admm_mod.residuals(res.state)
    summary = {"converged": res.converged, "iterations": res.iterations, "primal_residual": primal,
               "dual_residual": dual, "objective_gap": gap, "trade_price_gap": price_gap, "rho": rho}
    ref_settings = replace(settings, losses=False)
    ref = clear_case(case, ref_settings) if settings.losses else cen
    if ref.optimal:
        write_outputs(out, settle(sol, ref), sol)
    record("admm", case, settings, sol, summary, {"admm": res.elapsed, "centralised": t_cen}).write(out / "run.json")
    print(f"{case.name}: ADMM {'converged' if res.converged else 'did not converge'} in {res.iterations} rounds, "
          f"objective gap {gap:.2e}, price gap {price_gap:.2e}")
    return EXIT_OK if res.converged else EXIT_ERROR


COMMANDS = {"clear": cmd_clear, "compare-grid": cmd_compare_grid, "compare-policies": cmd_compare_policies,
            "sweep-chi": cmd_sweep_chi, "admm": cmd_admm}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    source = args.case_opt or args.case_pos
    if not source:
        print("error: a case is required (positional or --case)", file=sys.stderr)
        return EXIT_ERROR
    try:
        case = resolve_case(source, args.seed)
        settings = _settings(case, args)
        return COMMANDS[args.command](case, settings, args)
    except _Infeasible as exc:
        print(f"error: clearing is {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CaseError, ClearingError, PolicyError, admm_mod.AdmmError, sb.SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
