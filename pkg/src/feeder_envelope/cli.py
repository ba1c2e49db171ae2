"""Command-line front end: load flow, robust solves, hosting, schedules.

Exit codes are scriptable gates: 0 ok, 2 input error, 3 load-flow
divergence or collapse, 4 infeasible dispatch program, 5 solver iteration
limit, 6 the exact load flow found limit violations in a reported dispatch.
All outputs land in ``--out``: JSON plus CSV, with matplotlib figures
rendered alongside unless ``--no-plots``.  Files are byte-stable for fixed
inputs and tolerances.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import report
from .bounds import operating_point
from .feeder import FeederFormatError, FeederModel, load_feeder, order_radial
from .loadflow import LoadFlowDivergence, VoltageCollapseError, solve_loadflow
from .matrices import SensitivityMatrices, build_sensitivities
from .opf import (
    Generator,
    OpfInfeasibleError,
    RobustOpfSolution,
    Scenario,
    ScenarioFormatError,
    SolverLimitError,
    build_p3,
    build_p4,
    dispatch_injections,
    extract_schedule,
    extract_solution,
    forecast_injections,
    load_scenario,
    scenario_for_step,
    validate_dispatch,
)
from .qp import QpInconclusiveError, QpNumericalError, QpSettings, solve_qp
from .tightening import tighten, tighten_schedule

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_INFEASIBLE = 4
EXIT_SOLVER_LIMIT = 5
EXIT_INADMISSIBLE = 6


@dataclass(frozen=True)
class RunConfig:
    """Resolved command invocation: paths, tolerances, and mode flags."""

    command: str
    feeder: Path
    scenario: Path
    out: Path
    eps: float
    qp_eps: float
    qp_max_iter: int
    oracle_tol: float
    max_outer: int
    tighten: bool
    plots: bool
    central_node: int | None
    compare_storage: bool
    per_step_relinearize: bool
    solution: Path | None

    def qp_settings(self) -> QpSettings:
        return QpSettings(
            eps_primal=self.qp_eps,
            eps_dual=self.qp_eps,
            max_iter=self.qp_max_iter,
        )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEEDER_ENVELOPE_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feeder-envelope",
        description="Network-admissible convex dispatch for radial feeders",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("loadflow", "solve the exact load flow at the forecast demand"),
        ("solve", "robust single-period dispatch with oracle validation"),
        ("hosting", "maximum admissible injection at the candidate nodes"),
        ("multiperiod", "storage-coupled dispatch over the scenario horizon"),
        ("validate", "check a demand or dispatch against the exact equations"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--feeder", required=True, type=Path, help="feeder JSON file")
        p.add_argument("--scenario", required=True, type=Path, help="scenario JSON file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--eps", type=float, default=1e-5,
                       help="tightening voltage tolerance (pu2)")
        p.add_argument("--qp-eps", type=float, default=1e-7,
                       help="QP KKT tolerance")
        p.add_argument("--qp-max-iter", type=int, default=100_000)
        p.add_argument("--oracle-tol", type=float, default=1e-10,
                       help="load-flow voltage tolerance (pu2)")
        p.add_argument("--max-outer", type=int, default=20,
                       help="tightening iteration cap")
        p.add_argument("--tighten", action=argparse.BooleanOptionalAction,
                       default=False, help="iterate dispatch with exact load flows")
        p.add_argument("--plots", action=argparse.BooleanOptionalAction,
                       default=True, help="render figures next to the CSV output")
        if name == "hosting":
            p.add_argument("--central-node", type=int, default=None,
                           help="also size one equivalent unit at this node")
        if name == "multiperiod":
            p.add_argument("--central-node", type=int, default=2,
                           help="node for the equivalent central battery")
            p.add_argument("--compare-storage", action="store_true",
                           help="report none/central/distributed hosting totals")
            p.add_argument("--fixed-linearization", action="store_true",
                           help="expand every step around the first step's point")
        if name == "validate":
            p.add_argument("--solution", type=Path, default=None,
                           help="solution JSON whose dispatch to validate")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    for field_name in ("eps", "qp_eps", "oracle_tol"):
        if getattr(args, field_name) <= 0:
            raise ValueError(f"--{field_name.replace('_', '-')} must be positive")
    return RunConfig(
        command=args.command,
        feeder=args.feeder,
        scenario=args.scenario,
        out=args.out,
        eps=args.eps,
        qp_eps=args.qp_eps,
        qp_max_iter=args.qp_max_iter,
        oracle_tol=args.oracle_tol,
        max_outer=args.max_outer,
        tighten=args.tighten,
        plots=args.plots,
        central_node=getattr(args, "central_node", None),
        compare_storage=getattr(args, "compare_storage", False),
        per_step_relinearize=not getattr(args, "fixed_linearization", False),
        solution=getattr(args, "solution", None),
    )


def _load_inputs(cfg: RunConfig) -> tuple[FeederModel, SensitivityMatrices, Scenario]:
    model = order_radial(load_feeder(cfg.feeder.read_bytes()))
    mats = build_sensitivities(model)
    scenario = load_scenario(cfg.scenario.read_bytes(), model)
    return model, mats, scenario


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")


def _violations_json(violations) -> list[dict]:
    return [
        {
            "quantity": v.quantity,
            "index": v.index,
            "value": v.value,
            "limit": v.limit,
            "amount": v.amount,
        }
        for v in violations
    ]


def _breaches_json(breaches) -> list[dict]:
    return [
        {
            "quantity": b.quantity,
            "index": b.index,
            "lower": b.lo,
            "upper": b.hi,
            "exact": b.exact,
        }
        for b in breaches
    ]


def _validation_json(rep) -> dict:
    return {
        "converged": rep.converged,
        "max_residual": rep.max_residual,
        "violations": _violations_json(rep.violations),
        "envelope_breaches": _breaches_json(rep.breaches),
        "substation_p_pu": rep.substation_p,
        "substation_q_pu": rep.substation_q,
    }


def _solution_json(sol: RobustOpfSolution, rep) -> dict:
    nodes = list(range(1, len(sol.p_inj) + 1))
    return {
        "status": sol.status,
        "objective": sol.objective,
        "gen_nodes": list(sol.gen_nodes),
        "p_gen_pu": [float(v) for v in sol.p_gen],
        "q_gen_pu": [float(v) for v in sol.q_gen],
        "envelopes": {
            "nodes": nodes,
            "v_lower_pu2": [float(v) for v in sol.v_lo],
            "v_upper_pu2": [float(v) for v in sol.v_hi],
            "edges": [list(e) for e in sol.edges],
            "flow_p_lower_pu": [float(v) for v in sol.flow_p_lo],
            "flow_p_upper_pu": [float(v) for v in sol.flow_p_hi],
            "flow_q_lower_pu": [float(v) for v in sol.flow_q_lo],
            "flow_q_upper_pu": [float(v) for v in sol.flow_q_hi],
            "current_lower_pu2": [float(v) for v in sol.cur_lo],
            "current_upper_pu2": [float(v) for v in sol.cur_hi],
        },
        "validation": _validation_json(rep),
    }


def _solve_one(model, mats, scenario, cfg: RunConfig):
    """One (optionally tightened) dispatch solve plus oracle validation."""
    if cfg.tighten:
        sol, trace = tighten(
            model,
            mats,
            scenario,
            eps=cfg.eps,
            max_outer=cfg.max_outer,
            qp_settings=cfg.qp_settings(),
            oracle_tol=cfg.oracle_tol,
        )
        rep = trace.final_validation
        return sol, rep, trace
    op = operating_point(
        model, forecast_injections(scenario, model), tol=cfg.oracle_tol
    )
    prob, labels = build_p3(mats, op, scenario, model)
    qp_sol = solve_qp(prob, cfg.qp_settings())
    sol = extract_solution(prob, qp_sol, labels)
    inj = dispatch_injections(scenario, model, sol.p_gen, sol.q_gen)
    rep = validate_dispatch(model, inj, sol, slack=1e-6, tol=cfg.oracle_tol)
    return sol, rep, None


def cmd_loadflow(cfg: RunConfig) -> int:
    model, mats, scenario = _load_inputs(cfg)
    inj = forecast_injections(scenario, model)
    state = solve_loadflow(model, inj, tol=cfg.oracle_tol)
    n = model.n
    nodes = list(range(1, n + 1))
    v_user = model.to_user(state.v[1:])
    order = np.argsort([model.user_ids[k + 1] for k in range(n)])
    edges = [
        [model.user_ids[model.parent[k + 1]], model.user_ids[k + 1]] for k in order
    ]
    payload = {
        "converged": state.converged,
        "iterations": state.iterations,
        "residual": state.residual,
        "nodes": nodes,
        "v_pu2": [float(v) for v in v_user],
        "edges": edges,
        "flow_p_pu": [float(v) for v in model.to_user(state.P)],
        "flow_q_pu": [float(v) for v in model.to_user(state.Q)],
        "current_pu2": [float(v) for v in model.to_user(state.l)],
        "substation_p_pu": state.substation_p,
        "substation_q_pu": state.substation_q,
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.out / "loadflow.json", payload)
    report.write_profile_csv(cfg.out / "profile.csv", nodes, v_user)
    if cfg.plots:
        report.plot_profile(
            cfg.out / "voltage_profile.png",
            nodes,
            v_user,
            model.to_user(model.v_min),
            model.to_user(model.v_max),
        )
    return EXIT_OK if state.converged else EXIT_DIVERGED


def _write_solution_outputs(cfg: RunConfig, model, sol, rep, trace) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    payload = _solution_json(sol, rep)
    if trace is not None:
        payload["tightening"] = {
            "converged": trace.converged,
            "iterations": trace.iterations,
            "errors": trace.errors,
        }
        (cfg.out / "trace.jsonl").write_text(trace.to_jsonl(), "utf-8")
    _dump_json(cfg.out / "solution.json", payload)
    nodes = list(range(1, model.n + 1))
    report.write_voltage_bounds_csv(
        cfg.out / "voltage_bounds.csv", nodes, sol.v_lo, rep.v_exact, sol.v_hi
    )
    report.write_flow_bounds_csv(
        cfg.out / "branch_flow_bounds.csv",
        sol.edges,
        sol.flow_p_lo,
        rep.flow_p_exact,
        sol.flow_p_hi,
        sol.flow_q_lo,
        rep.flow_q_exact,
        sol.flow_q_hi,
    )
    if cfg.plots:
        report.plot_voltage_bounds(
            cfg.out / "voltage_bounds.png",
            nodes,
            sol.v_lo,
            rep.v_exact,
            sol.v_hi,
            model.to_user(model.v_min),
            model.to_user(model.v_max),
        )
        report.plot_flow_bounds(
            cfg.out / "branch_flow_bounds.png",
            sol.edges,
            sol.flow_p_lo,
            rep.flow_p_exact,
            sol.flow_p_hi,
            sol.flow_q_lo,
            rep.flow_q_exact,
            sol.flow_q_hi,
        )
        if trace is not None:
            report.plot_tightening_error(
                cfg.out / "tightening_error.png", trace.errors, cfg.eps
            )


def cmd_solve(cfg: RunConfig) -> int:
    model, mats, scenario = _load_inputs(cfg)
    sol, rep, trace = _solve_one(model, mats, scenario, cfg)
    _write_solution_outputs(cfg, model, sol, rep, trace)
    if not rep.converged:
        return EXIT_DIVERGED
    return EXIT_OK if not rep.violations else EXIT_INADMISSIBLE


def _centralized_variant(scenario: Scenario, node: int) -> Scenario:
    gens = scenario.generators
    merged = Generator(
        node=node,
        p_min=0.0,
        p_max=float(sum(g.p_max for g in gens)),
        q_min=float(sum(g.q_min for g in gens)),
        q_max=float(sum(g.q_max for g in gens)),
    )
    return replace(scenario, generators=(merged,))


def cmd_hosting(cfg: RunConfig) -> int:
    model, mats, scenario = _load_inputs(cfg)
    if not scenario.generators:
        raise ScenarioFormatError("hosting requires candidate generator nodes")
    scenario = replace(scenario, objective="hosting")
    runs = [("distributed", scenario)]
    if cfg.central_node is not None:
        runs.append(("central", _centralized_variant(scenario, cfg.central_node)))
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(
            pool.map(lambda rs: _solve_one(model, mats, rs[1], cfg), runs)
        )
    cfg.out.mkdir(parents=True, exist_ok=True)
    (dist_sol, dist_rep, dist_trace) = results[0]
    caps = [float(v) for v in dist_sol.p_gen]
    payload = {
        "tightened": cfg.tighten,
        "nodes": list(dist_sol.gen_nodes),
        "capacity_pu": caps,
        "aggregate_pu": float(np.sum(dist_sol.p_gen)),
        "validation": _validation_json(dist_rep),
    }
    comparison = None
    bad = bool(dist_rep.violations) or not dist_rep.converged
    if len(results) > 1:
        c_sol, c_rep, _ = results[1]
        payload["central"] = {
            "node": cfg.central_node,
            "capacity_pu": float(np.sum(c_sol.p_gen)),
            "validation": _validation_json(c_rep),
        }
        comparison = {
            "distributed": float(np.sum(dist_sol.p_gen)),
            "central": float(np.sum(c_sol.p_gen)),
        }
        bad = bad or bool(c_rep.violations) or not c_rep.converged
    _dump_json(cfg.out / "hosting.json", payload)
    report.write_hosting_csv(cfg.out / "hosting.csv", dist_sol.gen_nodes, caps)
    if cfg.plots:
        report.plot_hosting(
            cfg.out / "hosting_capacity.png", dist_sol.gen_nodes, caps, comparison
        )
        if dist_trace is not None:
            report.plot_tightening_error(
                cfg.out / "tightening_error.png", dist_trace.errors, cfg.eps
            )
    return EXIT_INADMISSIBLE if bad else EXIT_OK


def _solve_schedule(model, mats, scenario, cfg: RunConfig):
    if cfg.tighten:
        return tighten_schedule(
            model,
            mats,
            scenario,
            eps=cfg.eps,
            max_outer=cfg.max_outer,
            qp_settings=cfg.qp_settings(),
            oracle_tol=cfg.oracle_tol,
            per_step_relinearize=cfg.per_step_relinearize,
        )
    horizon = scenario.horizon
    steps = horizon.steps
    step_scenarios = [scenario_for_step(scenario, t) for t in range(steps)]
    ops = [
        operating_point(
            model,
            forecast_injections(
                step_scenarios[t] if cfg.per_step_relinearize else step_scenarios[0],
                model,
            ),
            tol=cfg.oracle_tol,
        )
        for t in range(steps)
    ]
    prob, labels = build_p4(
        mats, ops, step_scenarios, scenario.batteries, steps, horizon.dt_h, model
    )
    qp_sol = solve_qp(prob, cfg.qp_settings())
    return extract_schedule(prob, qp_sol, labels), None


def _schedule_validations(model, scenario, schedule, cfg: RunConfig):
    steps = schedule.steps
    reports = []
    for t in range(steps):
        scn_t = scenario_for_step(scenario, t)
        sol_t = schedule.per_step[t]
        inj = dispatch_injections(
            scn_t,
            model,
            sol_t.p_gen,
            sol_t.q_gen,
            schedule.p_bat[t] if schedule.bat_nodes else None,
            schedule.bat_nodes,
        )
        reports.append(
            validate_dispatch(model, inj, sol_t, slack=1e-6, tol=cfg.oracle_tol)
        )
    return reports


def cmd_multiperiod(cfg: RunConfig) -> int:
    model, mats, scenario = _load_inputs(cfg)
    if scenario.horizon is None:
        raise ScenarioFormatError("multiperiod requires a horizon block")
    schedule, trace = _solve_schedule(model, mats, scenario, cfg)
    reports = _schedule_validations(model, scenario, schedule, cfg)

    horizon = scenario.horizon
    hours = [t * horizon.dt_h for t in range(horizon.steps)]
    load_total = [
        float(np.sum(scenario.load_p) * horizon.load_series[t])
        for t in range(horizon.steps)
    ]
    discharge = [
        float(np.sum(schedule.p_bat[t])) if schedule.bat_nodes else 0.0
        for t in range(horizon.steps)
    ]
    payload = {
        "steps": schedule.steps,
        "dt_h": schedule.dt_h,
        "objective": schedule.objective,
        "hosting_total_puh": -schedule.objective * horizon.dt_h,
        "bat_nodes": list(schedule.bat_nodes),
        "p_bat_pu": [[float(v) for v in row] for row in schedule.p_bat],
        "soc_puh": [[float(v) for v in row] for row in schedule.soc],
        "per_step": [
            {
                "t_h": hours[t],
                "p_gen_pu": [float(v) for v in schedule.per_step[t].p_gen],
                "objective": schedule.per_step[t].objective,
                "violations": len(reports[t].violations),
            }
            for t in range(schedule.steps)
        ],
    }
    if trace is not None:
        payload["tightening"] = {
            "converged": trace.converged,
            "iterations": trace.iterations,
            "errors": trace.errors,
        }
    bad = any(r.violations or not r.converged for r in reports)

    comparison = None
    if cfg.compare_storage:
        variants = [
            ("none", replace(scenario, batteries=())),
            ("central", replace(scenario, batteries=(_merge_batteries(scenario, cfg),))),
            ("distributed", scenario),
        ]
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            outcomes = list(
                pool.map(lambda vs: _solve_schedule(model, mats, vs[1], cfg), variants)
            )
        comparison = {
            name: -sched.objective * horizon.dt_h
            for (name, _), (sched, _tr) in zip(variants, outcomes)
        }
        payload["storage_comparison_puh"] = comparison

    cfg.out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.out / "schedule.json", payload)
    report.write_schedule_csv(cfg.out / "schedule.csv", hours, load_total, discharge)
    if cfg.plots:
        report.plot_schedule(cfg.out / "schedule.png", hours, load_total, discharge)
        if trace is not None:
            report.plot_tightening_error(
                cfg.out / "tightening_error.png", trace.errors, cfg.eps
            )
        if comparison:
            report.plot_storage_comparison(
                cfg.out / "storage_comparison.png", comparison
            )
    return EXIT_INADMISSIBLE if bad else EXIT_OK


def _merge_batteries(scenario: Scenario, cfg: RunConfig):
    from .opf import BatterySpec

    bats = scenario.batteries
    if not bats:
        raise ScenarioFormatError("storage comparison requires batteries")
    return BatterySpec(
        node=cfg.central_node,
        p_rate=float(sum(b.p_rate for b in bats)),
        b_max=float(sum(b.b_max for b in bats)),
        b_min=float(sum(b.b_min for b in bats)),
        b0=float(sum(b.b0 for b in bats)),
    )


def cmd_validate(cfg: RunConfig) -> int:
    model, mats, scenario = _load_inputs(cfg)
    if cfg.solution is not None:
        doc = json.loads(cfg.solution.read_text("utf-8"))
        gen_nodes = doc["gen_nodes"]
        p_gen = np.asarray(doc["p_gen_pu"], dtype=float)
        q_gen = np.asarray(doc["q_gen_pu"], dtype=float)
        gens = tuple(
            Generator(node=n, p_min=-np.inf, p_max=np.inf,
                      q_min=-np.inf, q_max=np.inf)
            for n in gen_nodes
        )
        scenario = replace(scenario, generators=gens)
        inj = dispatch_injections(scenario, model, p_gen, q_gen)
    else:
        inj = forecast_injections(scenario, model)
    rep = validate_dispatch(model, inj, None, slack=1e-6, tol=cfg.oracle_tol)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.out / "validation.json", _validation_json(rep))
    nodes = list(range(1, model.n + 1))
    report.write_profile_csv(cfg.out / "profile.csv", nodes, rep.v_exact)
    if cfg.plots:
        report.plot_profile(
            cfg.out / "voltage_check.png",
            nodes,
            rep.v_exact,
            model.to_user(model.v_min),
            model.to_user(model.v_max),
        )
    if not rep.converged:
        return EXIT_DIVERGED
    return EXIT_OK if not rep.violations else EXIT_INADMISSIBLE


_COMMANDS = {
    "loadflow": cmd_loadflow,
    "solve": cmd_solve,
    "hosting": cmd_hosting,
    "multiperiod": cmd_multiperiod,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = _config(args)
        return _COMMANDS[cfg.command](cfg)
    except (FeederFormatError, ScenarioFormatError, FileNotFoundError,
            ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except VoltageCollapseError as exc:
        print(f"load flow collapse: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except LoadFlowDivergence as exc:
        print(f"load flow divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OpfInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverLimitError, QpInconclusiveError, QpNumericalError) as exc:
        print(f"solver limit: {exc}", file=sys.stderr)
        return EXIT_SOLVER_LIMIT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
