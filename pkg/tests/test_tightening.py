import numpy as np
import pytest

from feeder_envelope import (
    Generator,
    InjectionProfile,
    Scenario,
    build_sensitivities,
    check_admissible,
    dispatch_injections,
    flexibility_envelope,
    load_scenario,
    solve_loadflow,
    tighten,
    validate_dispatch,
)
from conftest import DATA, two_node_model
from test_opf import _scenario, _solve_p3


def test_pinned_dispatch_converges_immediately(feeder13, feeder13_mats):
    # zero-width generator boxes leave nothing to decide: the forecast is
    # the optimum and the voltage gap vanishes on the first pass
    scn = load_scenario((DATA / "scenario13_cost.json").read_bytes(), feeder13)
    pinned = tuple(
        Generator(node=g.node, p_min=0.0, p_max=0.0, q_min=0.0, q_max=0.0,
                  c1=g.c1, c2=g.c2)
        for g in scn.generators
    )
    from dataclasses import replace

    sol, trace = tighten(feeder13, feeder13_mats, replace(scn, generators=pinned))
    assert trace.converged
    assert trace.iterations == 1
    assert trace.errors[0] < 1e-9


def test_noload_flexibility_first_iteration_overshoots(feeder13, feeder13_mats):
    """From a flat start the consumption bound is optimistic, then shrinks.

    The first expansion point carries no slope information, so the first
    pass overclaims; refreshing the point pulls the bound back to an
    admissible value.
    """
    scn = load_scenario((DATA / "scenario13_flex.json").read_bytes(), feeder13)
    from dataclasses import replace

    sol, trace = tighten(feeder13, feeder13_mats, replace(scn, objective="flex_down"))
    assert trace.converged
    first, final = trace.records[0], trace.records[-1]
    assert first.violation_count > 0
    assert first.objective < final.objective - 1e-4  # overclaimed consumption
    assert final.violation_count == 0


def test_tightened_hosting_beats_one_shot(feeder13, feeder13_mats):
    scn = load_scenario((DATA / "scenario13_hosting.json").read_bytes(), feeder13)
    one_shot, _, _, _ = _solve_p3(feeder13, feeder13_mats, scn)
    sol, trace = tighten(feeder13, feeder13_mats, scn)
    assert trace.converged
    assert trace.final_validation.ok
    assert np.sum(sol.p_gen) >= np.sum(one_shot.p_gen) - 1e-9
    # strict improvement on this feeder
    assert np.sum(sol.p_gen) > np.sum(one_shot.p_gen) + 1e-3


def test_error_metric_matches_definition(feeder13, feeder13_mats):
    scn = load_scenario((DATA / "scenario13_cost.json").read_bytes(), feeder13)
    sol, trace = tighten(feeder13, feeder13_mats, scn)
    rep = trace.final_validation
    v_star = 0.5 * (sol.v_hi + sol.v_lo)
    assert abs(trace.errors[-1] - np.max(np.abs(v_star - rep.v_exact))) < 1e-12


def test_trace_bookkeeping(feeder13, feeder13_mats):
    scn = load_scenario((DATA / "scenario13_hosting.json").read_bytes(), feeder13)
    sol, trace = tighten(feeder13, feeder13_mats, scn, eps=1e-5, max_outer=20)
    assert trace.iterations == len(trace.records)
    assert trace.records[-1].error <= 1e-5
    assert [r.iteration for r in trace.records] == list(
        range(1, trace.iterations + 1)
    )
    lines = trace.to_jsonl().strip().split("\n")
    assert len(lines) == trace.iterations
    import json

    rec = json.loads(lines[0])
    assert {"iteration", "error", "objective", "violation_count"} <= set(rec)


def test_outer_cap_returns_best_admissible(feeder13, feeder13_mats):
    scn = load_scenario((DATA / "scenario13_hosting.json").read_bytes(), feeder13)
    sol, trace = tighten(feeder13, feeder13_mats, scn, eps=1e-12, max_outer=3)
    assert not trace.converged
    assert trace.iterations == 3
    # the returned dispatch is admissible even though the loop was cut short
    assert trace.final_validation is not None
    assert not trace.final_validation.violations


def test_post_convergence_admissibility(feeder13, feeder13_mats):
    scn = load_scenario((DATA / "scenario13_hosting.json").read_bytes(), feeder13)
    sol, trace = tighten(feeder13, feeder13_mats, scn, eps=1e-5)
    assert trace.converged
    inj = dispatch_injections(scn, feeder13, sol.p_gen, sol.q_gen)
    state = solve_loadflow(feeder13, inj)
    assert check_admissible(feeder13, state, slack=2e-5) == []
    assert check_admissible(feeder13, state, slack=1e-6) == []


# --- flexibility envelope ----------------------------------------------------


def test_flexibility_empty_without_resources(feeder13, feeder13_mats):
    scn = _scenario(feeder13, objective="flex_up")
    env = flexibility_envelope(feeder13, feeder13_mats, scn)
    assert env.nodes == ()
    assert env.p_up.size == 0 and env.p_down.size == 0


def test_two_node_flexibility_asymmetry():
    """Losses skew the admissible range around a symmetric voltage band.

    The loss term always depresses voltage, so it opposes the rise when
    injecting (the band admits more power) and deepens the drop when
    consuming (the floor arrives sooner): the injection headroom exceeds
    the consumption headroom.  The thresholds come from bisecting the exact
    load flow; the tightened envelope must track them from the inside.
    """
    model = two_node_model(r=0.02, x=0.02, vmin=0.94, vmax=1.06)
    mats = build_sensitivities(model)

    def admissible(p):
        state = solve_loadflow(model, InjectionProfile(np.array([p]), np.zeros(1)))
        return state.converged and not check_admissible(model, state, slack=1e-12)

    def bisect_threshold(direction):
        lo, hi = 0.0, 8.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if admissible(direction * mid):
                lo = mid
            else:
                hi = mid
        return lo

    up_true = bisect_threshold(+1.0)
    down_true = bisect_threshold(-1.0)
    assert up_true > down_true  # the loss asymmetry

    scn = _scenario(model, gens=[Generator(node=1, p_min=-8.0, p_max=8.0)],
                    objective="flex_up")
    env = flexibility_envelope(model, mats, scn, eps=1e-9)
    assert env.up_trace.converged and env.down_trace.converged
    # inner approximation: within the true range, and tight after refresh
    assert env.p_up[0] <= up_true + 1e-6
    assert -env.p_down[0] <= down_true + 1e-6
    assert env.p_up[0] > up_true - 1e-3
    assert -env.p_down[0] > down_true - 1e-3
    assert env.p_up[0] > -env.p_down[0]


def test_flexibility_corners_validated(feeder13, feeder13_mats):
    scn = load_scenario((DATA / "scenario13_flex.json").read_bytes(), feeder13)
    env = flexibility_envelope(feeder13, feeder13_mats, scn)
    for p_corner in (env.p_up, env.p_down):
        inj = dispatch_injections(scn, feeder13, p_corner, np.zeros_like(p_corner))
        rep = validate_dispatch(feeder13, inj, None, slack=1e-6)
        assert rep.ok
