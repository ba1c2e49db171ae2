import numpy as np
import pytest

from feeder_envelope import (
    InjectionProfile,
    VoltageCollapseError,
    check_admissible,
    residuals,
    solve_loadflow,
)
from conftest import load_ordered, make_feeder_doc, random_feeder, two_node_model
from oracles import bisect_two_node

# frozen reference for the standard two-node case (r=0.01, x=0.02,
# p=-0.5, q=-0.2, v0=1), computed with the bisection oracle
TWO_NODE_V1 = 0.9818523199496972


def test_no_load_fixed_point(feeder13):
    n = feeder13.n
    state = solve_loadflow(feeder13, InjectionProfile(np.zeros(n), np.zeros(n)))
    assert state.converged
    assert state.iterations == 1
    assert np.array_equal(state.v, np.full(n + 1, feeder13.v0))
    assert np.array_equal(state.P, np.zeros(n))
    assert np.array_equal(state.l, np.zeros(n))
    assert state.substation_p == 0.0


def test_two_node_against_bisection_oracle():
    model = two_node_model()
    state = solve_loadflow(model, InjectionProfile(np.array([-0.5]), np.array([-0.2])))
    assert state.converged
    oracle = bisect_two_node(1.0, 0.01, 0.02, -0.5, -0.2)
    assert abs(state.v[1] - oracle) < 1e-12
    assert abs(state.v[1] - TWO_NODE_V1) < 1e-12
    # child-end flows carry the raw injections; current closes the loop
    assert state.P[0] == -0.5 and state.Q[0] == -0.2
    assert abs(state.l[0] - (0.25 + 0.04) / state.v[1]) < 1e-12


def test_random_feeders_residuals_small():
    rng = np.random.default_rng(5)
    for _ in range(25):
        model = random_feeder(rng, n_max=30)
        n = model.n
        inj = InjectionProfile(
            -rng.uniform(0.0, 0.02, size=n), -rng.uniform(0.0, 0.01, size=n)
        )
        state = solve_loadflow(model, inj)
        assert state.converged
        assert residuals(model, state, inj).max < 1e-8


def test_contraction_on_light_load():
    rng = np.random.default_rng(17)
    for _ in range(15):
        model = random_feeder(rng, n_max=40)
        n = model.n
        p = -rng.uniform(0.0, 0.03, size=n)
        if np.sum(np.abs(p)) * np.max(model.r) >= 0.05:
            p *= 0.05 / (np.sum(np.abs(p)) * np.max(model.r))
        inj = InjectionProfile(p, 0.5 * p)
        state = solve_loadflow(model, inj, tol=1e-10, max_iter=50)
        assert state.converged
        assert state.iterations <= 50


def test_substation_balance():
    rng = np.random.default_rng(23)
    for _ in range(10):
        model = random_feeder(rng, n_max=25)
        n = model.n
        inj = InjectionProfile(
            rng.uniform(-0.05, 0.02, size=n), rng.uniform(-0.02, 0.01, size=n)
        )
        state = solve_loadflow(model, inj)
        assert state.converged
        losses = float(np.sum(model.r * state.l))
        assert abs(state.substation_p - (-np.sum(inj.p) + losses)) < 1e-8


def test_losses_only_depress_voltage():
    # exact voltage never exceeds the loss-free linear estimate
    from feeder_envelope import build_sensitivities

    rng = np.random.default_rng(29)
    for _ in range(10):
        model = random_feeder(rng, n_max=20)
        mats = build_sensitivities(model)
        n = model.n
        inj = InjectionProfile(
            rng.uniform(-0.05, 0.05, size=n), rng.uniform(-0.03, 0.03, size=n)
        )
        state = solve_loadflow(model, inj)
        assert state.converged
        v_lin = model.v0 + mats.vsens_p @ inj.p + mats.vsens_q @ inj.q
        assert np.all(state.v[1:] <= v_lin + 1e-10)


def test_residual_reports_perturbed_current():
    model = two_node_model()
    inj = InjectionProfile(np.array([-0.3]), np.array([-0.1]))
    state = solve_loadflow(model, inj)
    bumped = np.array(state.l) + 0.01
    import dataclasses

    perturbed = dataclasses.replace(state, l=bumped)
    rep = residuals(model, perturbed, inj)
    assert abs(abs(rep.current[0]) - 0.01 * state.v[1]) < 1e-6


def test_exact_state_has_zero_residual(feeder13):
    n = feeder13.n
    inj = InjectionProfile(np.zeros(n), np.zeros(n))
    state = solve_loadflow(feeder13, inj)
    rep = residuals(feeder13, state, inj)
    assert rep.max == 0.0


def test_voltage_collapse_names_node():
    model = two_node_model(r=0.05, x=0.1)
    with pytest.raises(VoltageCollapseError) as err:
        solve_loadflow(model, InjectionProfile(np.array([-8.0]), np.array([-4.0])))
    assert err.value.node == 1


def test_non_convergence_flagged():
    model = two_node_model()
    state = solve_loadflow(
        model, InjectionProfile(np.array([-0.5]), np.array([-0.2])), max_iter=1
    )
    assert not state.converged
    assert state.iterations == 1


def test_admissibility_no_load(feeder13):
    n = feeder13.n
    state = solve_loadflow(feeder13, InjectionProfile(np.zeros(n), np.zeros(n)))
    assert check_admissible(feeder13, state) == []


def test_admissibility_flags_undervoltage():
    model = two_node_model(vmin=0.9025, vmax=1.1025)
    state = solve_loadflow(model, InjectionProfile(np.array([-3.0]), np.array([-1.0])))
    violations = check_admissible(model, state)
    kinds = {(v.quantity, v.index) for v in violations}
    assert ("v_min", 1) in kinds
    worst = next(v for v in violations if v.quantity == "v_min")
    assert worst.amount > 0.0
    assert abs((worst.limit - worst.value) - worst.amount) < 1e-12


def test_admissibility_boundary_inclusive():
    model = two_node_model(vmin=0.9025, vmax=1.1025)
    inj = InjectionProfile(np.array([-0.5]), np.array([-0.2]))
    state = solve_loadflow(model, inj)
    import dataclasses

    exact = dataclasses.replace(
        state,
        v=np.array([1.0, model.v_min[0]]),
        P=np.array([model.p_min[0]]) if np.isfinite(model.p_min[0]) else state.P,
    )
    assert check_admissible(model, exact, slack=1e-9) == []
