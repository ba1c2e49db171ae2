import numpy as np
import pytest

from feeder_envelope import (
    InjectionProfile,
    LoadFlowDivergence,
    build_envelope,
    build_sensitivities,
    hessian,
    hessian_eigs,
    jacobian,
    operating_point,
    solve_loadflow,
)
from conftest import random_feeder, two_node_model


def _point(model, p, q):
    return operating_point(model, InjectionProfile(np.asarray(p), np.asarray(q)))


def _synthetic_point(P, Q, v):
    """Operating point with prescribed branch values for formula checks."""
    from feeder_envelope.bounds import OperatingPoint

    P = np.atleast_1d(np.asarray(P, dtype=float))
    Q = np.atleast_1d(np.asarray(Q, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return OperatingPoint(
        p=P.copy(), q=Q.copy(), P=P, Q=Q,
        v=np.concatenate([[1.0], v]), l=(P**2 + Q**2) / v, state=None,
    )


def test_operating_point_no_load(feeder13):
    n = feeder13.n
    op = _point(feeder13, np.zeros(n), np.zeros(n))
    assert np.array_equal(op.P, np.zeros(n))
    assert np.array_equal(op.l, np.zeros(n))
    assert np.array_equal(op.v, np.full(n + 1, feeder13.v0))


def test_operating_point_propagates_divergence():
    model = two_node_model()
    with pytest.raises(LoadFlowDivergence):
        operating_point(
            model, InjectionProfile(np.array([-0.5]), np.array([-0.2])), max_iter=1
        )


def test_jacobian_zero_at_no_load(feeder13):
    n = feeder13.n
    J = jacobian(_point(feeder13, np.zeros(n), np.zeros(n)))
    assert np.array_equal(J.dl_dP, np.zeros(n))
    assert np.array_equal(J.dl_dQ, np.zeros(n))
    assert np.array_equal(J.dl_dv, np.zeros(n))


def test_jacobian_hand_values():
    op = _synthetic_point(0.3, 0.1, 1.0)
    J = jacobian(op)
    assert abs(J.dl_dP[0] - 0.6) < 1e-15
    assert abs(J.dl_dQ[0] - 0.2) < 1e-15
    assert abs(J.dl_dv[0] + 0.10) < 1e-15


def test_jacobian_voltage_slope_identity():
    rng = np.random.default_rng(1)
    for _ in range(10):
        model = random_feeder(rng, n_max=20)
        n = model.n
        op = _point(
            model,
            rng.uniform(-0.05, 0.05, size=n),
            rng.uniform(-0.03, 0.03, size=n),
        )
        J = jacobian(op)
        assert np.max(np.abs(J.dl_dv + op.l / op.v[1:])) < 1e-12


def test_hessian_eigs_at_flat_point():
    eigs = hessian_eigs(_synthetic_point(0.0, 0.0, 1.0), 0)
    assert eigs == (0.0, 2.0, 2.0)


def test_hessian_eigs_hand_value():
    eigs = hessian_eigs(_synthetic_point(0.3, 0.4, 1.0), 0)
    assert eigs[0] == 0.0
    assert abs(eigs[1] - 2.0) < 1e-15
    assert abs(eigs[2] - 2.5) < 1e-15


def test_hessian_eigs_match_numerical():
    rng = np.random.default_rng(2)
    for _ in range(200):
        P = rng.uniform(-2, 2)
        Q = rng.uniform(-2, 2)
        v = rng.uniform(0.8, 1.2)
        op = _synthetic_point(P, Q, v)
        closed = np.sort(hessian_eigs(op, 0))
        numeric = np.sort(np.linalg.eigvalsh(hessian(op, 0)))
        assert np.max(np.abs(closed - numeric)) < 1e-9
        assert numeric.min() > -1e-12  # convexity


def test_envelope_degenerates_at_expansion_point(feeder13, feeder13_mats):
    n = feeder13.n
    rng = np.random.default_rng(3)
    op = _point(
        feeder13, -rng.uniform(0.0, 0.05, size=n), -rng.uniform(0.0, 0.03, size=n)
    )
    env = build_envelope(op, feeder13_mats)
    assert np.max(np.abs(env.lower(op.p, op.q) - op.l)) < 1e-8
    assert np.max(np.abs(env.upper(op.p, op.q) - op.l)) < 1e-8


def test_envelope_ordering_everywhere(feeder13, feeder13_mats):
    n = feeder13.n
    rng = np.random.default_rng(4)
    op = _point(feeder13, -rng.uniform(0, 0.05, n), -rng.uniform(0, 0.03, n))
    env = build_envelope(op, feeder13_mats)
    for _ in range(200):
        p = rng.normal(scale=0.5, size=n)
        q = rng.normal(scale=0.3, size=n)
        assert np.all(env.lower(p, q) <= env.upper(p, q) + 1e-12)


def test_no_load_envelope_is_uninformative(feeder13, feeder13_mats):
    # with a flat expansion point the bracket collapses to zero width
    n = feeder13.n
    op = _point(feeder13, np.zeros(n), np.zeros(n))
    env = build_envelope(op, feeder13_mats)
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = rng.normal(scale=0.5, size=n)
        q = rng.normal(scale=0.3, size=n)
        assert np.array_equal(env.lower(p, q), np.zeros(n))
        assert np.array_equal(env.upper(p, q), np.zeros(n))


def test_lower_bound_underestimates_exact_currents(feeder13, feeder13_mats):
    """First-order expansion stays below the true currents (convexity)."""
    n = feeder13.n
    rng = np.random.default_rng(6)
    base_p = -rng.uniform(0.0, 0.05, size=n)
    base_q = -rng.uniform(0.0, 0.03, size=n)
    op = _point(feeder13, base_p, base_q)
    J = jacobian(op)
    for _ in range(200):
        inj = InjectionProfile(
            base_p + rng.normal(scale=0.1, size=n),
            base_q + rng.normal(scale=0.05, size=n),
        )
        state = solve_loadflow(feeder13, inj)
        assert state.converged
        lin = (
            op.l
            + J.dl_dP * (state.P - op.P)
            + J.dl_dQ * (state.Q - op.Q)
            + J.dl_dv * (state.v[1:] - op.v[1:])
        )
        assert np.all(lin <= state.l + 1e-9)


def test_upper_bound_holds_for_small_moves(feeder13, feeder13_mats):
    """Doubling the first-order term caps the exact currents near the point.

    The cap is only claimed where the first-order term dominates the
    curvature term; branches where the move happens to be orthogonal to the
    local slope are the bound's known blind spot and are excluded (that is
    exactly what the refresh loop plus final validation exist to catch).
    """
    n = feeder13.n
    rng = np.random.default_rng(7)
    base_p = -rng.uniform(0.02, 0.06, size=n)
    base_q = -rng.uniform(0.01, 0.03, size=n)
    op = _point(feeder13, base_p, base_q)
    J = jacobian(op)
    loaded = op.l > 1e-12
    checked = 0
    for _ in range(50):
        direction = rng.normal(size=2 * n)
        direction /= np.max(np.abs(direction))
        inj = InjectionProfile(
            base_p + 1e-3 * direction[:n], base_q + 1e-3 * direction[n:]
        )
        state = solve_loadflow(feeder13, inj)
        lin = (
            J.dl_dP * (state.P - op.P)
            + J.dl_dQ * (state.Q - op.Q)
            + J.dl_dv * (state.v[1:] - op.v[1:])
        )
        cap = op.l + 2.0 * np.abs(lin)
        dominant = loaded & (np.abs(lin) > 1e-6)
        checked += int(np.sum(dominant))
        assert np.all(state.l[dominant] <= cap[dominant] + 1e-9)
    assert checked > 400  # the filter keeps almost every branch in play
