import numpy as np
import pytest

from feeder_envelope import build_sensitivities
from conftest import load_ordered, make_feeder_doc, random_feeder, two_node_model
from oracles import bareiss_det, lossless_solution, subtree_indicator


def test_single_branch_identities():
    mats = build_sensitivities(two_node_model())
    assert np.array_equal(mats.adjacency, [[0.0]])
    assert np.array_equal(mats.subtree, [[1.0]])
    # single branch carries exactly its own injection when losses are ignored
    assert np.array_equal(mats.loss_p, [[0.0]])


def test_path_subtree_matrix():
    model = load_ordered(make_feeder_doc([(0, 1, 0.01, 0.02), (1, 2, 0.03, 0.01)]))
    mats = build_sensitivities(model)
    assert np.array_equal(mats.subtree, [[1.0, 1.0], [0.0, 1.0]])
    # head flow aggregates both injections in the loss-free limit
    p = np.array([0.3, -0.5])
    assert np.allclose(mats.subtree @ p, [p[0] + p[1], p[1]])


def test_star_determinant_exact():
    branches = [(0, 1, 0.01, 0.01)] + [(1, k, 0.01, 0.01) for k in range(2, 5)]
    mats = build_sensitivities(load_ordered(make_feeder_doc(branches)))
    n = mats.adjacency.shape[0]
    det = bareiss_det(np.eye(n) - mats.adjacency)
    assert det == 1


def test_random_trees_match_traversal_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        model = random_feeder(rng, n_max=30)
        mats = build_sensitivities(model)
        assert np.array_equal(mats.subtree, subtree_indicator(model.parent))
        det = bareiss_det(np.eye(model.n) - mats.adjacency)
        assert det == 1


def test_subtree_equals_inverse_and_series():
    rng = np.random.default_rng(7)
    for _ in range(10):
        model = random_feeder(rng, n_max=25)
        mats = build_sensitivities(model)
        n = model.n
        inv = np.linalg.inv(np.eye(n) - mats.adjacency)
        assert np.max(np.abs(mats.subtree - inv)) < 1e-12
        # nilpotent series terminates at the tree depth
        acc = np.zeros((n, n))
        power = np.eye(n)
        for _ in range(n + 1):
            acc += power
            power = power @ mats.adjacency
        assert np.array_equal(power, np.zeros((n, n)))
        assert np.max(np.abs(acc - mats.subtree)) < 1e-12


def test_operators_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mats = build_sensitivities(random_feeder(rng, n_max=40))
        for name in ("vsens_p", "vsens_q", "loss_v", "loss_p", "loss_q"):
            assert np.min(getattr(mats, name)) >= 0.0, name


def test_lossless_consistency_with_recursion_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        model = random_feeder(rng, n_max=20)
        mats = build_sensitivities(model)
        n = model.n
        p = rng.normal(scale=0.1, size=n)
        q = rng.normal(scale=0.1, size=n)
        P_ref, Q_ref, v_ref = lossless_solution(
            model.parent, model.r, model.x, model.v0, p, q
        )
        assert np.max(np.abs(mats.subtree @ p - P_ref)) < 1e-10
        assert np.max(np.abs(mats.subtree @ q - Q_ref)) < 1e-10
        v_lin = model.v0 + mats.vsens_p @ p + mats.vsens_q @ q
        assert np.max(np.abs(v_lin - v_ref[1:])) < 1e-10


def test_unordered_model_rejected():
    from feeder_envelope import load_feeder

    model = load_feeder(make_feeder_doc([(0, 1, 0.01, 0.02)]))
    with pytest.raises(ValueError, match="ordered"):
        build_sensitivities(model)


def test_matrices_are_read_only():
    mats = build_sensitivities(two_node_model())
    with pytest.raises(ValueError):
        mats.subtree[0, 0] = 2.0
