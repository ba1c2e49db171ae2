import json

import numpy as np
import pytest

from feeder_envelope import (
    BranchOrientationWarning,
    FeederFormatError,
    load_feeder,
    order_radial,
)
from conftest import DATA, load_ordered, make_feeder_doc


def test_minimal_two_node_feeder():
    doc = json.dumps(
        {
            "base": {"v0_pu2": 1.0},
            "branches": [{"from": 0, "to": 1, "r_pu": 0.01, "x_pu": 0.02}],
        }
    )
    model = load_feeder(doc)
    assert model.n == 1
    assert model.edges == ((0, 1),)
    assert model.r[0] == 0.01 and model.x[0] == 0.02
    # omitted limits default to unbounded
    assert model.v_min[0] == 0.0 and np.isinf(model.v_max[0])
    assert np.isinf(model.l_max[0])


def test_cycle_rejected():
    doc = make_feeder_doc([(0, 1, 0.01, 0.01), (1, 2, 0.01, 0.01), (2, 0, 0.01, 0.01)])
    with pytest.raises(FeederFormatError, match="non-radial"):
        load_feeder(doc)


def test_disconnected_rejected():
    # right branch count, but node 3 hangs off a 2-cycle
    doc = make_feeder_doc([(0, 1, 0.01, 0.01), (2, 3, 0.01, 0.01), (3, 2, 0.02, 0.01)])
    with pytest.raises(FeederFormatError, match="non-radial"):
        load_feeder(doc)


def test_missing_substation_rejected():
    doc = json.dumps(
        {
            "base": {"v0_pu2": 1.0},
            "branches": [
                {"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.02},
                {"from": 2, "to": 3, "r_pu": 0.01, "x_pu": 0.02},
            ],
        }
    )
    with pytest.raises(FeederFormatError, match="substation"):
        load_feeder(doc)


def test_negative_impedance_rejected():
    doc = make_feeder_doc([(0, 1, -0.01, 0.02)])
    with pytest.raises(FeederFormatError, match="negative impedance"):
        load_feeder(doc)


def test_unknown_fields_rejected():
    doc = json.loads(make_feeder_doc([(0, 1, 0.01, 0.02)]))
    doc["surprise"] = 1
    with pytest.raises(FeederFormatError, match="unknown field"):
        load_feeder(json.dumps(doc))
    doc = json.loads(make_feeder_doc([(0, 1, 0.01, 0.02)]))
    doc["branches"][0]["length_mi"] = 1.0
    with pytest.raises(FeederFormatError, match="unknown field"):
        load_feeder(json.dumps(doc))


def test_bad_voltage_band_rejected():
    doc = make_feeder_doc([(0, 1, 0.01, 0.02)], vmin=1.2, vmax=1.1)
    with pytest.raises(FeederFormatError, match="vmin"):
        load_feeder(doc)


def test_parse_error_is_reported():
    with pytest.raises(FeederFormatError, match="parse error"):
        load_feeder(b"{not json")


def test_bundled_feeder13_shape():
    model = load_feeder((DATA / "feeder13.json").read_bytes())
    assert model.n == 12
    degree: dict[int, int] = {}
    for f, t in model.edges:
        degree[f] = degree.get(f, 0) + 1
        degree[t] = degree.get(t, 0) + 1
    leaves = sorted(u for u, d in degree.items() if d == 1 and u != 0)
    assert leaves == [3, 5, 7, 8, 10, 11]


def test_order_path_already_canonical_is_identity():
    model = load_feeder(make_feeder_doc([(0, 1, 0.01, 0.02), (1, 2, 0.03, 0.01)]))
    ordered = order_radial(model)
    assert ordered.user_ids == (0, 1, 2)
    assert ordered.parent == (-1, 0, 1)


def test_order_swapped_path_permutes():
    # path runs 0 - 2 - 1 in user labels
    model = load_feeder(make_feeder_doc([(0, 2, 0.01, 0.02), (2, 1, 0.03, 0.01)]))
    ordered = order_radial(model)
    assert ordered.user_ids == (0, 2, 1)
    assert ordered.parent == (-1, 0, 1)
    # branch data follows the relabeling: internal branch 1 is the user 0-2 branch
    assert ordered.r[0] == 0.01 and ordered.r[1] == 0.03
    # reduced incidence is unit upper triangular after ordering
    from feeder_envelope import build_sensitivities

    mats = build_sensitivities(ordered)
    bn = mats.incidence[1:, :]
    assert np.allclose(np.tril(bn, -1), 0.0)
    assert np.allclose(np.diag(bn), 1.0)


def test_order_flipped_branch_warns():
    model = load_feeder(make_feeder_doc([(0, 1, 0.01, 0.02), (2, 1, 0.03, 0.01)]))
    with pytest.warns(BranchOrientationWarning):
        ordered = order_radial(model)
    assert ordered.parent == (-1, 0, 1)


def test_order_is_idempotent():
    model = load_ordered(
        make_feeder_doc([(0, 3, 0.01, 0.02), (3, 1, 0.01, 0.01), (3, 2, 0.02, 0.02)])
    )
    again = order_radial(model)
    assert again is model


def test_user_index_round_trip():
    model = load_ordered(
        make_feeder_doc([(0, 2, 0.01, 0.02), (2, 3, 0.01, 0.01), (3, 1, 0.02, 0.02)])
    )
    values = np.array([10.0, 20.0, 30.0])
    assert np.array_equal(model.to_user(model.to_internal(values)), values)
    # internal node k corresponds to user node user_ids[k]
    internal = model.to_internal(values)
    for k in range(1, model.n + 1):
        assert internal[k - 1] == values[model.user_ids[k] - 1]
