import json
import warnings
from pathlib import Path

import numpy as np
import pytest

import feeder_envelope
from feeder_envelope import build_sensitivities, load_feeder, order_radial

DATA = Path(feeder_envelope.__file__).parent / "data"


def make_feeder_doc(
    branches,
    v0=1.0,
    vmin=0.9025,
    vmax=1.1025,
    nodes=None,
):
    """Feeder document from (from, to, r, x[, extra]) tuples.

    ``extra`` merges additional branch fields (lmax_pu2, pmin_pu, ...).
    Node limits default to the same band everywhere unless ``nodes`` is
    given explicitly.
    """
    ids = sorted({0} | {b[0] for b in branches} | {b[1] for b in branches})
    recs = []
    for b in branches:
        rec = {"from": b[0], "to": b[1], "r_pu": b[2], "x_pu": b[3]}
        if len(b) > 4:
            rec.update(b[4])
        recs.append(rec)
    if nodes is None:
        nodes = [{"id": 0}] + [
            {"id": i, "vmin_pu2": vmin, "vmax_pu2": vmax} for i in ids if i != 0
        ]
    return json.dumps({"base": {"v0_pu2": v0}, "nodes": nodes, "branches": recs})


def load_ordered(doc: str):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return order_radial(load_feeder(doc))


def two_node_model(r=0.01, x=0.02, v0=1.0, vmin=0.81, vmax=1.21, **extra):
    return load_ordered(
        make_feeder_doc([(0, 1, r, x, extra)] if extra else [(0, 1, r, x)],
                        v0=v0, vmin=vmin, vmax=vmax)
    )


def random_feeder(rng, n=None, n_max=50, shuffle=True, r_scale=0.03):
    """Random radial feeder with shuffled user labels and loose limits."""
    if n is None:
        n = int(rng.integers(2, n_max + 1))
    parent = [0] + [int(rng.integers(0, j)) for j in range(1, n + 1)]
    labels = list(range(1, n + 1))
    if shuffle:
        rng.shuffle(labels)
    relabel = {0: 0, **{j: labels[j - 1] for j in range(1, n + 1)}}
    branches = []
    for j in range(1, n + 1):
        r = float(rng.uniform(0.001, r_scale))
        x = float(rng.uniform(0.001, r_scale))
        f, t = relabel[parent[j]], relabel[j]
        if rng.random() < 0.3:
            f, t = t, f  # exercise orientation normalization
        branches.append((f, t, r, x))
    return load_ordered(make_feeder_doc(branches, vmin=0.25, vmax=4.0))


@pytest.fixture(scope="session")
def feeder13():
    return load_ordered((DATA / "feeder13.json").read_text())


@pytest.fixture(scope="session")
def feeder13_mats(feeder13):
    return build_sensitivities(feeder13)


@pytest.fixture(scope="session")
def data_dir():
    return DATA
