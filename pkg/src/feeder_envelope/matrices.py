"""Linear operators of the branch-flow model on an ordered radial feeder.

With branch flows measured at the child end (positive toward the
substation), the per-branch recursions for flow, voltage drop, and loss
collapse into a handful of dense linear maps.  ``subtree`` aggregates
injections down-tree, the ``loss_*`` operators propagate the squared-current
loss term into flows and voltages, and ``vsens_*`` are the lossless
injection-to-voltage sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederModel


class OrderingError(RuntimeError):
    """The model ordering is inconsistent; rebuild it with order_radial."""


@dataclass(frozen=True)
class SensitivityMatrices:
    """Immutable operator bundle for one ordered feeder.

    incidence : (n+1) x n 0/1 node-branch incidence.
    adjacency : n x n parent-to-child indicator (strictly upper triangular).
    subtree   : n x n 0/1; entry (i, j) is 1 iff node j+1 lies in the
                subtree rooted at node i+1.
    loss_p, loss_q : branch-loss to flow-reduction maps.
    vsens_p, vsens_q : injection to squared-voltage sensitivities (lossless).
    loss_v    : branch-loss to voltage-depression map.
    z2        : n x n diagonal of squared impedance magnitudes.
    """

    incidence: np.ndarray
    adjacency: np.ndarray
    subtree: np.ndarray
    loss_p: np.ndarray
    loss_q: np.ndarray
    vsens_p: np.ndarray
    vsens_q: np.ndarray
    loss_v: np.ndarray
    z2: np.ndarray


def build_sensitivities(model: FeederModel) -> SensitivityMatrices:
    """Construct all linear operators for an ordered radial feeder.

    The subtree matrix is obtained by back-substitution on the unit
    triangular system (never by dense inversion), so its entries are exact
    0/1 values and the triangular determinant is exactly one.
    """
    if not model.is_ordered:
        raise ValueError("feeder is not ordered; call order_radial first")
    n = model.n
    parent = model.parent
    assert parent is not None
    if any(parent[j] >= j or parent[j] < 0 for j in range(1, n + 1)):
        raise OrderingError("parent indices must strictly precede children")

    incidence = np.zeros((n + 1, n))
    for j in range(1, n + 1):
        incidence[j, j - 1] = 1.0
        incidence[parent[j], j - 1] = 1.0
    adjacency = incidence[1:, :] - np.eye(n)

    # back-substitution: row of a node accumulates completed child rows
    subtree = np.eye(n)
    for j in range(n, 0, -1):
        i = parent[j]
        if i >= 1:
            subtree[i - 1] += subtree[j - 1]

    r = model.r
    x = model.x
    z2_diag = r * r + x * x
    loss_p = subtree @ (adjacency * r)
    loss_q = subtree @ (adjacency * x)
    vsens_p = 2.0 * subtree.T @ (r[:, None] * subtree)
    vsens_q = 2.0 * subtree.T @ (x[:, None] * subtree)
    loss_v = subtree.T @ (
        2.0 * (r[:, None] * loss_p + x[:, None] * loss_q) + np.diag(z2_diag)
    )

    mats = SensitivityMatrices(
        incidence=incidence,
        adjacency=adjacency,
        subtree=subtree,
        loss_p=loss_p,
        loss_q=loss_q,
        vsens_p=vsens_p,
        vsens_q=vsens_q,
        loss_v=loss_v,
        z2=np.diag(z2_diag),
    )
    for arr in vars(mats).values():
        arr.setflags(write=False)
    return mats
