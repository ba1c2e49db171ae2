"""Operating-point curvature data and affine envelopes for branch currents.

The squared branch current is the only nonlinearity in the branch-flow
model.  Around a solved operating point it is convex in (flow, flow,
squared voltage), so its first-order expansion is a global lower bound,
while twice the first-order term caps it for small excursions.  Both bounds
are expressed affinely in the nodal injections by freezing the loss term at
its operating-point value inside the flow/voltage linearizations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederModel
from .loadflow import (
    InjectionProfile,
    LoadFlowDivergence,
    LoadFlowState,
    solve_loadflow,
)
from .matrices import SensitivityMatrices


@dataclass(frozen=True)
class OperatingPoint:
    """A converged load-flow solution used as expansion point.

    ``p``/``q`` are the injections that produced it; ``P``, ``Q``, ``l`` are
    per-branch and ``v`` has length n+1 including the substation.
    """

    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    l: np.ndarray
    state: LoadFlowState


@dataclass(frozen=True)
class JacobianBlocks:
    """Per-branch partial derivatives of the squared current.

    ``dl_dv`` is nonpositive and equals ``-l/v`` at the child node.
    """

    dl_dP: np.ndarray
    dl_dQ: np.ndarray
    dl_dv: np.ndarray


@dataclass(frozen=True)
class CurrentEnvelope:
    """Affine lower bound and epigraph upper bound for squared currents.

    ``linear_term(p, q)`` evaluates the first-order excursion ``g``; the
    lower envelope is ``base + g`` and the upper envelope is the pointwise
    max of ``base`` and ``base + 2 g``.  The lower bound is deliberately not
    clamped at zero: negative values widen the flow/voltage envelopes, which
    is the conservative direction for upper-limit checks.
    """

    base: np.ndarray
    slope_p: np.ndarray
    slope_q: np.ndarray
    offset: np.ndarray

    def linear_term(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.slope_p @ p + self.slope_q @ q + self.offset

    def lower(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.base + self.linear_term(p, q)

    def upper(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.maximum(self.base, self.base + 2.0 * self.linear_term(p, q))


def operating_point(
    model: FeederModel,
    inj: InjectionProfile,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> OperatingPoint:
    """Solve the exact load flow at ``inj`` and wrap it as expansion point."""
    state = solve_loadflow(model, inj, tol=tol, max_iter=max_iter)
    if not state.converged:
        raise LoadFlowDivergence(
            f"load flow did not converge in {max_iter} iterations "
            f"(residual {state.residual:.3e})"
        )
    return OperatingPoint(
        p=inj.p, q=inj.q, P=state.P, Q=state.Q, v=state.v, l=state.l, state=state
    )


def jacobian(op: OperatingPoint) -> JacobianBlocks:
    """First derivatives of each squared branch current at the point."""
    vc = op.v[1:]
    if np.any(vc <= 0.0):
        raise ValueError("operating-point voltages must be positive")
    return JacobianBlocks(
        dl_dP=2.0 * op.P / vc,
        dl_dQ=2.0 * op.Q / vc,
        dl_dv=-(op.P**2 + op.Q**2) / vc**2,
    )


def hessian(op: OperatingPoint, branch: int) -> np.ndarray:
    """3x3 curvature matrix of one squared branch current in (P, Q, v)."""
    vc = float(op.v[branch + 1])
    if vc <= 0.0:
        raise ValueError("operating-point voltages must be positive")
    P = float(op.P[branch])
    Q = float(op.Q[branch])
    return np.array(
        [
            [2.0 / vc, 0.0, -2.0 * P / vc**2],
            [0.0, 2.0 / vc, -2.0 * Q / vc**2],
            [-2.0 * P / vc**2, -2.0 * Q / vc**2, 2.0 * (P * P + Q * Q) / vc**3],
        ]
    )


def hessian_eigs(op: OperatingPoint, branch: int) -> tuple[float, float, float]:
    """Closed-form eigenvalues of the per-branch curvature matrix.

    One eigenvalue is zero and the other two are positive, which is what
    makes the squared current a convex function of (P, Q, v).
    """
    vc = float(op.v[branch + 1])
    if vc <= 0.0:
        raise ValueError("operating-point voltages must be positive")
    P = float(op.P[branch])
    Q = float(op.Q[branch])
    return (0.0, 2.0 / vc, 2.0 * (P * P + Q * Q + vc * vc) / vc**3)


def build_envelope(op: OperatingPoint, mats: SensitivityMatrices) -> CurrentEnvelope:
    """Assemble the affine current envelope around an operating point.

    The excursion term uses frozen-loss linearizations of the branch flows
    and squared voltages (loss fixed at its operating-point value), keeping
    the envelope affine in the injections.  Evaluated at the operating
    point's own injections both envelopes reduce to the point's currents.
    """
    J = jacobian(op)
    C = mats.subtree
    l0 = op.l
    v0_nodes = op.v[1:]
    head = op.v[0] if op.v.shape[0] == C.shape[0] + 1 else None
    if head is None:
        raise ValueError("operating point does not match the matrices")

    slope_p = J.dl_dP[:, None] * C + J.dl_dv[:, None] * mats.vsens_p
    slope_q = J.dl_dQ[:, None] * C + J.dl_dv[:, None] * mats.vsens_q
    offset = (
        J.dl_dP * (-mats.loss_p @ l0 - op.P)
        + J.dl_dQ * (-mats.loss_q @ l0 - op.Q)
        + J.dl_dv * (head - mats.loss_v @ l0 - v0_nodes)
    )
    env = CurrentEnvelope(
        base=l0.copy(), slope_p=slope_p, slope_q=slope_q, offset=offset
    )
    for arr in (env.base, env.slope_p, env.slope_q, env.offset):
        arr.setflags(write=False)
    return env
