"""Exact nonlinear load flow on a radial feeder via backward/forward sweeps.

Serves as the ground truth against which every optimized dispatch is
validated: flows are accumulated from the leaves with the freshest voltage
estimate feeding the squared-current update (Gauss-Seidel flavor), then
voltages propagate from the substation.  Constant-power injections only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederModel

#: abort threshold for squared voltage during iteration (0.5 pu)
COLLAPSE_FLOOR = 0.25


class VoltageCollapseError(RuntimeError):
    """Voltage fell below the collapse floor during iteration."""

    def __init__(self, node: int, value: float):
        super().__init__(
            f"voltage collapse at node {node}: squared voltage {value:.6f} pu2 "
            f"fell below {COLLAPSE_FLOOR} pu2"
        )
        self.node = node
        self.value = value


class LoadFlowDivergence(RuntimeError):
    """The sweep iteration did not reach the requested tolerance."""


@dataclass(frozen=True)
class InjectionProfile:
    """Per-node net injections (pu); positive means injection into the node.

    Loads enter with a negative sign, i.e. the profile holds generation
    minus demand for nodes 1..n.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p and q must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("injections must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class LoadFlowState:
    """One load-flow solution in internal node order.

    ``v`` has length n+1 with the substation at index 0; ``P``, ``Q`` are
    child-end branch flows (positive toward the substation) and ``l`` the
    squared branch currents, all aligned with branch k feeding node k+1.
    """

    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    converged: bool
    iterations: int
    residual: float
    substation_p: float
    substation_q: float


@dataclass(frozen=True)
class ResidualReport:
    """Per-equation absolute violations of the branch-flow relations."""

    voltage_drop: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray
    current: np.ndarray

    @property
    def max(self) -> float:
        return float(
            max(
                np.max(np.abs(self.voltage_drop)),
                np.max(np.abs(self.flow_p)),
                np.max(np.abs(self.flow_q)),
                np.max(np.abs(self.current)),
            )
        )


@dataclass(frozen=True)
class Violation:
    """A single limit violation: ``value`` exceeds ``limit`` by ``amount``."""

    quantity: str
    index: int
    value: float
    limit: float
    amount: float


def solve_loadflow(
    model: FeederModel,
    inj: InjectionProfile,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> LoadFlowState:
    """Solve the exact branch-flow equations by repeated sweeps.

    Parameters
    ----------
    model : FeederModel
        Ordered radial feeder.
    inj : InjectionProfile
        Net injections for nodes 1..n in internal order.
    tol : float
        Termination threshold on the max absolute squared-voltage change.
    max_iter : int
        Sweep limit; on expiry the state is returned with
        ``converged=False``.

    Raises
    ------
    VoltageCollapseError
        If any squared voltage drops below 0.25 pu2 mid-iteration (reported
        with the user numbering of the offending node).
    """
    if not model.is_ordered:
        raise ValueError("feeder is not ordered; call order_radial first")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    n = model.n
    if inj.p.shape != (n,):
        raise ValueError(f"injection length {inj.p.shape[0]} does not match n={n}")

    parent = model.parent
    assert parent is not None
    children = model.children()
    r, x = model.r, model.x
    z2 = r * r + x * x
    p, q = inj.p, inj.q

    v = np.full(n + 1, model.v0)
    P = np.zeros(n)
    Q = np.zeros(n)
    l = np.zeros(n)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        v_prev = v.copy()
        # backward: accumulate flows leaf-to-root, refreshing l on the way
        for j in range(n, 0, -1):
            pj = p[j - 1]
            qj = q[j - 1]
            for k in children[j]:
                pj += P[k - 1] - r[k - 1] * l[k - 1]
                qj += Q[k - 1] - x[k - 1] * l[k - 1]
            P[j - 1] = pj
            Q[j - 1] = qj
            l[j - 1] = (pj * pj + qj * qj) / v[j]
        # forward: propagate voltages root-to-leaf
        for j in range(1, n + 1):
            v[j] = (
                v[parent[j]]
                + 2.0 * r[j - 1] * P[j - 1]
                + 2.0 * x[j - 1] * Q[j - 1]
                - z2[j - 1] * l[j - 1]
            )
            if v[j] < COLLAPSE_FLOOR:
                raise VoltageCollapseError(model.user_ids[j], v[j])
        if np.max(np.abs(v - v_prev)) < tol:
            converged = True
            break

    sub_p = sum(P[k - 1] - r[k - 1] * l[k - 1] for k in children[0])
    sub_q = sum(Q[k - 1] - x[k - 1] * l[k - 1] for k in children[0])
    state = LoadFlowState(
        v=v,
        P=P,
        Q=Q,
        l=l,
        converged=converged,
        iterations=iterations,
        residual=0.0,
        substation_p=-float(sub_p),
        substation_q=-float(sub_q),
    )
    report = residuals(model, state, inj)
    object.__setattr__(state, "residual", report.max)
    for arr in (v, P, Q, l):
        arr.setflags(write=False)
    return state


def residuals(
    model: FeederModel, state: LoadFlowState, inj: InjectionProfile
) -> ResidualReport:
    """Absolute violations of the four branch-flow relations for a state."""
    n = model.n
    if state.P.shape != (n,):
        raise ValueError("state dimensions do not match the model")
    parent = model.parent
    assert parent is not None
    children = model.children()
    r, x = model.r, model.x
    z2 = r * r + x * x
    v, P, Q, l = state.v, state.P, state.Q, state.l

    drop = np.empty(n)
    res_p = np.empty(n)
    res_q = np.empty(n)
    for j in range(1, n + 1):
        drop[j - 1] = (
            v[j]
            - v[parent[j]]
            - 2.0 * r[j - 1] * P[j - 1]
            - 2.0 * x[j - 1] * Q[j - 1]
            + z2[j - 1] * l[j - 1]
        )
        arr_p = sum(P[k - 1] - r[k - 1] * l[k - 1] for k in children[j])
        arr_q = sum(Q[k - 1] - x[k - 1] * l[k - 1] for k in children[j])
        res_p[j - 1] = P[j - 1] - inj.p[j - 1] - arr_p
        res_q[j - 1] = Q[j - 1] - inj.q[j - 1] - arr_q
    current = l * v[1:] - (P * P + Q * Q)
    return ResidualReport(voltage_drop=drop, flow_p=res_p, flow_q=res_q, current=current)


def check_admissible(
    model: FeederModel, state: LoadFlowState, slack: float = 0.0
) -> list[Violation]:
    """List every limit violated by more than ``slack`` (boundary inclusive).

    Indices are reported in user numbering: nodes for voltage limits,
    child-node ids for branch flow and current limits.  An empty list means
    the state is admissible.
    """
    out: list[Violation] = []
    n = model.n
    uids = model.user_ids
    for j in range(1, n + 1):
        vj = state.v[j]
        if vj < model.v_min[j - 1] - slack:
            out.append(
                Violation("v_min", uids[j], float(vj), float(model.v_min[j - 1]),
                          float(model.v_min[j - 1] - vj))
            )
        if vj > model.v_max[j - 1] + slack:
            out.append(
                Violation("v_max", uids[j], float(vj), float(model.v_max[j - 1]),
                          float(vj - model.v_max[j - 1]))
            )
    for name, values, lo, hi in (
        ("p_flow", state.P, model.p_min, model.p_max),
        ("q_flow", state.Q, model.q_min, model.q_max),
    ):
        for k in range(n):
            if values[k] < lo[k] - slack:
                out.append(
                    Violation(f"{name}_min", uids[k + 1], float(values[k]),
                              float(lo[k]), float(lo[k] - values[k]))
                )
            if values[k] > hi[k] + slack:
                out.append(
                    Violation(f"{name}_max", uids[k + 1], float(values[k]),
                              float(hi[k]), float(values[k] - hi[k]))
                )
    for k in range(n):
        if state.l[k] > model.l_max[k] + slack:
            out.append(
                Violation("l_max", uids[k + 1], float(state.l[k]),
                          float(model.l_max[k]), float(state.l[k] - model.l_max[k]))
            )
    return out
