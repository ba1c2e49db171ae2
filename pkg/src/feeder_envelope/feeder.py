"""Radial feeder ingestion, validation, and canonical ordering.

A feeder is a tree rooted at the substation (node 0, fixed squared voltage
``v0``).  Files use per-unit quantities throughout: squared voltages in pu²,
impedances and branch flows in pu.  No base conversion happens here.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

INF = float("inf")


class FeederFormatError(ValueError):
    """The feeder description failed to parse or validate."""


class BranchOrientationWarning(UserWarning):
    """A branch was supplied child->parent and has been flipped."""


@dataclass(frozen=True)
class FeederModel:
    """Validated radial feeder with per-branch impedances and operating limits.

    Branch ``k`` connects ``edges[k][0]`` to ``edges[k][1]``; per-branch
    arrays (``r``, ``x``, ``l_max``, flow boxes) are aligned with ``edges``.
    ``v_min``/``v_max`` hold squared-voltage limits for nodes ``1..n``.

    After :func:`order_radial` the numbering is canonical: node indices are
    breadth-first from the substation, branch ``k`` feeds child node ``k+1``,
    ``parent`` maps each node to its (strictly smaller) parent index, and
    ``user_ids`` records the original label of each internal index.

    Instances are immutable; arrays are read-only and safe to share across
    threads.
    """

    v0: float
    edges: tuple[tuple[int, int], ...]
    r: np.ndarray
    x: np.ndarray
    l_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    user_ids: tuple[int, ...]
    parent: tuple[int, ...] | None = None

    @property
    def n(self) -> int:
        """Number of non-substation nodes (equals the branch count)."""
        return len(self.edges)

    @property
    def is_ordered(self) -> bool:
        return self.parent is not None

    def children(self) -> list[list[int]]:
        """Child lists per node index; requires an ordered model."""
        if self.parent is None:
            raise ValueError("feeder is not ordered; call order_radial first")
        kids: list[list[int]] = [[] for _ in range(self.n + 1)]
        for j in range(1, self.n + 1):
            kids[self.parent[j]].append(j)
        return kids

    def to_user(self, values: np.ndarray) -> np.ndarray:
        """Re-index a node array (internal order, nodes 1..n) to user-id order."""
        out = np.empty_like(values)
        for k in range(1, self.n + 1):
            out[self.user_ids[k] - 1] = values[k - 1]
        return out

    def to_internal(self, values: np.ndarray) -> np.ndarray:
        """Re-index a node array (user-id order) to internal order."""
        out = np.empty_like(values)
        for k in range(1, self.n + 1):
            out[k - 1] = values[self.user_ids[k] - 1]
        return out


_TOP_KEYS = {"base", "nodes", "branches"}
_BASE_KEYS = {"v0_pu2"}
_NODE_KEYS = {"id", "vmin_pu2", "vmax_pu2"}
_BRANCH_KEYS = {
    "from",
    "to",
    "r_pu",
    "x_pu",
    "lmax_pu2",
    "pmin_pu",
    "pmax_pu",
    "qmin_pu",
    "qmax_pu",
}


def _reject_unknown(record: dict, allowed: set[str], where: str) -> None:
    unknown = set(record) - allowed
    if unknown:
        raise FeederFormatError(
            f"unknown field(s) in {where}: {', '.join(sorted(unknown))}"
        )


def _number(record: dict, key: str, where: str, default: float | None = None) -> float:
    if key not in record:
        if default is None:
            raise FeederFormatError(f"missing field '{key}' in {where}")
        return default
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FeederFormatError(f"field '{key}' in {where} must be a number")
    return float(value)


def _node_id(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise FeederFormatError(f"node id in {where} must be a nonnegative integer")
    return value


def load_feeder(source: bytes | str) -> FeederModel:
    """Parse and validate a feeder description.

    Parameters
    ----------
    source : bytes or str
        JSON document with ``base.v0_pu2``, an optional ``nodes`` list
        carrying squared-voltage limits, and a ``branches`` list with
        per-unit impedances and optional flow/current limits.  Unknown
        fields are rejected.

    Returns
    -------
    FeederModel
        Validated model in the file's own numbering (not yet ordered).

    Raises
    ------
    FeederFormatError
        On parse errors, a non-radial graph, a missing substation (node 0),
        negative impedances, or inconsistent limits.
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise FeederFormatError(f"parse error: {exc}") from None
    if not isinstance(doc, dict):
        raise FeederFormatError("parse error: top-level value must be an object")
    _reject_unknown(doc, _TOP_KEYS, "feeder document")
    if "base" not in doc or not isinstance(doc["base"], dict):
        raise FeederFormatError("missing 'base' object")
    _reject_unknown(doc["base"], _BASE_KEYS, "base")
    v0 = _number(doc["base"], "v0_pu2", "base")
    if not np.isfinite(v0) or v0 <= 0.0:
        raise FeederFormatError("base.v0_pu2 must be a positive finite number")

    raw_branches = doc.get("branches")
    if not isinstance(raw_branches, list) or not raw_branches:
        raise FeederFormatError("'branches' must be a non-empty list")

    edges: list[tuple[int, int]] = []
    r, x = [], []
    lmax, pmin, pmax, qmin, qmax = [], [], [], [], []
    for idx, rec in enumerate(raw_branches):
        if not isinstance(rec, dict):
            raise FeederFormatError(f"branch #{idx} must be an object")
        _reject_unknown(rec, _BRANCH_KEYS, f"branch #{idx}")
        f = _node_id(rec.get("from"), f"branch #{idx}")
        t = _node_id(rec.get("to"), f"branch #{idx}")
        if f == t:
            raise FeederFormatError(f"non-radial: branch #{idx} is a self-loop on node {f}")
        ri = _number(rec, "r_pu", f"branch #{idx}")
        xi = _number(rec, "x_pu", f"branch #{idx}")
        if not (np.isfinite(ri) and np.isfinite(xi)):
            raise FeederFormatError(f"branch #{idx} impedance must be finite")
        if ri < 0.0 or xi < 0.0:
            raise FeederFormatError(f"negative impedance on branch #{idx} ({f}->{t})")
        li = _number(rec, "lmax_pu2", f"branch #{idx}", default=INF)
        if li <= 0.0:
            raise FeederFormatError(f"branch #{idx}: lmax_pu2 must be positive")
        pmn = _number(rec, "pmin_pu", f"branch #{idx}", default=-INF)
        pmx = _number(rec, "pmax_pu", f"branch #{idx}", default=INF)
        qmn = _number(rec, "qmin_pu", f"branch #{idx}", default=-INF)
        qmx = _number(rec, "qmax_pu", f"branch #{idx}", default=INF)
        if pmn > pmx or qmn > qmx:
            raise FeederFormatError(f"branch #{idx}: empty flow box")
        edges.append((f, t))
        r.append(ri)
        x.append(xi)
        lmax.append(li)
        pmin.append(pmn)
        pmax.append(pmx)
        qmin.append(qmn)
        qmax.append(qmx)

    ids = {0} | {u for e in edges for u in e}
    n = len(ids) - 1
    if 0 not in {u for e in edges for u in e} and n > 0:
        raise FeederFormatError("missing substation: no branch touches node 0")
    if ids != set(range(n + 1)):
        raise FeederFormatError(
            f"node ids must be contiguous 0..{n}; got {sorted(ids)}"
        )
    if len(edges) != n:
        raise FeederFormatError(
            f"non-radial: {n + 1} nodes require {n} branches, got {len(edges)}"
        )

    # node limit records (optional; substation limits are ignored)
    vmin = np.zeros(n)
    vmax = np.full(n, INF)
    raw_nodes = doc.get("nodes", [])
    if not isinstance(raw_nodes, list):
        raise FeederFormatError("'nodes' must be a list")
    seen: set[int] = set()
    for idx, rec in enumerate(raw_nodes):
        if not isinstance(rec, dict):
            raise FeederFormatError(f"node #{idx} must be an object")
        _reject_unknown(rec, _NODE_KEYS, f"node #{idx}")
        i = _node_id(rec.get("id"), f"node #{idx}")
        if i in seen:
            raise FeederFormatError(f"duplicate node record for id {i}")
        seen.add(i)
        if i > n:
            raise FeederFormatError(f"node record for unknown id {i}")
        if i == 0:
            continue
        vmin[i - 1] = _number(rec, "vmin_pu2", f"node {i}", default=0.0)
        vmax[i - 1] = _number(rec, "vmax_pu2", f"node {i}", default=INF)
        if vmin[i - 1] >= vmax[i - 1]:
            raise FeederFormatError(f"node {i}: vmin_pu2 must be below vmax_pu2")
        if vmin[i - 1] < 0.0:
            raise FeederFormatError(f"node {i}: vmin_pu2 must be nonnegative")

    # connectivity (with the correct edge count, connected == tree)
    adj: list[list[int]] = [[] for _ in range(n + 1)]
    for f, t in edges:
        adj[f].append(t)
        adj[t].append(f)
    seen_nodes = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen_nodes:
                seen_nodes.add(v)
                queue.append(v)
    if len(seen_nodes) != n + 1:
        missing = sorted(set(range(n + 1)) - seen_nodes)
        raise FeederFormatError(
            f"non-radial: nodes {missing} are disconnected from the substation"
        )

    return _freeze(
        FeederModel(
            v0=v0,
            edges=tuple(edges),
            r=np.asarray(r),
            x=np.asarray(x),
            l_max=np.asarray(lmax),
            p_min=np.asarray(pmin),
            p_max=np.asarray(pmax),
            q_min=np.asarray(qmin),
            q_max=np.asarray(qmax),
            v_min=vmin,
            v_max=vmax,
            user_ids=tuple(range(n + 1)),
            parent=None,
        )
    )


def _freeze(model: FeederModel) -> FeederModel:
    for arr in (
        model.r,
        model.x,
        model.l_max,
        model.p_min,
        model.p_max,
        model.q_min,
        model.q_max,
        model.v_min,
        model.v_max,
    ):
        arr.setflags(write=False)
    return model


def order_radial(model: FeederModel) -> FeederModel:
    """Renumber a radial feeder so every parent index precedes its children.

    Breadth-first from the substation with ascending tie-breaks, which makes
    the reduced incidence matrix unit upper triangular.  Branch ``k`` of the
    result feeds child node ``k+1``; branches supplied child->parent are
    flipped with a :class:`BranchOrientationWarning`.  ``user_ids`` maps each
    internal index back to the caller's numbering.
    """
    n = model.n
    if model.is_ordered:
        return model

    # fast path: numbering already canonical, only direction checks needed
    if all(t == k + 1 and f < t for k, (f, t) in enumerate(model.edges)):
        return _freeze(
            FeederModel(
                v0=model.v0,
                edges=model.edges,
                r=model.r.copy(),
                x=model.x.copy(),
                l_max=model.l_max.copy(),
                p_min=model.p_min.copy(),
                p_max=model.p_max.copy(),
                q_min=model.q_min.copy(),
                q_max=model.q_max.copy(),
                v_min=model.v_min.copy(),
                v_max=model.v_max.copy(),
                user_ids=model.user_ids,
                parent=tuple([-1] + [f for f, _ in model.edges]),
            )
        )

    adj: list[list[int]] = [[] for _ in range(n + 1)]
    branch_of: dict[tuple[int, int], int] = {}
    for k, (f, t) in enumerate(model.edges):
        adj[f].append(t)
        adj[t].append(f)
        branch_of[(f, t)] = k
        branch_of[(t, f)] = k
    for nbrs in adj:
        nbrs.sort()

    order = [0]
    parent_user = {0: -1}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in parent_user:
                parent_user[v] = u
                order.append(v)
                queue.append(v)

    new_index = {u: k for k, u in enumerate(order)}
    parent = [-1] * (n + 1)
    edges: list[tuple[int, int]] = []
    perm_branch = []
    flipped: list[tuple[int, int]] = []
    for j in range(1, n + 1):
        child_user = order[j]
        par_user = parent_user[child_user]
        parent[j] = new_index[par_user]
        edges.append((parent[j], j))
        k = branch_of[(par_user, child_user)]
        perm_branch.append(k)
        if model.edges[k] != (par_user, child_user):
            flipped.append(model.edges[k])
    if flipped:
        warnings.warn(
            f"reoriented {len(flipped)} branch(es) parent->child: {flipped}",
            BranchOrientationWarning,
            stacklevel=2,
        )

    bperm = np.asarray(perm_branch)
    nperm = np.asarray([order[j] - 1 for j in range(1, n + 1)])
    user_ids = tuple(model.user_ids[u] for u in order)
    return _freeze(
        FeederModel(
            v0=model.v0,
            edges=tuple(edges),
            r=model.r[bperm],
            x=model.x[bperm],
            l_max=model.l_max[bperm],
            p_min=model.p_min[bperm],
            p_max=model.p_max[bperm],
            q_min=model.q_min[bperm],
            q_max=model.q_max[bperm],
            v_min=model.v_min[nperm],
            v_max=model.v_max[nperm],
            user_ids=user_ids,
            parent=tuple(parent),
        )
    )
