"""Robust convex dispatch programs over the branch-flow envelopes.

The single-period program optimizes generator injections subject to
envelope variables bracketing every constrained quantity: the affine
current lower bound widens the *upper* flow/voltage envelopes, the epigraph
current upper bound widens the *lower* ones, so any dispatch accepted here
keeps a margin for the neglected nonlinearity.  The multi-period program
stacks per-step copies coupled only through battery state-of-charge
recursion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .bounds import CurrentEnvelope, OperatingPoint, build_envelope
from .feeder import FeederModel
from .loadflow import InjectionProfile, Violation, check_admissible, solve_loadflow
from .matrices import SensitivityMatrices
from .qp import QpProblem, QpSolution, summarize_certificate

INF = float("inf")

#: curvature placed on variables that carry no objective term (the current
#: epigraph and costless reactive dispatch); it breaks ties toward the tight
#: envelope without measurably moving the dispatch optimum
_TIE_BREAK = 1e-6


class ScenarioFormatError(ValueError):
    """The scenario description failed to parse or validate."""


class OpfInfeasibleError(RuntimeError):
    """The convex program has no feasible dispatch (certificate attached)."""

    def __init__(self, status: str, detail: list[tuple[str, float]] | None = None):
        rows = ", ".join(name for name, _ in detail) if detail else "none identified"
        super().__init__(f"dispatch program is {status}; dominant rows: {rows}")
        self.status = status
        self.detail = detail or []


def _check_expansion_point(env: CurrentEnvelope, model: FeederModel) -> None:
    # the epigraph floor sits at the expansion currents, so a point already
    # above a current limit admits no feasible dispatch at all
    over = np.where(env.base > model.l_max + 1e-9)[0]
    if over.size:
        detail = [
            (f"cur_cap:{model.user_ids[int(k) + 1]}",
             float(env.base[k] - model.l_max[k]))
            for k in over
        ]
        raise OpfInfeasibleError("infeasible-at-expansion-point", detail)


class OpfBuilderError(AssertionError):
    """An extracted solution violates an identity the builder guarantees."""


class SolverLimitError(RuntimeError):
    """The QP solver hit its iteration budget without a certified outcome."""


@dataclass(frozen=True)
class Generator:
    """Dispatchable injection at ``node`` with box capability and convex cost."""

    node: int
    p_min: float
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    c1: float = 0.0
    c2: float = 0.0


@dataclass(frozen=True)
class BatterySpec:
    """Energy storage at ``node``; positive power means discharge."""

    node: int
    p_rate: float
    b_max: float
    b_min: float
    b0: float
    b_final: float | None = None


@dataclass(frozen=True)
class Horizon:
    steps: int
    dt_h: float
    load_series: tuple[float, ...]


@dataclass(frozen=True)
class Scenario:
    """Net demand, dispatchable resources, and objective for one study.

    ``load_p``/``load_q`` are demand-positive, in user node order (index
    ``id - 1``).  Objective kinds: ``cost`` minimizes the quadratic
    generation cost, ``hosting``/``flex_up`` maximize aggregate injection,
    ``flex_down`` maximizes aggregate consumption.
    """

    load_p: np.ndarray
    load_q: np.ndarray
    generators: tuple[Generator, ...]
    objective: str = "cost"
    horizon: Horizon | None = None
    batteries: tuple[BatterySpec, ...] = ()


_OBJECTIVES = ("cost", "hosting", "flex_up", "flex_down")
_SCN_KEYS = {"loads", "generators", "objective", "horizon", "batteries"}
_LOAD_KEYS = {"node", "p_pu", "q_pu"}
_GEN_KEYS = {"node", "p_min_pu", "p_max_pu", "q_min_pu", "q_max_pu", "c1", "c2"}
_HOR_KEYS = {"T", "dt_h", "load_series"}
_BAT_KEYS = {"node", "p_rate_pu", "b_max_puh", "b_min_puh", "b0_puh", "b_final_puh"}


def _reject_unknown(record: dict, allowed: set[str], where: str) -> None:
    unknown = set(record) - allowed
    if unknown:
        raise ScenarioFormatError(
            f"unknown field(s) in {where}: {', '.join(sorted(unknown))}"
        )


def _num(record: dict, key: str, where: str, default=None) -> float:
    if key not in record:
        if default is None:
            raise ScenarioFormatError(f"missing field '{key}' in {where}")
        return float(default)
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioFormatError(f"field '{key}' in {where} must be a number")
    return float(value)


def _node(record: dict, n: int, where: str) -> int:
    value = record.get("node")
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioFormatError(f"missing or non-integer 'node' in {where}")
    if not 1 <= value <= n:
        raise ScenarioFormatError(f"{where} references unknown node {value}")
    return value


def load_scenario(source: bytes | str, model: FeederModel) -> Scenario:
    """Parse and validate a scenario file against a feeder model."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"parse error: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioFormatError("parse error: top-level value must be an object")
    _reject_unknown(doc, _SCN_KEYS, "scenario document")
    n = model.n

    load_p = np.zeros(n)
    load_q = np.zeros(n)
    for idx, rec in enumerate(doc.get("loads", [])):
        if not isinstance(rec, dict):
            raise ScenarioFormatError(f"load #{idx} must be an object")
        _reject_unknown(rec, _LOAD_KEYS, f"load #{idx}")
        node = _node(rec, n, f"load #{idx}")
        load_p[node - 1] += _num(rec, "p_pu", f"load #{idx}", default=0.0)
        load_q[node - 1] += _num(rec, "q_pu", f"load #{idx}", default=0.0)
    if not (np.all(np.isfinite(load_p)) and np.all(np.isfinite(load_q))):
        raise ScenarioFormatError("loads must be finite")

    gens = []
    for idx, rec in enumerate(doc.get("generators", [])):
        if not isinstance(rec, dict):
            raise ScenarioFormatError(f"generator #{idx} must be an object")
        _reject_unknown(rec, _GEN_KEYS, f"generator #{idx}")
        node = _node(rec, n, f"generator #{idx}")
        g = Generator(
            node=node,
            p_min=_num(rec, "p_min_pu", f"generator #{idx}"),
            p_max=_num(rec, "p_max_pu", f"generator #{idx}"),
            q_min=_num(rec, "q_min_pu", f"generator #{idx}", default=0.0),
            q_max=_num(rec, "q_max_pu", f"generator #{idx}", default=0.0),
            c1=_num(rec, "c1", f"generator #{idx}", default=0.0),
            c2=_num(rec, "c2", f"generator #{idx}", default=0.0),
        )
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise ScenarioFormatError(f"generator #{idx}: empty capability box")
        if g.c1 < 0.0:
            raise ScenarioFormatError(
                f"generator #{idx}: quadratic cost must be nonnegative"
            )
        if not all(np.isfinite(v) for v in (g.c1, g.c2)):
            raise ScenarioFormatError(f"generator #{idx}: costs must be finite")
        gens.append(g)

    objective = doc.get("objective", "cost")
    if objective not in _OBJECTIVES:
        raise ScenarioFormatError(
            f"objective must be one of {_OBJECTIVES}, got {objective!r}"
        )

    horizon = None
    if "horizon" in doc:
        rec = doc["horizon"]
        if not isinstance(rec, dict):
            raise ScenarioFormatError("'horizon' must be an object")
        _reject_unknown(rec, _HOR_KEYS, "horizon")
        steps = rec.get("T")
        if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
            raise ScenarioFormatError("horizon.T must be a positive integer")
        dt_h = _num(rec, "dt_h", "horizon")
        if dt_h <= 0:
            raise ScenarioFormatError("horizon.dt_h must be positive")
        series = rec.get("load_series", [1.0] * steps)
        if not isinstance(series, list) or len(series) != steps:
            raise ScenarioFormatError("horizon.load_series must list one value per step")
        series = tuple(float(s) for s in series)
        if any(not np.isfinite(s) or s < 0 for s in series):
            raise ScenarioFormatError("horizon.load_series entries must be >= 0")
        horizon = Horizon(steps=steps, dt_h=dt_h, load_series=series)

    batteries = []
    for idx, rec in enumerate(doc.get("batteries", [])):
        if not isinstance(rec, dict):
            raise ScenarioFormatError(f"battery #{idx} must be an object")
        _reject_unknown(rec, _BAT_KEYS, f"battery #{idx}")
        node = _node(rec, n, f"battery #{idx}")
        b = BatterySpec(
            node=node,
            p_rate=_num(rec, "p_rate_pu", f"battery #{idx}"),
            b_max=_num(rec, "b_max_puh", f"battery #{idx}"),
            b_min=_num(rec, "b_min_puh", f"battery #{idx}", default=0.0),
            b0=_num(rec, "b0_puh", f"battery #{idx}"),
            b_final=(
                _num(rec, "b_final_puh", f"battery #{idx}")
                if "b_final_puh" in rec
                else None
            ),
        )
        if b.p_rate < 0:
            raise ScenarioFormatError(f"battery #{idx}: p_rate_pu must be >= 0")
        if not b.b_min <= b.b0 <= b.b_max:
            raise ScenarioFormatError(
                f"battery #{idx}: initial charge outside [b_min, b_max]"
            )
        batteries.append(b)

    scn = Scenario(
        load_p=load_p,
        load_q=load_q,
        generators=tuple(gens),
        objective=objective,
        horizon=horizon,
        batteries=tuple(batteries),
    )
    load_p.setflags(write=False)
    load_q.setflags(write=False)
    return scn


def scenario_for_step(scenario: Scenario, step: int) -> Scenario:
    """Scenario with loads scaled by the horizon series at ``step``."""
    if scenario.horizon is None:
        raise ValueError("scenario has no horizon block")
    scale = scenario.horizon.load_series[step]
    return replace(
        scenario, load_p=scenario.load_p * scale, load_q=scenario.load_q * scale
    )


def forecast_injections(scenario: Scenario, model: FeederModel) -> InjectionProfile:
    """Net injections at the forecast demand with no dispatch (internal order)."""
    return InjectionProfile(
        p=-model.to_internal(scenario.load_p), q=-model.to_internal(scenario.load_q)
    )


def dispatch_injections(
    scenario: Scenario,
    model: FeederModel,
    p_gen: np.ndarray,
    q_gen: np.ndarray,
    battery_p: np.ndarray | None = None,
    battery_nodes: tuple[int, ...] = (),
) -> InjectionProfile:
    """Net injections for a dispatch, in internal order."""
    p_user = -scenario.load_p.copy()
    q_user = -scenario.load_q.copy()
    for g, pg, qg in zip(scenario.generators, p_gen, q_gen):
        p_user[g.node - 1] += pg
        q_user[g.node - 1] += qg
    if battery_p is not None:
        for node, pb in zip(battery_nodes, battery_p):
            p_user[node - 1] += pb
    return InjectionProfile(
        p=model.to_internal(p_user), q=model.to_internal(q_user)
    )


# --- program assembly -------------------------------------------------------


@dataclass(frozen=True)
class _StepBlock:
    """Row blocks of one period over columns [pg, qg, lam, pb]."""

    rows: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    row_names: tuple[str, ...]
    var_lb: np.ndarray
    var_ub: np.ndarray
    var_names: tuple[str, ...]
    obj_diag: np.ndarray
    obj_lin: np.ndarray
    env: CurrentEnvelope


@dataclass(frozen=True)
class P3Labels:
    model: FeederModel
    mats: SensitivityMatrices
    scenario: Scenario
    env: CurrentEnvelope
    sl_pg: slice
    sl_qg: slice
    sl_lam: slice


@dataclass(frozen=True)
class P4Labels:
    model: FeederModel
    mats: SensitivityMatrices
    scenarios: tuple[Scenario, ...]
    envs: tuple[CurrentEnvelope, ...]
    batteries: tuple[BatterySpec, ...]
    steps: int
    dt_h: float
    step_width: int
    sl_pg: tuple[slice, ...]
    sl_qg: tuple[slice, ...]
    sl_lam: tuple[slice, ...]
    sl_pb: tuple[slice, ...]


def _gen_index(model: FeederModel, gens: tuple[Generator, ...]) -> np.ndarray:
    inv = {u: k for k, u in enumerate(model.user_ids)}
    return np.array([inv[g.node] - 1 for g in gens], dtype=int)


def _step_block(
    mats: SensitivityMatrices,
    env: CurrentEnvelope,
    scenario: Scenario,
    model: FeederModel,
    batteries: tuple[BatterySpec, ...],
    tag: str = "",
) -> _StepBlock:
    n = model.n
    gens = scenario.generators
    ng = len(gens)
    nb = len(batteries)
    uids = model.user_ids

    P_L = model.to_internal(scenario.load_p)
    Q_L = model.to_internal(scenario.load_q)
    S_g = np.zeros((n, ng))
    gi = _gen_index(model, gens)
    for k, i in enumerate(gi):
        S_g[i, k] = 1.0
    S_b = np.zeros((n, nb))
    if nb:
        inv = {u: k for k, u in enumerate(uids)}
        for k, b in enumerate(batteries):
            S_b[inv[b.node] - 1, k] = 1.0

    C = mats.subtree
    DR, DX, Hv = mats.loss_p, mats.loss_q, mats.loss_v
    Mp, Mq = mats.vsens_p, mats.vsens_q
    Wp, Wq = env.slope_p, env.slope_q
    l0 = env.base
    k_env = l0 + env.offset  # l_lo = Wp p + Wq q + k_env

    def cols(Kp: np.ndarray, Kq: np.ndarray, lam: np.ndarray | None, k0: np.ndarray):
        """Assemble (n, nvar) rows for value = Kp p + Kq q + lam_term + k0."""
        block = np.zeros((n, 2 * ng + n + nb))
        block[:, 0:ng] = Kp @ S_g
        block[:, ng : 2 * ng] = Kq @ S_g
        if lam is not None:
            block[:, 2 * ng : 2 * ng + n] = lam
        if nb:
            block[:, 2 * ng + n :] = Kp @ S_b
        const = k0 - Kp @ P_L - Kq @ Q_L
        return block, const

    zeros = np.zeros((n, n))
    eye = np.eye(n)
    head = model.v0 * np.ones(n)

    rows: list[np.ndarray] = []
    lbs: list[np.ndarray] = []
    ubs: list[np.ndarray] = []
    names: list[str] = []

    def add(block, const, lo, hi, stem):
        rows.append(block)
        lbs.append(lo - const if lo is not None else np.full(n, -INF))
        ubs.append(hi - const if hi is not None else np.full(n, INF))
        names.extend(f"{stem}:{uids[j + 1]}{tag}" for j in range(n))

    # epigraph gap: lam - 2 g >= l0
    blk, const = cols(-2.0 * Wp, -2.0 * Wq, eye, -2.0 * env.offset)
    add(blk, const, l0, None, "cur_hi_gap")
    # flow and voltage envelopes against their limits
    blk, const = cols(C - DR @ Wp, -DR @ Wq, None, -DR @ k_env)
    add(blk, const, None, model.p_max, "pflow_hi")
    blk, const = cols(C, zeros, -DR, np.zeros(n))
    add(blk, const, model.p_min, None, "pflow_lo")
    blk, const = cols(-DX @ Wp, C - DX @ Wq, None, -DX @ k_env)
    add(blk, const, None, model.q_max, "qflow_hi")
    blk, const = cols(zeros, C, -DX, np.zeros(n))
    add(blk, const, model.q_min, None, "qflow_lo")
    blk, const = cols(Mp - Hv @ Wp, Mq - Hv @ Wq, None, head - Hv @ k_env)
    add(blk, const, None, model.v_max, "volt_hi")
    blk, const = cols(Mp, Mq, -Hv, head)
    add(blk, const, model.v_min, None, "volt_lo")

    # variable boxes as identity rows (epigraph floor clipped against sub-ulp
    # limit overshoot of the expansion currents; real overshoot was rejected
    # up front)
    nvar = 2 * ng + n + nb
    rows.append(np.eye(nvar))
    var_lb = np.concatenate(
        [
            np.array([g.p_min for g in gens]),
            np.array([g.q_min for g in gens]),
            np.minimum(l0, model.l_max),
            np.array([-b.p_rate for b in batteries]),
        ]
    )
    var_ub = np.concatenate(
        [
            np.array([g.p_max for g in gens]),
            np.array([g.q_max for g in gens]),
            model.l_max,
            np.array([b.p_rate for b in batteries]),
        ]
    )
    lbs.append(var_lb)
    ubs.append(var_ub)
    var_names = (
        [f"pg:{g.node}{tag}" for g in gens]
        + [f"qg:{g.node}{tag}" for g in gens]
        + [f"cur_hi:{uids[j + 1]}{tag}" for j in range(n)]
        + [f"pb:{b.node}{tag}" for b in batteries]
    )
    names.extend(f"box_{v}" for v in var_names)

    obj_diag = np.zeros(nvar)
    obj_lin = np.zeros(nvar)
    if scenario.objective == "cost":
        if ng == 0:
            raise ValueError("cost objective requires at least one generator")
        obj_diag[0:ng] = 2.0 * np.array([g.c1 for g in gens])
        obj_lin[0:ng] = np.array([g.c2 for g in gens])
    elif scenario.objective in ("hosting", "flex_up"):
        obj_lin[0:ng] = -1.0
    elif scenario.objective == "flex_down":
        obj_lin[0:ng] = 1.0
    # reactive dispatch and the epigraph have no cost of their own
    obj_diag[ng : 2 * ng + n] += 2.0 * _TIE_BREAK

    return _StepBlock(
        rows=np.vstack(rows),
        lb=np.concatenate(lbs),
        ub=np.concatenate(ubs),
        row_names=tuple(names),
        var_lb=var_lb,
        var_ub=var_ub,
        var_names=tuple(var_names),
        obj_diag=obj_diag,
        obj_lin=obj_lin,
        env=env,
    )


def build_p3(
    mats: SensitivityMatrices,
    op_point: OperatingPoint,
    scenario: Scenario,
    model: FeederModel,
) -> tuple[QpProblem, P3Labels]:
    """Assemble the single-period robust dispatch QP around one operating point.

    Decision variables are generator injections plus the per-branch current
    upper-envelope epigraph; all envelope relations enter affinely.  Returns
    the problem together with the labels needed to extract a solution.
    """
    if scenario.load_p.shape != (model.n,):
        raise ValueError("scenario does not match the model size")
    env = build_envelope(op_point, mats)
    _check_expansion_point(env, model)
    block = _step_block(mats, env, scenario, model, batteries=())
    ng = len(scenario.generators)
    n = model.n
    prob = QpProblem(
        G=sp.diags(block.obj_diag).tocsc(),
        c=block.obj_lin,
        M=sp.csc_matrix(block.rows),
        lb=block.lb,
        ub=block.ub,
        var_names=block.var_names,
        row_names=block.row_names,
    )
    labels = P3Labels(
        model=model,
        mats=mats,
        scenario=scenario,
        env=env,
        sl_pg=slice(0, ng),
        sl_qg=slice(ng, 2 * ng),
        sl_lam=slice(2 * ng, 2 * ng + n),
    )
    return prob, labels


def build_p4(
    mats: SensitivityMatrices,
    op_points: list[OperatingPoint],
    scenarios: list[Scenario],
    batteries: tuple[BatterySpec, ...],
    steps: int,
    dt_h: float,
    model: FeederModel,
) -> tuple[QpProblem, P4Labels]:
    """Assemble the multi-period dispatch QP.

    One constraint block per step (its own operating point and scaled
    loads), coupled only through the battery charge recursion
    ``B(t+1) = B(t) - P_b(t) dt`` expressed as running-sum rows, plus the
    charge box and optional terminal charge equality.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(op_points) != steps or len(scenarios) != steps:
        raise ValueError("need one operating point and scenario per step")

    blocks = []
    envs = []
    for t in range(steps):
        env = build_envelope(op_points[t], mats)
        _check_expansion_point(env, model)
        envs.append(env)
        tag = f"@t{t}" if steps > 1 else ""
        blocks.append(
            _step_block(mats, env, scenarios[t], model, batteries, tag=tag)
        )

    ng = len(scenarios[0].generators)
    n = model.n
    nb = len(batteries)
    width = 2 * ng + n + nb
    nvar = width * steps
    m_step = blocks[0].rows.shape[0]
    n_final = sum(1 for b in batteries if b.b_final is not None)

    M = sp.lil_matrix((m_step * steps + steps * nb + n_final, nvar))
    lb = np.full(M.shape[0], -INF)
    ub = np.full(M.shape[0], INF)
    names: list[str] = []
    obj_diag = np.zeros(nvar)
    obj_lin = np.zeros(nvar)
    for t, block in enumerate(blocks):
        r0 = t * m_step
        c0 = t * width
        M[r0 : r0 + m_step, c0 : c0 + width] = block.rows
        lb[r0 : r0 + m_step] = block.lb
        ub[r0 : r0 + m_step] = block.ub
        names.extend(block.row_names)
        obj_diag[c0 : c0 + width] = block.obj_diag
        obj_lin[c0 : c0 + width] = block.obj_lin

    # battery charge recursion as running sums of discharge power
    row = m_step * steps
    for k, b in enumerate(batteries):
        for t in range(1, steps + 1):
            for s in range(t):
                M[row, s * width + 2 * ng + n + k] = -dt_h
            lb[row] = b.b_min - b.b0
            ub[row] = b.b_max - b.b0
            names.append(f"soc:{b.node}@t{t}")
            row += 1
    for k, b in enumerate(batteries):
        if b.b_final is None:
            continue
        for s in range(steps):
            M[row, s * width + 2 * ng + n + k] = -dt_h
        lb[row] = b.b_final - b.b0
        ub[row] = b.b_final - b.b0
        names.append(f"soc_final:{b.node}")
        row += 1

    var_names: list[str] = []
    for block in blocks:
        var_names.extend(block.var_names)

    prob = QpProblem(
        G=sp.diags(obj_diag).tocsc(),
        c=obj_lin,
        M=M.tocsc(),
        lb=lb,
        ub=ub,
        var_names=tuple(var_names),
        row_names=tuple(names),
    )
    labels = P4Labels(
        model=model,
        mats=mats,
        scenarios=tuple(scenarios),
        envs=tuple(envs),
        batteries=batteries,
        steps=steps,
        dt_h=dt_h,
        step_width=width,
        sl_pg=tuple(slice(t * width, t * width + ng) for t in range(steps)),
        sl_qg=tuple(slice(t * width + ng, t * width + 2 * ng) for t in range(steps)),
        sl_lam=tuple(
            slice(t * width + 2 * ng, t * width + 2 * ng + n) for t in range(steps)
        ),
        sl_pb=tuple(
            slice(t * width + 2 * ng + n, (t + 1) * width) for t in range(steps)
        ),
    )
    return prob, labels


# --- solution extraction ----------------------------------------------------


@dataclass(frozen=True)
class RobustOpfSolution:
    """Optimal dispatch with its envelope bands, all in user numbering.

    Node arrays are indexed ``id - 1``; branch arrays are indexed by the
    child node id of each branch (``edges`` lists parent/child ids in the
    same order).
    """

    gen_nodes: tuple[int, ...]
    p_gen: np.ndarray
    q_gen: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    flow_p_hi: np.ndarray
    flow_p_lo: np.ndarray
    flow_q_hi: np.ndarray
    flow_q_lo: np.ndarray
    v_hi: np.ndarray
    v_lo: np.ndarray
    cur_lo: np.ndarray
    cur_hi: np.ndarray
    edges: tuple[tuple[int, int], ...]
    objective: float
    status: str


@dataclass(frozen=True)
class DispatchSchedule:
    """Multi-period dispatch: per-step solutions plus battery trajectories.

    ``soc`` has shape (batteries, steps + 1) and satisfies the recursion
    ``soc[:, t+1] = soc[:, t] - p_bat[t] * dt_h`` exactly.
    """

    steps: int
    dt_h: float
    bat_nodes: tuple[int, ...]
    p_bat: np.ndarray
    soc: np.ndarray
    per_step: tuple[RobustOpfSolution, ...]
    objective: float
    status: str


def _objective_value(scenario: Scenario, p_gen: np.ndarray) -> float:
    if scenario.objective == "cost":
        c1 = np.array([g.c1 for g in scenario.generators])
        c2 = np.array([g.c2 for g in scenario.generators])
        return float(c1 @ (p_gen**2) + c2 @ p_gen)
    if scenario.objective in ("hosting", "flex_up"):
        return float(-np.sum(p_gen))
    return float(np.sum(p_gen))


def _solution_from_dispatch(
    model: FeederModel,
    mats: SensitivityMatrices,
    env: CurrentEnvelope,
    scenario: Scenario,
    p_gen: np.ndarray,
    q_gen: np.ndarray,
    lam: np.ndarray,
    battery_p: np.ndarray | None,
    batteries: tuple[BatterySpec, ...],
    status: str,
    check_tol: float = 1e-6,
) -> RobustOpfSolution:
    inj = dispatch_injections(
        scenario,
        model,
        p_gen,
        q_gen,
        battery_p,
        tuple(b.node for b in batteries),
    )
    p_int, q_int = inj.p, inj.q
    g = env.linear_term(p_int, q_int)
    l_lo = env.base + g
    l_hi = np.maximum(env.base, env.base + 2.0 * g)
    if np.any(lam < l_hi - check_tol):
        raise OpfBuilderError("epigraph variable fell below its defining maximum")

    C, DR, DX = mats.subtree, mats.loss_p, mats.loss_q
    Mp, Mq, Hv = mats.vsens_p, mats.vsens_q, mats.loss_v
    head = model.v0 * np.ones(model.n)
    flow_p_hi = C @ p_int - DR @ l_lo
    flow_p_lo = C @ p_int - DR @ l_hi
    flow_q_hi = C @ q_int - DX @ l_lo
    flow_q_lo = C @ q_int - DX @ l_hi
    v_hi = head + Mp @ p_int + Mq @ q_int - Hv @ l_lo
    v_lo = head + Mp @ p_int + Mq @ q_int - Hv @ l_hi

    if np.any(flow_p_lo > flow_p_hi + 1e-9) or np.any(v_lo > v_hi + 1e-9):
        raise OpfBuilderError("envelope ordering violated")
    checks = (
        (flow_p_hi <= model.p_max + check_tol),
        (flow_p_lo >= model.p_min - check_tol),
        (flow_q_hi <= model.q_max + check_tol),
        (flow_q_lo >= model.q_min - check_tol),
        (v_hi <= model.v_max + check_tol),
        (v_lo >= model.v_min - check_tol),
        (l_hi <= model.l_max + check_tol),
    )
    if not all(np.all(c) for c in checks):
        raise OpfBuilderError("an envelope constraint is violated at the optimum")

    uids = model.user_ids
    order = np.argsort([uids[k + 1] for k in range(model.n)])
    edges = tuple(
        (uids[model.parent[k + 1]], uids[k + 1]) for k in order
    )
    return RobustOpfSolution(
        gen_nodes=tuple(g_.node for g_ in scenario.generators),
        p_gen=p_gen.copy(),
        q_gen=q_gen.copy(),
        p_inj=model.to_user(p_int),
        q_inj=model.to_user(q_int),
        flow_p_hi=model.to_user(flow_p_hi),
        flow_p_lo=model.to_user(flow_p_lo),
        flow_q_hi=model.to_user(flow_q_hi),
        flow_q_lo=model.to_user(flow_q_lo),
        v_hi=model.to_user(v_hi),
        v_lo=model.to_user(v_lo),
        cur_lo=model.to_user(l_lo),
        cur_hi=model.to_user(l_hi),
        edges=edges,
        objective=_objective_value(scenario, p_gen),
        status=status,
    )


def _require_optimal(prob: QpProblem, qp_sol: QpSolution) -> None:
    if qp_sol.status == "optimal":
        return
    if qp_sol.status == "max_iter":
        raise SolverLimitError(
            f"solver stopped at {qp_sol.iterations} iterations with residuals "
            f"({qp_sol.primal_res:.2e}, {qp_sol.dual_res:.2e})"
        )
    detail = (
        summarize_certificate(prob, qp_sol.certificate)
        if qp_sol.certificate is not None
        else None
    )
    raise OpfInfeasibleError(qp_sol.status, detail)


def extract_solution(
    prob: QpProblem, qp_sol: QpSolution, labels: P3Labels
) -> RobustOpfSolution:
    """Turn an optimal QP solution into a labeled dispatch.

    Envelopes are recomputed from the primal dispatch (the epigraph value is
    replaced by its defining maximum, which any feasible epigraph dominates),
    re-checked against every constraint, and mapped back to user numbering.
    Non-optimal statuses refuse extraction and surface the certificate.
    """
    _require_optimal(prob, qp_sol)
    return _solution_from_dispatch(
        labels.model,
        labels.mats,
        labels.env,
        labels.scenario,
        qp_sol.x[labels.sl_pg],
        qp_sol.x[labels.sl_qg],
        qp_sol.x[labels.sl_lam],
        None,
        (),
        status=qp_sol.status,
    )


def extract_schedule(
    prob: QpProblem, qp_sol: QpSolution, labels: P4Labels
) -> DispatchSchedule:
    """Extract the multi-period dispatch with exact charge trajectories."""
    _require_optimal(prob, qp_sol)
    steps = labels.steps
    nb = len(labels.batteries)
    per_step = []
    p_bat = np.zeros((steps, nb))
    for t in range(steps):
        pb = qp_sol.x[labels.sl_pb[t]]
        p_bat[t] = pb
        per_step.append(
            _solution_from_dispatch(
                labels.model,
                labels.mats,
                labels.envs[t],
                labels.scenarios[t],
                qp_sol.x[labels.sl_pg[t]],
                qp_sol.x[labels.sl_qg[t]],
                qp_sol.x[labels.sl_lam[t]],
                pb if nb else None,
                labels.batteries,
                status=qp_sol.status,
            )
        )
    soc = np.zeros((nb, steps + 1))
    for k, b in enumerate(labels.batteries):
        soc[k, 0] = b.b0
        for t in range(steps):
            soc[k, t + 1] = soc[k, t] - p_bat[t, k] * labels.dt_h
        if np.any(soc[k] < b.b_min - 1e-6) or np.any(soc[k] > b.b_max + 1e-6):
            raise OpfBuilderError("battery charge left its box at the optimum")
    objective = float(
        sum(_objective_value(labels.scenarios[t], per_step[t].p_gen) for t in range(steps))
    )
    return DispatchSchedule(
        steps=steps,
        dt_h=labels.dt_h,
        bat_nodes=tuple(b.node for b in labels.batteries),
        p_bat=p_bat,
        soc=soc,
        per_step=tuple(per_step),
        objective=objective,
        status=qp_sol.status,
    )


# --- oracle validation ------------------------------------------------------


@dataclass(frozen=True)
class EnvelopeBreach:
    """An exact quantity escaped its claimed envelope band."""

    quantity: str
    index: int
    lo: float
    hi: float
    exact: float


@dataclass(frozen=True)
class ValidationReport:
    converged: bool
    max_residual: float
    violations: tuple[Violation, ...]
    breaches: tuple[EnvelopeBreach, ...]
    v_exact: np.ndarray
    flow_p_exact: np.ndarray
    flow_q_exact: np.ndarray
    cur_exact: np.ndarray
    substation_p: float
    substation_q: float

    @property
    def ok(self) -> bool:
        return self.converged and not self.violations


def validate_dispatch(
    model: FeederModel,
    inj: InjectionProfile,
    solution: RobustOpfSolution | None = None,
    slack: float = 1e-6,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> ValidationReport:
    """Run the exact load flow at a dispatch and check every claim.

    Limit violations use ``check_admissible``; when a solution is supplied
    its envelope bands are additionally compared against the exact state and
    any escape is reported as a breach.
    """
    state = solve_loadflow(model, inj, tol=tol, max_iter=max_iter)
    violations = tuple(check_admissible(model, state, slack=slack))
    v_exact = model.to_user(state.v[1:])
    p_exact = model.to_user(state.P)
    q_exact = model.to_user(state.Q)
    l_exact = model.to_user(state.l)
    breaches: list[EnvelopeBreach] = []
    if solution is not None:
        bands = (
            ("v", v_exact, solution.v_lo, solution.v_hi),
            ("p_flow", p_exact, solution.flow_p_lo, solution.flow_p_hi),
            ("q_flow", q_exact, solution.flow_q_lo, solution.flow_q_hi),
            ("l", l_exact, solution.cur_lo, solution.cur_hi),
        )
        for name, exact, lo, hi in bands:
            for i in range(model.n):
                if exact[i] < lo[i] - slack or exact[i] > hi[i] + slack:
                    breaches.append(
                        EnvelopeBreach(
                            name, i + 1, float(lo[i]), float(hi[i]), float(exact[i])
                        )
                    )
    return ValidationReport(
        converged=state.converged,
        max_residual=state.residual,
        violations=violations,
        breaches=tuple(breaches),
        v_exact=v_exact,
        flow_p_exact=p_exact,
        flow_q_exact=q_exact,
        cur_exact=l_exact,
        substation_p=state.substation_p,
        substation_q=state.substation_q,
    )
