"""Sparse convex QP solver via operator splitting.

Solves ``minimize 0.5 x'Gx + c'x subject to lb <= Mx <= ub`` with G positive
semidefinite (LPs are the G = 0 case).  The algorithm alternates a cached
sparse KKT solve with a box projection and dual update, preceded by Ruiz
equilibration and followed by an active-set polish that sharpens the KKT
residuals.  Iterates are a deterministic function of the inputs: fixed
iteration order, no randomness, no data races.

Infinite bounds are encoded internally as +-1e30.  Infeasibility is
certified: a primal certificate ``y`` satisfies ``M'y = 0`` and
``lb'y+ - ub'y- > 0`` (positive/negative parts), a dual certificate is an
unbounded descent ray.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

INF = 1e30


class QpNumericalError(RuntimeError):
    """Numerical breakdown inside the solver (factorization failure)."""


class QpInconclusiveError(RuntimeError):
    """Feasibility could not be decided within the iteration budget."""


def _to_csc(mat, shape=None) -> sp.csc_matrix:
    out = sp.csc_matrix(mat)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.sum_duplicates()
    return out


@dataclass
class QpProblem:
    """Problem data; ``var_names``/``row_names`` are used in diagnostics."""

    G: sp.csc_matrix
    c: np.ndarray
    M: sp.csc_matrix
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple[str, ...] | None = None
    row_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.G = _to_csc(self.G)
        n = self.G.shape[0]
        if self.G.shape != (n, n):
            raise ValueError("G must be square")
        self.c = np.asarray(self.c, dtype=float)
        if self.c.shape != (n,):
            raise ValueError("c length does not match G")
        self.M = _to_csc(self.M)
        if self.M.shape[1] != n:
            raise ValueError("M column count does not match G")
        m = self.M.shape[0]
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if self.lb.shape != (m,) or self.ub.shape != (m,):
            raise ValueError("bound lengths do not match M")
        if np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"lb > ub on row {self._row_name(bad)}")
        if self.var_names is not None and len(self.var_names) != n:
            raise ValueError("var_names length mismatch")
        if self.row_names is not None and len(self.row_names) != m:
            raise ValueError("row_names length mismatch")
        gap = abs(self.G - self.G.T)
        scale = 1.0 + (abs(self.G).max() if self.G.nnz else 0.0)
        if gap.nnz and gap.max() > 1e-8 * scale:
            raise ValueError("G must be symmetric")
        # PSD check by attempted factorization of a jittered copy
        dense = self.G.toarray()
        jitter = 1e-10 * (1.0 + np.abs(np.diag(dense)).max() if n else 1.0)
        try:
            np.linalg.cholesky(dense + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            raise ValueError("G must be positive semidefinite") from None

    @property
    def n(self) -> int:
        return self.G.shape[0]

    @property
    def m(self) -> int:
        return self.M.shape[0]

    def _row_name(self, i: int) -> str:
        return self.row_names[i] if self.row_names else f"row{i}"


@dataclass(frozen=True)
class QpSettings:
    eps_primal: float = 1e-7
    eps_dual: float = 1e-7
    max_iter: int = 100_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 25
    eps_infeas: float = 1e-7
    scaling_iters: int = 10
    polish: bool = True
    polish_delta: float = 1e-8
    refine_steps: int = 3
    # proximal fallback for iterates that stall short of tolerance
    # (degenerate LPs): solve strongly convex recentered subproblems until
    # the original KKT conditions hold
    prox_after: int = 2_000
    prox_mu: float = 1e-3
    prox_max_outer: int = 100
    prox_sub_iter: int = 20_000


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_res: float
    dual_res: float
    objective: float
    certificate: np.ndarray | None = None
    ray: np.ndarray | None = None
    polished: bool = False


def _sentinel_bounds(lb, ub):
    lo = np.where(lb < -INF / 2, -INF, lb)
    hi = np.where(ub > INF / 2, INF, ub)
    return lo, hi


def _ruiz(G, M, c, lb, ub, iters):
    """Symmetric equilibration of the stacked KKT matrix plus cost scaling."""
    n, m = G.shape[0], M.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    kappa = 1.0
    Gs = G.copy()
    Ms = M.copy()
    cs = c.copy()
    lbs = lb.copy()
    ubs = ub.copy()
    lb_fin = lb > -INF / 2
    ub_fin = ub < INF / 2
    for _ in range(iters):
        g_col = np.zeros(n) if Gs.nnz == 0 else np.asarray(abs(Gs).max(axis=0).todense()).ravel()
        m_col = np.zeros(n) if Ms.nnz == 0 else np.asarray(abs(Ms).max(axis=0).todense()).ravel()
        m_row = np.zeros(m) if Ms.nnz == 0 else np.asarray(abs(Ms).max(axis=1).todense()).ravel()
        dx = 1.0 / np.sqrt(np.clip(np.maximum(g_col, m_col), 1e-8, 1e8))
        dz = 1.0 / np.sqrt(np.clip(m_row, 1e-8, 1e8))
        dx[np.maximum(g_col, m_col) == 0.0] = 1.0
        dz[m_row == 0.0] = 1.0
        Dx = sp.diags(dx)
        Dz = sp.diags(dz)
        Gs = (Dx @ Gs @ Dx).tocsc()
        Ms = (Dz @ Ms @ Dx).tocsc()
        cs = dx * cs
        lbs = np.where(lb_fin, dz * lbs, lbs)
        ubs = np.where(ub_fin, dz * ubs, ubs)
        d *= dx
        e *= dz
        # cost scaling keeps the objective on the same footing as the rows
        g_mean = 0.0 if Gs.nnz == 0 else float(np.mean(np.asarray(abs(Gs).max(axis=0).todense()).ravel()))
        c_norm = float(np.max(np.abs(cs))) if cs.size else 0.0
        denom = max(g_mean, c_norm)
        gamma = 1.0 if denom == 0.0 else 1.0 / np.clip(denom, 1e-8, 1e8)
        Gs = (Gs * gamma).tocsc()
        cs = cs * gamma
        kappa *= gamma
    return Gs, Ms, cs, lbs, ubs, d, e, kappa


def _factor(Gs, Ms, sigma, rho_vec):
    n, m = Gs.shape[0], Ms.shape[0]
    K = sp.bmat(
        [
            [Gs + sigma * sp.eye(n), Ms.T],
            [Ms, sp.diags(-1.0 / rho_vec)],
        ],
        format="csc",
    )
    try:
        return splu(K)
    except RuntimeError as exc:
        raise QpNumericalError(f"KKT factorization failed: {exc}") from exc


def _polish(prob, lb, ub, x, y, z, settings, r_p0, r_d0):
    """Solve the KKT system restricted to the active rows and keep it if the
    unscaled residuals do not regress.

    A row counts as active only when its slack to the bound is smaller than
    the dual magnitude pushing against it; classifying on dual sign alone
    mistakes residual dual noise on inactive rows for activity.
    """
    G, M, c = prob.G, prob.M, prob.c
    n = prob.n
    low = np.where((z - lb) < -y)[0]
    up = np.where((ub - z) < y)[0]
    na = low.size + up.size
    delta = settings.polish_delta
    if na:
        A = sp.vstack([M[low], M[up]], format="csc")
        b = np.concatenate([lb[low], ub[up]])
        K_reg = sp.bmat(
            [[G + delta * sp.eye(n), A.T], [A, -delta * sp.eye(na)]],
            format="csc",
        )
        K_exact = sp.bmat(
            [[G, A.T], [A, sp.csc_matrix((na, na))]], format="csc"
        )
        rhs = np.concatenate([-c, b])
    else:
        K_reg = (G + delta * sp.eye(n)).tocsc()
        K_exact = G
        rhs = -c
    try:
        lu = splu(K_reg)
    except RuntimeError:
        return None
    t = lu.solve(rhs)
    for _ in range(settings.refine_steps):
        t = t + lu.solve(rhs - K_exact @ t)
    x_pol = t[:n]
    y_pol = np.zeros(prob.m)
    y_pol[low] = t[n : n + low.size]
    y_pol[up] = t[n + low.size :]
    if not (np.all(np.isfinite(x_pol)) and np.all(np.isfinite(y_pol))):
        return None
    # dual feasibility guard: a pinned row whose multiplier flips sign was
    # misclassified, and pinning it would move the optimum
    sign_tol = max(settings.eps_dual, 1e-9)
    if np.any(y_pol[low] > sign_tol) or np.any(y_pol[up] < -sign_tol):
        return None
    Mx = M @ x_pol
    r_p = float(np.max(np.abs(Mx - np.clip(Mx, lb, ub)))) if prob.m else 0.0
    r_d = float(np.max(np.abs(G @ x_pol + c + M.T @ y_pol)))
    if max(r_p, r_d) <= max(r_p0, r_d0):
        return x_pol, y_pol, r_p, r_d
    return None


def _prox_fallback(prob: QpProblem, settings: QpSettings, x_ref, y_ref):
    """Proximal-point outer loop: recenter a strongly convex copy on the
    last iterate until the original KKT conditions hold.

    Each subproblem has a unique optimum, so the splitting converges fast
    and its polish step lands exactly; the added curvature vanishes from the
    original dual residual as the recentering fixed point is reached.
    """
    G, M, c = prob.G, prob.M, prob.c
    lb_s, ub_s = _sentinel_bounds(prob.lb, prob.ub)
    mu = settings.prox_mu
    sub_settings = replace(
        settings, max_iter=settings.prox_sub_iter, prox_after=0
    )
    eye = sp.eye(prob.n)
    total = 0
    r_d_prev = np.inf
    for _ in range(settings.prox_max_outer):
        sub = QpProblem(
            G=(G + mu * eye).tocsc(),
            c=c - mu * x_ref,
            M=M,
            lb=prob.lb,
            ub=prob.ub,
        )
        sol = solve_qp(sub, sub_settings, x0=x_ref, y0=y_ref)
        total += sol.iterations
        if sol.status == "primal_infeasible":
            return ("primal_infeasible", sol, total)
        if sol.status != "optimal":
            return None
        x, y = sol.x, sol.y
        if float(np.max(np.abs(x))) > 1e9:
            return None  # recentering is running away: likely unbounded
        if prob.m:
            Mx = M @ x
            r_p = float(np.max(np.abs(Mx - np.clip(Mx, lb_s, ub_s))))
        else:
            r_p = 0.0
        r_d = float(np.max(np.abs(G @ x + c + M.T @ y)))
        if r_p <= settings.eps_primal and r_d <= settings.eps_dual:
            return ("optimal", x, y, r_p, r_d, sol.polished, total)
        # the sub-residuals are exact, so the outer gap is mu * step; when
        # the step stops shrinking, deflate mu to tighten the recentering
        if r_d > 0.5 * r_d_prev:
            mu = max(mu / 10.0, 1e-9)
        r_d_prev = r_d
        x_ref, y_ref = x, y
    return None


def solve_qp(
    prob: QpProblem,
    settings: QpSettings | None = None,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
) -> QpSolution:
    """Solve a convex QP to the requested absolute KKT tolerances.

    Returns a solution whose status is one of ``optimal``,
    ``primal_infeasible`` (with a Farkas-type ``certificate``),
    ``dual_infeasible`` (with an unbounded ``ray``), or ``max_iter``.
    Numerical breakdown raises :class:`QpNumericalError`; it is never
    silent.
    """
    settings = settings or QpSettings()
    n = prob.n
    lb_orig, ub_orig = _sentinel_bounds(prob.lb, prob.ub)
    # a free dummy row keeps the KKT assembly uniform for m == 0
    if prob.m == 0:
        M = sp.csc_matrix((1, n))
        lb = np.array([-INF])
        ub = np.array([INF])
    else:
        M = prob.M
        lb, ub = lb_orig, ub_orig
    m = M.shape[0]
    G, c = prob.G, prob.c

    Gs, Ms, cs, lbs, ubs, d, e, kappa = _ruiz(G, M, c, lb, ub, settings.scaling_iters)
    lb_fin = lb > -INF / 2
    ub_fin = ub < INF / 2
    eq = ub - lb < 1e-12

    rho_bar = settings.rho
    rho_vec = np.where(eq, 1e3 * rho_bar, rho_bar)
    lu = _factor(Gs, Ms, settings.sigma, rho_vec)

    xs = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / d
    ys = np.zeros(m) if y0 is None or prob.m == 0 else kappa * np.asarray(y0, dtype=float) / e
    zs = np.clip(Ms @ xs, lbs, ubs)
    dxs = np.zeros(n)
    dys = np.zeros(m)

    sigma, alpha = settings.sigma, settings.alpha
    status = "max_iter"
    r_p = r_d = np.inf
    certificate = None
    ray = None
    iterations = settings.max_iter
    rescued = None
    rescue_period = settings.check_every * 40
    for k in range(1, settings.max_iter + 1):
        rhs = np.concatenate([sigma * xs - cs, zs - ys / rho_vec])
        sol = lu.solve(rhs)
        xt = sol[:n]
        nu = sol[n:]
        zt = zs + (nu - ys) / rho_vec
        x_next = alpha * xt + (1.0 - alpha) * xs
        z_pre = alpha * zt + (1.0 - alpha) * zs + ys / rho_vec
        z_next = np.clip(z_pre, lbs, ubs)
        y_next = ys + rho_vec * (alpha * zt + (1.0 - alpha) * zs - z_next)
        dxs = x_next - xs
        dys = y_next - ys
        xs, zs, ys = x_next, z_next, y_next

        if k % settings.check_every == 0 or k == settings.max_iter:
            x = d * xs
            y = e * ys / kappa
            z = zs / e
            Mx = M @ x
            Gx = G @ x
            MTy = M.T @ y
            r_p = float(np.max(np.abs(Mx - z))) if m else 0.0
            r_d = float(np.max(np.abs(Gx + c + MTy)))
            if not np.isfinite(r_p) or not np.isfinite(r_d):
                raise QpNumericalError("iterates diverged to non-finite values")
            if r_p <= settings.eps_primal and r_d <= settings.eps_dual:
                status = "optimal"
                iterations = k
                break

            # polish rescue: slowly converging (typically degenerate LP)
            # iterates often carry the exact active set long before the
            # splitting residuals reach tolerance
            if (
                settings.polish
                and k % rescue_period == 0
                and max(r_p, r_d) < 5e-2
            ):
                attempt = _polish(
                    prob, lb_orig, ub_orig, x, y[: prob.m],
                    (zs / e)[: prob.m], settings, r_p, r_d,
                )
                if attempt is not None and (
                    attempt[2] <= settings.eps_primal
                    and attempt[3] <= settings.eps_dual
                ):
                    rescued = attempt
                    status = "optimal"
                    iterations = k
                    break

            eps_inf = settings.eps_infeas
            dy = e * dys / kappa
            ndy = float(np.max(np.abs(dy))) if m else 0.0
            if ndy > 1e-14:
                sup_ok = np.all(dy[~ub_fin] <= eps_inf * ndy) and np.all(
                    dy[~lb_fin] >= -eps_inf * ndy
                )
                if sup_ok and float(np.max(np.abs(M.T @ dy))) <= eps_inf * ndy:
                    gap = float(
                        ub[ub_fin] @ np.maximum(dy[ub_fin], 0.0)
                        + lb[lb_fin] @ np.minimum(dy[lb_fin], 0.0)
                    )
                    if gap < -eps_inf * ndy:
                        status = "primal_infeasible"
                        certificate = -dy / ndy
                        iterations = k
                        break
            dx = d * dxs
            ndx = float(np.max(np.abs(dx)))
            if ndx > 1e-14:
                Mdx = M @ dx
                cone_ok = np.all(Mdx[ub_fin] <= eps_inf * ndx) and np.all(
                    Mdx[lb_fin] >= -eps_inf * ndx
                )
                if (
                    cone_ok
                    and float(np.max(np.abs(G @ dx))) <= eps_inf * ndx
                    and float(c @ dx) < -eps_inf * ndx
                ):
                    status = "dual_infeasible"
                    ray = dx / ndx
                    iterations = k
                    break

            # adaptive penalty, rebalancing primal against dual progress
            den_p = max(float(np.max(np.abs(Mx))) if m else 0.0,
                        float(np.max(np.abs(z))) if m else 0.0, 1e-10)
            den_d = max(
                float(np.max(np.abs(Gx))),
                float(np.max(np.abs(MTy))),
                float(np.max(np.abs(c))) if c.size else 0.0,
                1e-10,
            )
            ratio = np.sqrt((r_p / den_p) / max(r_d / den_d, 1e-16))
            new_bar = float(np.clip(rho_bar * ratio, 1e-6, 1e6))
            if new_bar > 5.0 * rho_bar or new_bar < rho_bar / 5.0:
                rho_bar = new_bar
                rho_vec = np.where(eq, 1e3 * rho_bar, rho_bar)
                lu = _factor(Gs, Ms, settings.sigma, rho_vec)

            # hand persistent stragglers to the proximal fallback
            if settings.prox_after and k >= settings.prox_after:
                iterations = k
                break

    x = d * xs
    y = e * ys / kappa
    polished = False
    if status == "max_iter" and settings.prox_after and settings.prox_max_outer:
        fallback = _prox_fallback(prob, settings, x, y[: prob.m])
        if fallback is not None and fallback[0] == "optimal":
            _, x_fb, y_fb, r_p, r_d, polished_fb, extra = fallback
            x = x_fb
            y = np.concatenate([y_fb, np.zeros(m - prob.m)])
            status = "optimal"
            polished = polished_fb
            iterations += extra
            objective = float(0.5 * x @ (G @ x) + c @ x)
            return QpSolution(
                x=x,
                y=y[: prob.m],
                status=status,
                iterations=iterations,
                primal_res=r_p,
                dual_res=r_d,
                objective=objective,
                polished=polished,
            )
        if fallback is not None and fallback[0] == "primal_infeasible":
            _, sub_sol, extra = fallback
            return QpSolution(
                x=x,
                y=sub_sol.y,
                status="primal_infeasible",
                iterations=iterations + extra,
                primal_res=r_p,
                dual_res=r_d,
                objective=float("nan"),
                certificate=sub_sol.certificate,
            )
    if status == "optimal":
        if rescued is not None:
            x, y_small, r_p, r_d = rescued
            y = np.concatenate([y_small, np.zeros(m - prob.m)])
            polished = True
        else:
            Mx = M @ x
            r_p = float(np.max(np.abs(Mx - np.clip(Mx, lb, ub)))) if m else 0.0
            r_d = float(np.max(np.abs(G @ x + c + M.T @ y)))
            if settings.polish:
                refined = _polish(prob, lb_orig, ub_orig, x, y[: prob.m],
                                  (zs / e)[: prob.m], settings, r_p, r_d)
                if refined is not None:
                    x, y_small, r_p, r_d = refined
                    y = np.concatenate([y_small, np.zeros(m - prob.m)])
                    polished = True
        objective = float(0.5 * x @ (G @ x) + c @ x)
    else:
        objective = float("nan")

    return QpSolution(
        x=x,
        y=y[: prob.m],
        status=status,
        iterations=iterations,
        primal_res=r_p,
        dual_res=r_d,
        objective=objective,
        certificate=certificate[: prob.m] if certificate is not None else None,
        ray=ray,
        polished=polished,
    )


def detect_infeasible(
    prob: QpProblem, settings: QpSettings | None = None
) -> np.ndarray | None:
    """Return a Farkas-type certificate if the constraints are infeasible.

    The certificate ``y`` satisfies ``M'y ~ 0`` and ``lb'y+ - ub'y- > 0``.
    Returns None when a feasible point is found; raises
    :class:`QpInconclusiveError` if neither outcome is certified within the
    iteration budget.
    """
    feas = QpProblem(
        G=sp.csc_matrix((prob.n, prob.n)),
        c=np.zeros(prob.n),
        M=prob.M,
        lb=prob.lb,
        ub=prob.ub,
        var_names=prob.var_names,
        row_names=prob.row_names,
    )
    sol = solve_qp(feas, settings)
    if sol.status == "optimal":
        return None
    if sol.status == "primal_infeasible":
        return sol.certificate
    raise QpInconclusiveError(
        f"feasibility undecided after {sol.iterations} iterations"
    )


def summarize_certificate(
    prob: QpProblem, certificate: np.ndarray, top: int = 5
) -> list[tuple[str, float]]:
    """Name the rows carrying the largest certificate weight."""
    idx = np.argsort(-np.abs(certificate), kind="stable")[:top]
    return [
        (prob._row_name(int(i)), float(certificate[int(i)]))
        for i in idx
        if abs(certificate[int(i)]) > 1e-12
    ]


def dump_problem(prob: QpProblem) -> str:
    """Serialize a problem as row/col triplets plus bounds, for debugging."""
    lines = [f"qp {prob.n} {prob.m}"]
    Gc = prob.G.tocoo()
    for i, j, v in zip(Gc.row, Gc.col, Gc.data):
        lines.append(f"G {i} {j} {float(v)!r}")
    for j, v in enumerate(prob.c):
        if v != 0.0:
            lines.append(f"c {j} {float(v)!r}")
    Mc = prob.M.tocoo()
    for i, j, v in zip(Mc.row, Mc.col, Mc.data):
        lines.append(f"M {i} {j} {float(v)!r}")
    for i in range(prob.m):
        lines.append(f"bounds {i} {float(prob.lb[i])!r} {float(prob.ub[i])!r}")
    if prob.var_names:
        for j, name in enumerate(prob.var_names):
            lines.append(f"var {j} {name}")
    if prob.row_names:
        for i, name in enumerate(prob.row_names):
            lines.append(f"row {i} {name}")
    return "\n".join(lines) + "\n"
