"""Dense QP solver with batched execution and KKT-based sensitivities.

The solver is a primal-dual interior-point method with a Mehrotra
predictor-corrector step, sized for the small dense programs the battery
controller produces (n <= a few hundred). Converged solutions are polished
by re-solving the equality-constrained KKT system on the apparent active
set, which sharpens both residuals and the dual/slack separation that the
differentiation path relies on.

Residuals are scaled: stationarity by 1 + ||q||_inf, equality by
1 + ||b||_inf, inequality violation and complementarity by 1 + ||h||_inf.
A solution is Optimal when the max scaled residual is at most ``tol``.
"""

from __future__ import annotations

import atexit
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .battery import CanonicalQP

__all__ = [
    "SolverStatus",
    "SolverConfig",
    "QpSolution",
    "DegenerateActiveSetError",
    "SingularKktError",
    "solve",
    "solve_batch",
    "vjp_demand",
    "bench",
]


class SolverStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 100
    threads: int = 1
    degenerate_margin: float = 1e-6
    polish: bool = True

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.threads < 1:
            raise ValueError("invalid solver configuration")


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: SolverStatus
    kkt_residual: float
    iterations: int
    objective: float
    certificate: str | None = None


class DegenerateActiveSetError(RuntimeError):
    """An inequality sits inside the margin on both its dual and its slack."""

    def __init__(self, index: int, lam: float, slack: float):
        super().__init__(
            f"inequality {index} is degenerate: lambda={lam:.3e}, slack={slack:.3e}"
        )
        self.index = index


class SingularKktError(RuntimeError):
    """The reduced KKT system on the active set is singular."""


def _scaled_residuals(P, q, A, b, G, h, x, y, z, s):
    r_stat = P @ x + q + G.T @ z
    if A.shape[0]:
        r_stat = r_stat + A.T @ y
    stat = np.max(np.abs(r_stat)) / (1.0 + np.max(np.abs(q)))
    eq = 0.0
    if A.shape[0]:
        eq = np.max(np.abs(A @ x - b)) / (1.0 + np.max(np.abs(b)))
    h_scale = 1.0 + np.max(np.abs(h))
    ineq = max(0.0, np.max(G @ x - h)) / h_scale
    comp = np.max(np.abs(s * z)) / h_scale
    return float(max(stat, eq, ineq, comp))


def _kkt_solve(Hbar, A, rhs1, rhs2):
    """Solve [[Hbar, A^T], [A, 0]] [dx, dy] = [rhs1, rhs2]."""
    n = Hbar.shape[0]
    me = A.shape[0]
    if me == 0:
        return np.linalg.solve(Hbar, rhs1), np.zeros(0)
    K = np.zeros((n + me, n + me))
    K[:n, :n] = Hbar
    K[:n, n:] = A.T
    K[n:, :n] = A
    sol = np.linalg.solve(K, np.concatenate([rhs1, rhs2]))
    return sol[:n], sol[n:]


def _max_step(v, dv):
    """Largest alpha <= 1 keeping v + alpha * dv > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _initial_point(P, q, A, b, G, h):
    Hbar = P + G.T @ G + 1e-12 * np.eye(P.shape[0])
    rhs1 = -q + G.T @ h
    x, y = _kkt_solve(Hbar, A, rhs1, b.copy())
    r = G @ x - h
    gap_p = float(np.max(r))
    s = -r if gap_p < 0 else -r + (1.0 + gap_p)
    gap_d = float(-np.min(r))
    z = r + (1.0 + gap_d) if gap_d >= 0 else r.copy()
    s = np.maximum(s, 1e-4)
    z = np.maximum(z, 1e-4)
    return x, y, s, z


def _ipm(P, q, A, b, G, h, tol, max_iter):
    """Mehrotra predictor-corrector loop on raw matrices.

    Returns (x, y, z, s, residual, iterations, converged).
    """
    mi = G.shape[0]
    x, y, s, z = _initial_point(P, q, A, b, G, h)
    best = None

    for it in range(max_iter):
        r_dual = P @ x + q + G.T @ z + (A.T @ y if A.shape[0] else 0.0)
        r_eq = A @ x - b if A.shape[0] else np.zeros(0)
        r_ineq = G @ x + s - h
        res = _scaled_residuals(P, q, A, b, G, h, x, y, z, s)
        if not np.isfinite(res):
            break
        if best is None or res < best[0]:
            best = (res, x.copy(), y.copy(), z.copy(), s.copy(), it)
        if res <= tol:
            return x, y, z, s, res, it, True

        mu = float(s @ z) / mi
        W = z / s
        Hbar = P + (G.T * W) @ G
        try:
            # Affine predictor
            rhs1 = -r_dual - G.T @ ((-s * z + z * r_ineq) / s)
            dx_a, dy_a = _kkt_solve(Hbar, A, rhs1, -r_eq)
            ds_a = -r_ineq - G @ dx_a
            dz_a = (-s * z - z * ds_a) / s
            alpha_a = min(_max_step(s, ds_a), _max_step(z, dz_a))
            mu_a = float((s + alpha_a * ds_a) @ (z + alpha_a * dz_a)) / mi
            sigma = (mu_a / mu) ** 3 if mu > 0 else 0.0

            # Centering-corrector
            v2 = -s * z - ds_a * dz_a + sigma * mu
            rhs1 = -r_dual - G.T @ ((v2 + z * r_ineq) / s)
            dx, dy = _kkt_solve(Hbar, A, rhs1, -r_eq)
            ds = -r_ineq - G @ dx
            dz = (v2 - z * ds) / s
        except np.linalg.LinAlgError:
            break

        alpha = 0.99 * min(_max_step(s, ds), _max_step(z, dz))
        if alpha < 1e-13:
            break
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz

    if best is None:
        return x, y, z, s, np.inf, max_iter, False
    res, x, y, z, s, it = best
    return x, y, z, s, res, it, False


def _polish(P, q, A, b, G, h, x, y, z, s, res):
    """Re-solve the KKT system on the apparent active set; keep if it improves."""
    active = np.flatnonzero(z > s)
    n, me, na = P.shape[0], A.shape[0], active.size
    Ga = G[active]
    K = np.zeros((n + me + na, n + me + na))
    K[:n, :n] = P
    K[:n, n : n + me] = A.T
    K[:n, n + me :] = Ga.T
    K[n : n + me, :n] = A
    K[n + me :, :n] = Ga
    rhs = np.concatenate([-q, b, h[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return x, y, z, s, res
    x_p = sol[:n]
    y_p = sol[n : n + me]
    lam_a = sol[n + me :]
    if na and np.min(lam_a) < -1e-9:
        return x, y, z, s, res
    z_p = np.zeros_like(z)
    z_p[active] = np.maximum(lam_a, 0.0)
    s_p = np.maximum(h - G @ x_p, 0.0)
    res_p = _scaled_residuals(P, q, A, b, G, h, x_p, y_p, z_p, s_p)
    if np.max(G @ x_p - h) > 1e-9 * (1.0 + np.max(np.abs(h))) or res_p > res:
        return x, y, z, s, res
    return x_p, y_p, z_p, s_p, res_p


def _min_violation(qp: CanonicalQP, cfg: SolverConfig) -> float:
    """Phase-1 value: least total inequality violation subject to Ax = b."""
    n, mi = qp.n, qp.G_c.shape[0]
    P = 1e-12 * np.eye(n + mi)  # hair of curvature so the LP Newton system stays sane
    q = np.concatenate([np.zeros(n), np.ones(mi)])
    A = np.hstack([qp.A, np.zeros((qp.A.shape[0], mi))])
    G = np.vstack(
        [
            np.hstack([qp.G_c, -np.eye(mi)]),
            np.hstack([np.zeros((mi, n)), -np.eye(mi)]),
        ]
    )
    h = np.concatenate([qp.h, np.zeros(mi)])
    x, _, _, _, _, _, ok = _ipm(P, q, A, qp.b, G, h, 1e-9, cfg.max_iter)
    if not ok:
        return np.nan
    return float(np.sum(x[n:]))


def solve(qp: CanonicalQP, cfg: SolverConfig = SolverConfig()) -> QpSolution:
    """Solve one canonical QP; total for numerical failures, raising only on
    malformed inputs."""
    qdiag = np.diag(qp.Q)
    if np.min(qdiag) < 0:
        raise ValueError("Q has a negative diagonal entry; not PSD")
    if qp.q.shape[0] != qp.n or qp.G_c.shape[1] != qp.n or qp.A.shape[1] != qp.n:
        raise ValueError("inconsistent QP dimensions")

    P = 2.0 * qp.Q  # Hessian of x^T Q x
    x, y, z, s, res, it, ok = _ipm(
        P, qp.q, qp.A, qp.b, qp.G_c, qp.h, cfg.tol, cfg.max_iter
    )
    if ok and cfg.polish:
        x, y, z, s, res = _polish(P, qp.q, qp.A, qp.b, qp.G_c, qp.h, x, y, z, s, res)
    if ok:
        return QpSolution(
            x=x, lam=z, nu=y, status=SolverStatus.OPTIMAL,
            kkt_residual=res, iterations=it, objective=qp.objective(x),
        )

    viol = _min_violation(qp, cfg)
    if np.isfinite(viol) and viol > 1e-7 * (1.0 + np.max(np.abs(qp.h))):
        return QpSolution(
            x=x, lam=z, nu=y, status=SolverStatus.INFEASIBLE,
            kkt_residual=res, iterations=it, objective=np.nan,
            certificate=(
                f"inequalities cannot all hold: least total violation {viol:.6e}"
            ),
        )
    return QpSolution(
        x=x, lam=z, nu=y, status=SolverStatus.MAX_ITER,
        kkt_residual=res, iterations=it, objective=qp.objective(x),
    )


def _solve_task(args):
    qp, cfg = args
    return solve(qp, cfg)


_EXECUTORS: dict[int, ProcessPoolExecutor] = {}


def _get_executor(workers: int) -> ProcessPoolExecutor:
    pool = _EXECUTORS.get(workers)
    if pool is None:
        methods = multiprocessing.get_all_start_methods()
        ctx = multiprocessing.get_context("fork" if "fork" in methods else None)
        pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx)
        _EXECUTORS[workers] = pool
    return pool


@atexit.register
def _shutdown_executors():
    for pool in _EXECUTORS.values():
        pool.shutdown(cancel_futures=True)
    _EXECUTORS.clear()


def solve_batch(qps: list[CanonicalQP], cfg: SolverConfig = SolverConfig()) -> list[QpSolution]:
    """Solve independent instances, in input order, on cfg.threads workers.

    Results are identical to sequential solves regardless of worker count.
    """
    if not qps:
        raise ValueError("empty batch")
    if cfg.threads == 1 or len(qps) == 1:
        return [solve(qp, cfg) for qp in qps]
    pool = _get_executor(cfg.threads)
    chunk = max(1, len(qps) // (4 * cfg.threads))
    return list(pool.map(_solve_task, [(qp, cfg) for qp in qps], chunksize=chunk))


def _independent_rows(M: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Indices of a maximal linearly independent row subset, by greedy QR."""
    kept: list[int] = []
    basis = np.zeros((0, M.shape[1]))
    for i, row in enumerate(M):
        r = row - basis.T @ (basis @ row) if basis.shape[0] else row.copy()
        nrm = np.linalg.norm(r)
        if nrm > tol * max(1.0, np.linalg.norm(row)):
            kept.append(i)
            basis = np.vstack([basis, r / nrm])
    return np.array(kept, dtype=int)


def vjp_demand(
    qp: CanonicalQP,
    sol: QpSolution,
    cotangent: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
) -> np.ndarray:
    """cotangent^T (d x* / d demand) via the active-set KKT system.

    The demand enters the inequality right-hand side on qp.demand_rows with
    coefficient qp.demand_coeff, so one symmetric solve against the reduced
    KKT matrix gives the whole vector.
    """
    if sol.status is not SolverStatus.OPTIMAL:
        raise ValueError(f"cannot differentiate a {sol.status.value} solution")
    cotangent = np.asarray(cotangent, dtype=float)
    if cotangent.shape[0] != qp.n:
        raise ValueError("cotangent length mismatch")

    slack = qp.h - qp.G_c @ sol.x
    margin = cfg.degenerate_margin
    lam = sol.lam
    active_mask = (lam > margin) & (slack <= margin)
    inactive_mask = (slack > margin) & (lam <= margin)
    bad = ~(active_mask | inactive_mask)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateActiveSetError(i, float(lam[i]), float(slack[i]))

    active = np.flatnonzero(active_mask)
    Ga = qp.G_c[active]
    stacked = np.vstack([qp.A, Ga]) if qp.A.shape[0] else Ga
    keep = _independent_rows(stacked)
    # equalities always have full row rank here; pruning touches Ga only
    keep_a = keep[keep >= qp.A.shape[0]] - qp.A.shape[0]
    Ga = Ga[keep_a]
    active = active[keep_a]

    n, me, na = qp.n, qp.A.shape[0], Ga.shape[0]
    K = np.zeros((n + me + na, n + me + na))
    K[:n, :n] = 2.0 * qp.Q
    K[:n, n : n + me] = qp.A.T
    K[:n, n + me :] = Ga.T
    K[n : n + me, :n] = qp.A
    K[n + me :, :n] = Ga
    rhs = np.concatenate([cotangent, np.zeros(me + na)])
    try:
        w = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularKktError(f"reduced KKT solve failed: {exc}") from exc
    w_lam = w[n + me :]

    out = np.zeros(qp.horizon)
    pos_in_active = {int(row): k for k, row in enumerate(active)}
    for j, row in enumerate(qp.demand_rows):
        k = pos_in_active.get(int(row))
        if k is not None:
            out[j] = qp.demand_coeff * w_lam[k]
    return out


def bench(
    horizon: int,
    batch_size: int,
    thread_counts: list[int],
    repeats: int = 8,
    seed: int = 0,
    build_batch=None,
) -> list[dict]:
    """Time solve_batch over thread counts; returns rows of mean/sd seconds.

    The same instances are reused for every thread count, and a warm-up call
    precedes timing so worker start-up is excluded.
    """
    if repeats < 2:
        raise ValueError("repeats must be at least 2")
    if build_batch is None:
        from .data import build_tou_prices
        from .battery import BatterySpec, build_qp_epigraph_form

        rng = np.random.default_rng(seed)
        spec = BatterySpec(
            capacity=10.0, alpha=0.5, beta1=1e-5, beta2=1e-5, beta3=1e-5,
            eta_in=0.95, eta_out=0.95, c_in=5.0, c_out=5.0, b_init=0.1,
        )
        price = build_tou_prices(horizon) if horizon % 24 == 0 else None
        if price is None:
            raise ValueError("bench requires a horizon that is a multiple of 24")
        qps = [
            build_qp_epigraph_form(spec, price, rng.uniform(0.0, 5.0, horizon))
            for _ in range(batch_size)
        ]
    else:
        qps = build_batch(horizon, batch_size, seed)

    rows = []
    for tc in thread_counts:
        cfg = SolverConfig(threads=tc)
        solve_batch(qps, cfg)  # warm-up: pool creation, allocator, caches
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            solve_batch(qps, cfg)
            times.append(time.perf_counter() - t0)
        times = np.array(times)
        rows.append(
            {
                "threads": tc,
                "batch": batch_size,
                "mean_s": float(np.mean(times)),
                "sd_s": float(np.std(times, ddof=1)),
            }
        )
    return rows
