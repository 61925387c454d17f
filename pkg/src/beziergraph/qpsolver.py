"""Embedded convex QP solver (ADMM operator splitting, OSQP-style).

Sized for two workloads: very small problems in large batches (obstacle
cut checks, point projections) and a single larger sparse program (the
MPC refinement).  Small problems run through a dense data-parallel kernel
whose per-instance arithmetic is independent of batch size, so a batch
solve is bitwise identical to a loop of single solves.  Large problems
use a sparse LDL-style factorization of the same KKT system.

Problem form:  min 1/2 x' P x + q' x   s.t.  l <= A x <= u
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Problems whose KKT dimension (n + n_con) is at most this run on the
# dense batched kernel; anything bigger goes to the sparse path.
DENSE_KKT_LIMIT = 64
_BATCH_CHUNK = 65536
_EQ_TOL = 1e-9


class SolveStatus(Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"
    ERROR = "error"


@dataclass
class QpProblem:
    """min 1/2 x'Px + q'x  s.t.  l <= Ax <= u  (P symmetric PSD)."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def dims(self) -> tuple[int, int]:
        return self.q.shape[0], self.l.shape[0] if self.l is not None else 0


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: SolveStatus
    iterations: int
    primal_residual: float
    dual_residual: float


@dataclass
class SolveConfig:
    max_iter: int = 4000
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6  # over-relaxation
    eps_pinf: float = 1e-4
    polish: bool = False
    scaling_iters: int = 10  # Ruiz equilibration passes (sparse path only)
    check_every: int = 1  # termination-check period (sparse path only)
    warm_start: tuple[np.ndarray, np.ndarray] | None = None  # (x0, y0)


def _validate(prob: QpProblem) -> tuple:
    q = np.asarray(prob.q, dtype=np.float64)
    l = np.asarray(prob.l, dtype=np.float64)
    u = np.asarray(prob.u, dtype=np.float64)
    n = q.shape[0]
    P = prob.P if sp.issparse(prob.P) else np.asarray(prob.P, dtype=np.float64)
    A = prob.A if sp.issparse(prob.A) else np.asarray(prob.A, dtype=np.float64)
    if not sp.issparse(A) and A.ndim != 2:
        A = A.reshape(-1, n)
    for name, arr in (("P", P), ("q", q), ("A", A), ("l", l), ("u", u)):
        data = arr.data if sp.issparse(arr) else arr
        if np.any(np.isnan(data)):
            raise ValueError(f"NaN entries in {name}")
    if P.shape != (n, n):
        raise ValueError("P must be square and match q")
    sym_gap = abs(P - P.T).max() if sp.issparse(P) else np.abs(P - P.T).max(initial=0.0)
    if sym_gap > 1e-10:
        raise ValueError("P must be symmetric")
    if A.shape[1] != n or l.shape != u.shape or l.shape[0] != A.shape[0]:
        raise ValueError("constraint shapes are inconsistent")
    if np.any(l > u):
        raise ValueError("constraint bounds require l <= u")
    return P, q, A, l, u


def _rho_vector(l: np.ndarray, u: np.ndarray, rho: float) -> np.ndarray:
    # equality rows get a much stiffer penalty, as in OSQP
    eq = (u - l) <= _EQ_TOL
    return np.where(eq, rho * 1e3, rho)


class _BatchState:
    """Per-instance snapshots taken the moment each instance terminates."""

    def __init__(self, B: int, n: int, mc: int):
        self.done = np.zeros(B, dtype=bool)
        self.x = np.zeros((B, n))
        self.y = np.zeros((B, mc))
        self.iters = np.zeros(B, dtype=np.int64)
        self.rp = np.full(B, np.inf)
        self.rd = np.full(B, np.inf)
        self.status = np.full(B, SolveStatus.MAX_ITER, dtype=object)

    def record(self, idx, it, x, y, rp, rd, status):
        self.done[idx] = True
        self.x[idx] = x
        self.y[idx] = y
        self.iters[idx] = it
        self.rp[idx] = rp
        self.rd[idx] = rd
        for i in np.atleast_1d(idx):
            self.status[i] = status


def _dense_kernel(P, q, A, l, u, cfg: SolveConfig, x0=None, y0=None) -> _BatchState:
    """ADMM on a stack of dense problems of identical shape.

    Every operation is either elementwise or a per-instance gufunc/einsum,
    so instance results do not depend on what else is in the batch.
    """
    B, n = q.shape
    mc = l.shape[1]
    rho = np.where((u - l) <= _EQ_TOL, cfg.rho * 1e3, cfg.rho)
    rho_inv = 1.0 / rho

    kkt = np.zeros((B, n + mc, n + mc))
    kkt[:, :n, :n] = P
    kkt[:, np.arange(n), np.arange(n)] += cfg.sigma
    if mc:
        kkt[:, :n, n:] = np.swapaxes(A, 1, 2)
        kkt[:, n:, :n] = A
        kkt[:, n + np.arange(mc), n + np.arange(mc)] = -rho_inv
    try:
        inv = np.linalg.inv(kkt)
    except np.linalg.LinAlgError as exc:
        raise ValueError("KKT factorization failed (non-PSD cost?)") from exc

    x = np.zeros((B, n)) if x0 is None else x0.copy()
    y = np.zeros((B, mc)) if y0 is None else y0.copy()
    if x0 is None:
        z = np.zeros((B, mc))
    else:
        z = np.clip(np.einsum("bij,bj->bi", A, x), l, u) if mc else np.zeros((B, 0))

    out = _BatchState(B, n, mc)
    live = np.arange(B)  # indices into the original batch
    q_norm = np.abs(q).max(axis=1, initial=0.0)

    for it in range(1, cfg.max_iter + 1):
        rhs = np.concatenate([cfg.sigma * x - q, z - rho_inv * y], axis=1)
        sol = np.einsum("bij,bj->bi", inv, rhs)
        xt = sol[:, :n]
        if mc:
            zt = z + rho_inv * (sol[:, n:] - y)
        else:
            zt = z
        x_new = cfg.alpha * xt + (1.0 - cfg.alpha) * x
        z_relax = cfg.alpha * zt + (1.0 - cfg.alpha) * z
        z_new = np.clip(z_relax + rho_inv * y, l, u)
        y_new = y + rho * (z_relax - z_new)

        Ax = np.einsum("bij,bj->bi", A, x_new) if mc else np.zeros((B0 := x_new.shape[0], 0))
        Px = np.einsum("bij,bj->bi", P, x_new)
        ATy = np.einsum("bji,bj->bi", A, y_new) if mc else np.zeros((x_new.shape[0], n))
        r_prim = np.abs(Ax - z_new).max(axis=1, initial=0.0)
        r_dual = np.abs(Px + q + ATy).max(axis=1)
        eps_p = cfg.eps_abs + cfg.eps_rel * np.maximum(
            np.abs(Ax).max(axis=1, initial=0.0), np.abs(z_new).max(axis=1, initial=0.0)
        )
        eps_d = cfg.eps_abs + cfg.eps_rel * np.maximum(
            np.maximum(np.abs(Px).max(axis=1), np.abs(ATy).max(axis=1, initial=0.0)), q_norm
        )

        conv = (r_prim <= eps_p) & (r_dual <= eps_d) & ~out.done[live]
        if np.any(conv):
            idx = live[conv]
            out.record(idx, it, x_new[conv], y_new[conv], r_prim[conv], r_dual[conv], SolveStatus.SOLVED)

        if mc:
            dy = y_new - y
            dy_norm = np.abs(dy).max(axis=1, initial=0.0)
            cand = (dy_norm > 1e-13) & ~out.done[live]
            if np.any(cand):
                ATdy = np.einsum("bji,bj->bi", A, dy)
                up = np.where(dy > 0, dy, 0.0)
                dn = np.where(dy < 0, dy, 0.0)
                support = (np.where(up > 0, u, 0.0) * up + np.where(dn < 0, l, 0.0) * dn).sum(axis=1)
                cert = (
                    cand
                    & (np.abs(ATdy).max(axis=1) <= cfg.eps_pinf * dy_norm)
                    & (support <= -cfg.eps_pinf * dy_norm)
                )
                if np.any(cert):
                    idx = live[cert]
                    out.record(idx, it, x_new[cert], y_new[cert], r_prim[cert], r_dual[cert], SolveStatus.INFEASIBLE)

        x, y, z = x_new, y_new, z_new

        active = ~out.done[live]
        if not active.any():
            break
        # compact the batch once most instances have finished
        if active.sum() <= live.size // 2 and live.size > 1:
            x, y, z = x[active], y[active], z[active]
            inv, P, q, A, l, u = inv[active], P[active], q[active], A[active], l[active], u[active]
            rho, rho_inv, q_norm = rho[active], rho_inv[active], q_norm[active]
            live = live[active]
    else:
        still = ~out.done[live]
        if np.any(still):
            idx = live[still]
            Ax = np.einsum("bij,bj->bi", A, x) if mc else np.zeros((x.shape[0], 0))
            Px = np.einsum("bij,bj->bi", P, x)
            ATy = np.einsum("bji,bj->bi", A, y) if mc else np.zeros((x.shape[0], n))
            rp = np.abs(Ax - z).max(axis=1, initial=0.0)
            rd = np.abs(Px + q + ATy).max(axis=1)
            out.record(idx, cfg.max_iter, x[still], y[still], rp[still], rd[still], SolveStatus.MAX_ITER)

    return out


def _polish_one(P, q, A, l, u, x, y, rp, rd):
    """Solve the equality-constrained KKT system on the detected active set.

    Returns (x, y, rp, rd, polished).  The polished candidate is accepted
    only if it improves the worst residual.
    """
    mc = l.shape[0]
    if mc == 0:
        return x, y, rp, rd, False
    z = A @ x
    act_tol = max(1e-7, 10.0 * rp)
    low = (z - l) <= act_tol
    up = (u - z) <= act_tol
    act = low | up
    if not np.any(act):
        y_pol = np.zeros(mc)
        rd_pol = float(np.abs(P @ x + q).max())
        return (x, y_pol, rp, rd_pol, True) if rd_pol <= rd else (x, y, rp, rd, False)
    G = A[act]
    bact = np.where(low[act], l[act], u[act])
    n = x.shape[0]
    k = G.shape[0]
    delta = 1e-8
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P + delta * np.eye(n)
    K[:n, n:] = G.T
    K[n:, :n] = G
    K[n:, n:] = -delta * np.eye(k)
    rhs = np.concatenate([-q, bact])
    try:
        w = np.linalg.solve(K, rhs)
        for _ in range(2):  # iterative refinement against the regularization
            w = w + np.linalg.solve(K, rhs - K @ w)
    except np.linalg.LinAlgError:
        w, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x_pol = w[:n]
    y_pol = np.zeros(mc)
    y_pol[act] = w[n:]
    Axp = A @ x_pol
    rp_pol = float(np.maximum(Axp - u, 0.0).max(initial=0.0) + np.maximum(l - Axp, 0.0).max(initial=0.0))
    rd_pol = float(np.abs(P @ x_pol + q + A.T @ y_pol).max())
    if max(rp_pol, rd_pol) < max(rp, rd):
        return x_pol, y_pol, rp_pol, rd_pol, True
    return x, y, rp, rd, False


def _solve_dense_group(problems, cfg: SolveConfig, warm=None) -> list[QpSolution]:
    mats = [_validate(p) for p in problems]
    sols: list[QpSolution] = []
    for start in range(0, len(mats), _BATCH_CHUNK):
        chunk = mats[start : start + _BATCH_CHUNK]
        P = np.stack([m[0] for m in chunk])
        q = np.stack([m[1] for m in chunk])
        A = np.stack([m[2] for m in chunk])
        l = np.stack([m[3] for m in chunk])
        u = np.stack([m[4] for m in chunk])
        x0 = y0 = None
        if warm is not None:
            x0 = np.stack([w[0] for w in warm[start : start + _BATCH_CHUNK]])
            y0 = np.stack([w[1] for w in warm[start : start + _BATCH_CHUNK]])
        out = _dense_kernel(P, q, A, l, u, cfg, x0, y0)
        for i in range(len(chunk)):
            x, y = out.x[i], out.y[i]
            rp, rd = float(out.rp[i]), float(out.rd[i])
            status = out.status[i]
            if cfg.polish and status in (SolveStatus.SOLVED, SolveStatus.MAX_ITER):
                x, y, rp, rd, _ = _polish_one(P[i], q[i], A[i], l[i], u[i], x, y, rp, rd)
            sols.append(QpSolution(x, y, status, int(out.iters[i]), rp, rd))
    return sols


def _ruiz(P: sp.csc_matrix, q: np.ndarray, A: sp.csc_matrix, iters: int):
    """Modified Ruiz equilibration of the stacked KKT data plus cost
    normalization; returns scaled (P, q, A) and the scalings (D, E, c)."""
    n = q.size
    mc = A.shape[0]
    D = np.ones(n)
    E = np.ones(mc)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()

    def colmax(M):
        if M.shape[0] == 0 or M.nnz == 0:
            return np.zeros(M.shape[1])
        return np.asarray(abs(M).max(axis=0).todense()).ravel()

    def rowmax(M):
        if M.shape[0] == 0 or M.nnz == 0:
            return np.zeros(M.shape[0])
        return np.asarray(abs(M).max(axis=1).todense()).ravel()

    for _ in range(iters):
        norm_x = np.maximum(colmax(Ps), colmax(As))
        norm_y = rowmax(As)
        d1 = np.where(norm_x > 0, 1.0 / np.sqrt(np.clip(norm_x, 1e-8, 1e8)), 1.0)
        d2 = np.where(norm_y > 0, 1.0 / np.sqrt(np.clip(norm_y, 1e-8, 1e8)), 1.0)
        D1 = sp.diags(d1)
        Ps = (D1 @ Ps @ D1).tocsc()
        As = (sp.diags(d2) @ As @ D1).tocsc()
        qs = d1 * qs
        D *= d1
        E *= d2
        pc = colmax(Ps)
        denom = max(float(pc.mean()) if pc.size else 0.0, float(np.abs(qs).max(initial=0.0)))
        gamma = 1.0 / np.clip(denom, 1e-8, 1e8) if denom > 0 else 1.0
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return Ps, qs, As, D, E, c


def _solve_sparse(prob: QpProblem, cfg: SolveConfig) -> QpSolution:
    _validate(prob)
    P0 = sp.csc_matrix(prob.P)
    A0 = sp.csc_matrix(np.atleast_2d(prob.A) if not sp.issparse(prob.A) else prob.A)
    q0 = np.asarray(prob.q, dtype=np.float64)
    l0 = np.asarray(prob.l, dtype=np.float64)
    u0 = np.asarray(prob.u, dtype=np.float64)
    n = q0.size
    mc = l0.size

    if cfg.scaling_iters > 0:
        P, q, A, D, E, c = _ruiz(P0, q0, A0, cfg.scaling_iters)
    else:
        P, q, A = P0, q0, A0
        D, E, c = np.ones(n), np.ones(mc), 1.0
    l = E * l0
    u = E * u0
    cD = c * D

    rho = _rho_vector(l, u, cfg.rho)
    rho_inv = 1.0 / rho
    kkt = sp.bmat(
        [[P + cfg.sigma * sp.eye(n), A.T], [A, -sp.diags(rho_inv)]], format="csc"
    )
    try:
        lu = spla.splu(kkt)
    except RuntimeError as exc:
        raise ValueError("KKT factorization failed (non-PSD cost?)") from exc

    if cfg.warm_start is not None:
        x = np.asarray(cfg.warm_start[0], dtype=np.float64) / D
        y = np.asarray(cfg.warm_start[1], dtype=np.float64) * c / np.where(E != 0, E, 1.0)
        z = np.clip(A @ x, l, u)
    else:
        x = np.zeros(n)
        y = np.zeros(mc)
        z = np.zeros(mc)

    q_norm = np.abs(q / cD).max(initial=0.0)
    E_safe = np.where(E != 0, E, 1.0)
    AT = A.T.tocsc()
    A0T = A0.T.tocsc()
    q_over = q / cD
    status = SolveStatus.MAX_ITER
    it = cfg.max_iter
    rp = rd = np.inf
    for k in range(1, cfg.max_iter + 1):
        rhs = np.concatenate([cfg.sigma * x - q, z - rho_inv * y])
        sol = lu.solve(rhs)
        xt = sol[:n]
        zt = z + rho_inv * (sol[n:] - y)
        x_new = cfg.alpha * xt + (1.0 - cfg.alpha) * x
        z_relax = cfg.alpha * zt + (1.0 - cfg.alpha) * z
        z_new = np.clip(z_relax + rho_inv * y, l, u)
        y_new = y + rho * (z_relax - z_new)

        if k % cfg.check_every == 0 or k == cfg.max_iter:
            # residuals and tolerances in the ORIGINAL (unscaled) problem
            Ax = (A @ x_new) / E_safe
            Px = (P @ x_new) / cD
            ATy = (AT @ y_new) / cD
            z_orig = z_new / E_safe
            rp = float(np.abs(Ax - z_orig).max(initial=0.0))
            rd = float(np.abs(Px + q_over + ATy).max())
            eps_p = cfg.eps_abs + cfg.eps_rel * max(np.abs(Ax).max(initial=0.0), np.abs(z_orig).max(initial=0.0))
            eps_d = cfg.eps_abs + cfg.eps_rel * max(np.abs(Px).max(), np.abs(ATy).max(initial=0.0), q_norm)
            if rp <= eps_p and rd <= eps_d:
                x, y, z = x_new, y_new, z_new
                status, it = SolveStatus.SOLVED, k
                break

            dy = (y_new - y) * E / c
            dy_norm = np.abs(dy).max(initial=0.0)
            if dy_norm > 1e-13:
                upd = np.where(dy > 0, dy, 0.0)
                dnd = np.where(dy < 0, dy, 0.0)
                support = float((np.where(upd > 0, u0, 0.0) * upd + np.where(dnd < 0, l0, 0.0) * dnd).sum())
                if np.abs(A0T @ dy).max() <= cfg.eps_pinf * dy_norm and support <= -cfg.eps_pinf * dy_norm:
                    x, y, z = x_new, y_new, z_new
                    status, it = SolveStatus.INFEASIBLE, k
                    break
        x, y, z = x_new, y_new, z_new

    return QpSolution(D * x, E * y / c, status, it, rp, rd)


def solve(prob: QpProblem, cfg: SolveConfig | None = None) -> QpSolution:
    """Solve a single QP; deterministic for fixed inputs and config."""
    cfg = cfg or SolveConfig()
    n, mc = prob.dims()
    if n + mc <= DENSE_KKT_LIMIT and not (sp.issparse(prob.P) or sp.issparse(prob.A)):
        warm = None
        if cfg.warm_start is not None:
            warm = [(np.asarray(cfg.warm_start[0], float), np.asarray(cfg.warm_start[1], float))]
        return _solve_dense_group([prob], cfg, warm)[0]
    return _solve_sparse(prob, cfg)


def solve_batch(probs: list[QpProblem], cfg: SolveConfig | None = None) -> list[QpSolution]:
    """Solve many QPs data-parallel.

    Problems of identical shape are stacked through the dense kernel;
    oversized or malformed instances are handled individually.  A failure
    in one instance never aborts the batch: it surfaces as status ERROR.
    """
    cfg = cfg or SolveConfig()
    results: list[QpSolution | None] = [None] * len(probs)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(probs):
        try:
            n, mc = p.dims()
            if n + mc <= DENSE_KKT_LIMIT and not (sp.issparse(p.P) or sp.issparse(p.A)):
                groups.setdefault((n, mc), []).append(i)
            else:
                results[i] = _solve_sparse(p, cfg)
        except (ValueError, np.linalg.LinAlgError):
            results[i] = _error_solution(p)
    for (n, mc), idxs in groups.items():
        try:
            sols = _solve_dense_group([probs[i] for i in idxs], cfg)
            for i, s in zip(idxs, sols):
                results[i] = s
        except (ValueError, np.linalg.LinAlgError):
            # fall back instance by instance so one bad problem cannot sink the group
            for i in idxs:
                try:
                    results[i] = _solve_dense_group([probs[i]], cfg)[0]
                except (ValueError, np.linalg.LinAlgError):
                    results[i] = _error_solution(probs[i])
    return results  # type: ignore[return-value]


def _error_solution(prob: QpProblem) -> QpSolution:
    n = np.asarray(prob.q).shape[0]
    mc = np.asarray(prob.l).shape[0]
    return QpSolution(np.full(n, np.nan), np.full(mc, np.nan), SolveStatus.ERROR, 0, np.inf, np.inf)
