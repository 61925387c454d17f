"""Tube MPC refinement of a graph path.

The graph path becomes a chain of boundary-value Bezier segments, which
is resampled onto the MPC grid as a reference that satisfies the exact
zero-order-hold discretization of the integrator dynamics: per hop, the
input sequence solves a small equality-constrained least squares problem
that pins the hop endpoints exactly and hugs the curve in between.  (A
polynomial-input curve sampled directly never satisfies ZOH dynamics, so
the resampling is what makes the graph path a genuinely feasible warm
start.)

Safety between steps is a corridor of separating hyperplanes per step and
nearby obstacle, applied to the control points of the step's connecting
segment; dynamic feasibility per step reuses the reachability oracle
rebuilt at the MPC timestep.  Oracle rows are relaxed by exactly the
reference's own worst violation (normally ~1e-3 of the constraint scale,
from the ZOH resampling) so the warm start is admissible by construction;
the tracking tube carries a budget for that slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import bezier, geometry, qpsolver
from .bezier import BezierSpec, StateSpaceCurve
from .geometry import Box, Hyperplane, Polytope
from .reachability import ReachOracle, _endpoint_maps

# tuned for the banded MPC KKT after Ruiz equilibration; the stiff
# equality penalty keeps terminal/dynamics residuals orders below eps
DEFAULT_SOLVER_CONFIG = qpsolver.SolveConfig(
    max_iter=6000, eps_abs=1e-5, eps_rel=1e-5, rho=0.02, scaling_iters=5, check_every=10
)


@dataclass(frozen=True)
class MpcWeights:
    """Tracking (Q), successive-difference path length (Fw), input (R),
    and terminal (V) weights."""

    Q: np.ndarray
    Fw: np.ndarray
    R: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in ("Q", "Fw", "R", "V"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            eigs = np.linalg.eigvalsh(M)
            if eigs.min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
            if name == "R" and eigs.min() <= 0:
                raise ValueError("R must be positive definite")
            object.__setattr__(self, name, M)

    @classmethod
    def scaled(cls, n: int, m: int, q: float, fw: float, r: float, v: float) -> MpcWeights:
        return cls(q * np.eye(n), fw * np.eye(n), r * np.eye(m), v * np.eye(n))


def discretize(spec: BezierSpec, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretization of the integrator chain over a step h.

    Closed form of the matrix exponential of the nilpotent chain:
    A block (i, j) = h^(j-i)/(j-i)! I, B block i = h^(gamma-i)/(gamma-i)! I.
    """
    if h < 0:
        raise ValueError("timestep must be nonnegative")
    m, gamma, n = spec.m, spec.gamma, spec.n
    Ad = np.zeros((n, n))
    Bd = np.zeros((n, m))
    eye = np.eye(m)
    for i in range(gamma):
        for j in range(i, gamma):
            Ad[i * m : (i + 1) * m, j * m : (j + 1) * m] = (h ** (j - i) / math.factorial(j - i)) * eye
        Bd[i * m : (i + 1) * m] = (h ** (gamma - i) / math.factorial(gamma - i)) * eye
    return Ad, Bd


@dataclass
class Reference:
    """Dynamics-consistent resampling of a graph path onto the MPC grid."""

    states: np.ndarray  # (N+1, n)
    inputs: np.ndarray  # (N, m)
    h: float
    spec_h: BezierSpec  # per-step curve family (duration h)
    hop_curves: list[StateSpaceCurve]
    steps_per_hop: int

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def segment(self, k: int) -> StateSpaceCurve:
        return bezier.connect(self.spec_h, self.states[k], self.states[k + 1])

    def dynamics_residual(self, Ad: np.ndarray, Bd: np.ndarray) -> float:
        pred = self.states[:-1] @ Ad.T + self.inputs @ Bd.T
        return float(np.abs(pred - self.states[1:]).max(initial=0.0))


def _hop_input_sequence(
    Ad: np.ndarray, Bd: np.ndarray, x0: np.ndarray, targets: np.ndarray, pin_end: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Inputs driving x0 through the ZOH dynamics toward per-step targets.

    Minimizes the stacked deviation from the targets; when pin_end is set
    the final target is met exactly (reachable since steps >= gamma).
    Returns (states after each step, inputs).
    """
    S = targets.shape[0]  # steps
    n = x0.size
    m = Bd.shape[1]
    # x_k = A^k x0 + sum_j A^(k-1-j) B u_j  ->  stack into x = base + M u
    powers = [np.eye(n)]
    for _ in range(S):
        powers.append(Ad @ powers[-1])
    M = np.zeros((S * n, S * m))
    base = np.zeros(S * n)
    for k in range(1, S + 1):
        base[(k - 1) * n : k * n] = powers[k] @ x0
        for j in range(k):
            M[(k - 1) * n : k * n, j * m : (j + 1) * m] = powers[k - 1 - j] @ Bd
    d = targets.reshape(-1) - base
    if pin_end:
        C, dvec = M[: (S - 1) * n], d[: (S - 1) * n]
        Eq, f = M[(S - 1) * n :], d[(S - 1) * n :]
        nu = Eq.shape[0]
        K = np.zeros((S * m + nu, S * m + nu))
        K[: S * m, : S * m] = 2.0 * C.T @ C + 1e-12 * np.eye(S * m)
        K[: S * m, S * m :] = Eq.T
        K[S * m :, : S * m] = Eq
        K[S * m :, S * m :] = -1e-12 * np.eye(nu)
        rhs = np.concatenate([2.0 * C.T @ dvec, f])
        try:
            w = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            w, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        u = w[: S * m]
    else:
        u, *_ = np.linalg.lstsq(M, d, rcond=None)
    states = (base + M @ u).reshape(S, n)
    return states, u.reshape(S, m)


def build_reference(
    path_states: np.ndarray,
    spec: BezierSpec,
    h: float,
    horizon: int,
    start_time: float = 0.0,
) -> Reference:
    """Resample a vertex path onto the MPC grid.

    Each hop is the unique boundary-value Bezier segment; the grid states
    follow the exact discrete dynamics under a least-squares input
    sequence that pins every hop boundary it covers.  The window starts at
    start_time along the path (a multiple of h) and is truncated to the
    path end when the path is shorter than the horizon.
    """
    path_states = np.atleast_2d(np.asarray(path_states, dtype=np.float64))
    if path_states.shape[0] == 0:
        raise ValueError("path must contain at least one state")
    T = spec.T
    steps_per_hop = int(round(T / h))
    if abs(steps_per_hop * h - T) > 1e-9 * max(1.0, T) or steps_per_hop < spec.gamma:
        raise ValueError(f"segment time {T} must be an integer (>= gamma) multiple of the MPC step {h}")

    Ad, Bd = discretize(spec, h)
    spec_h = spec.with_duration(h)
    hops = [bezier.connect(spec, a, b) for a, b in zip(path_states[:-1], path_states[1:])]

    if not hops:  # singleton path: hold the vertex
        N = max(1, horizon)
        states = np.tile(path_states[0], (N + 1, 1))
        s, u = _hop_input_sequence(Ad, Bd, path_states[0], states[1:], pin_end=False)
        return Reference(np.vstack([path_states[0], s]), u, h, spec_h, [], steps_per_hop)

    k0 = int(round(start_time / h))
    total_steps = steps_per_hop * len(hops)
    if k0 >= total_steps:
        return build_reference(path_states[-1:], spec, h, horizon)
    N = min(horizon, total_steps - k0)

    def curve_state(step: int) -> np.ndarray:
        tau = step * h
        idx = min(int(tau / T + 1e-9), len(hops) - 1)
        return hops[idx].eval(tau - idx * T)

    states = [curve_state(k0)]
    inputs = []
    k = k0
    while k < k0 + N:
        hop_end = (k // steps_per_hop + 1) * steps_per_hop
        seg_end = min(hop_end, k0 + N)
        targets = np.stack([curve_state(j) for j in range(k + 1, seg_end + 1)])
        pin = seg_end == hop_end  # hop boundary inside the window: pin it exactly
        if pin:
            targets[-1] = path_states[hop_end // steps_per_hop]
        s, u = _hop_input_sequence(Ad, Bd, states[-1], targets, pin_end=pin)
        states.extend(list(s))
        inputs.extend(list(u))
        k = seg_end
    return Reference(np.vstack(states), np.vstack(inputs), h, spec_h, hops, steps_per_hop)


class CorridorError(ValueError):
    """A reference state sits inside an inflated obstacle (or its step
    segment hull cannot be separated), so no safe corridor exists."""


def _distance_to(O: Polytope, x: np.ndarray) -> float:
    box = O.as_box()
    if box is not None:
        return float(np.linalg.norm(np.maximum(box.lo - x, 0.0) + np.maximum(x - box.hi, 0.0)))
    return float(np.linalg.norm(geometry.closest_point(O, x) - x))


def _separating_hyperplane(points: np.ndarray, O: Polytope) -> Hyperplane | None:
    """Max-margin style separator between a control-point hull and an
    obstacle via the closest-pair QP; None when they touch."""
    m, J = points.shape
    C = O.num_rows
    nv = J + m
    P = np.zeros((nv, nv))
    P[:J, :J] = 2.0 * points.T @ points
    P[:J, J:] = -2.0 * points.T
    P[J:, :J] = -2.0 * points
    P[J:, J:] = 2.0 * np.eye(m)
    P += 1e-12 * np.eye(nv)
    q = np.zeros(nv)
    A = np.zeros((J + 1 + C, nv))
    A[:J, :J] = np.eye(J)
    A[J, :J] = 1.0
    A[J + 1 :, J:] = O.A
    l = np.concatenate([np.zeros(J), [1.0], np.full(C, -np.inf)])
    u = np.concatenate([np.full(J, np.inf), [1.0], O.b])
    cfg = qpsolver.SolveConfig(max_iter=4000, eps_abs=1e-9, eps_rel=0.0, rho=1.0, polish=True)
    sol = qpsolver.solve(qpsolver.QpProblem(P, q, A, l, u), cfg)
    c_hull = points @ sol.x[:J]
    y = sol.x[J:]
    normal = c_hull - y
    if np.linalg.norm(normal) < 1e-9:
        return None
    return Hyperplane(normal, float(normal @ y))


def build_corridor(
    reference: Reference,
    obstacles: list[Polytope],
    radius: float = 2.0,
    previous: list[list[tuple[int, Hyperplane]]] | None = None,
) -> list[list[tuple[int, Hyperplane]]]:
    """Per-step separating hyperplanes against nearby inflated obstacles.

    Prefers the obstacle face adjacent to the step's start state; when the
    step segment's control points wrap that face, falls back to an exact
    hull/obstacle separator so the reference itself always satisfies its
    own corridor.  `previous` supplies hyperplanes to reuse when a
    separator no longer exists (SQP relinearization of an iterate that
    drifted into contact).
    """
    m = reference.spec_h.m
    N = reference.horizon
    corridor: list[list[tuple[int, Hyperplane]]] = []
    for k in range(N):
        seg_pts = bezier.boundary_points(reference.spec_h, reference.states[k], reference.states[k + 1])
        rk = reference.states[k][:m]
        entries: list[tuple[int, Hyperplane]] = []
        dists = [_distance_to(O, rk) for O in obstacles]
        for oi, O in enumerate(obstacles):
            if dists[oi] > radius and dists[oi] != min(dists):
                continue
            if O.contains(rk):
                raise CorridorError(f"reference state at step {k} is inside inflated obstacle {oi}")
            hp = geometry.adjacent_hyperplane(O, rk)
            if np.all(hp.normal @ seg_pts - hp.offset > 0):
                entries.append((oi, hp))
                continue
            hp = _separating_hyperplane(seg_pts, O.normalized())
            if hp is None:
                prev = None
                if previous is not None and k < len(previous):
                    prev = next((h for i, h in previous[k] if i == oi), None)
                if prev is None:
                    raise CorridorError(f"no separating hyperplane at step {k} for obstacle {oi}")
                hp = prev
            entries.append((oi, hp))
        corridor.append(entries)
    return corridor


@dataclass
class MpcProblem:
    """Discretized tube-MPC program over one reference window."""

    spec: BezierSpec  # step curve family (duration h)
    h: float
    Ad: np.ndarray
    Bd: np.ndarray
    reference: Reference
    initial_state: np.ndarray  # measured reduced state
    initial_set: Box  # tracking tube error box
    corridor: list[list[tuple[int, Hyperplane]]]
    oracle: ReachOracle  # built at the MPC timestep
    weights: MpcWeights
    oracle_slack: np.ndarray = field(default=None)  # type: ignore[assignment]
    _mats: tuple | None = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return self.reference.horizon

    def __post_init__(self):
        if self.oracle_slack is None:
            # relax oracle rows by the reference's own worst violation so the
            # graph warm start is admissible by construction
            viol = np.zeros(self.oracle.G.size)
            r = self.reference.states
            for k in range(self.horizon):
                lhs = self.oracle.F @ np.concatenate([r[k], r[k + 1]])
                viol = np.maximum(viol, lhs - self.oracle.G)
            self.oracle_slack = np.maximum(viol, 0.0) + 1e-9

    def matrices(self):
        if self._mats is None:
            self._mats = _assemble(self)
        return self._mats


class _Triplets:
    """Row-block COO builder; duplicate entries sum on conversion."""

    def __init__(self, ncols: int):
        self.ncols = ncols
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.nrows = 0

    def block(self, r0: int, c0: int, B: np.ndarray):
        a, b = B.shape
        self.rows.append(np.repeat(np.arange(r0, r0 + a), b))
        self.cols.append(np.tile(np.arange(c0, c0 + b), a))
        self.vals.append(np.asarray(B, dtype=np.float64).ravel())

    def matrix(self, nrows: int) -> sp.csc_matrix:
        return sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(nrows, self.ncols),
        ).tocsc()


@lru_cache(maxsize=64)
def _position_maps(spec: BezierSpec) -> np.ndarray:
    """(p+1, m, 2n) stack of maps from [x_k; x_{k+1}] to the position rows
    of each control-point column of the connecting segment."""
    W = _endpoint_maps(spec)
    return np.stack([Wj[: spec.m] for Wj in W])


def _assemble(prob: MpcProblem):
    spec = prob.spec
    n, m, N = spec.n, spec.m, prob.horizon
    nz = (N + 1) * n + N * m
    ix = lambda k: k * n
    iu = lambda k: (N + 1) * n + k * m
    Wpos = _position_maps(spec)
    r = prob.reference.states

    cost = _Triplets(nz)
    q = np.zeros(nz)
    Q2, F2, R2, V2 = 2 * prob.weights.Q, 2 * prob.weights.Fw, 2 * prob.weights.R, 2 * prob.weights.V
    for k in range(N):
        cost.block(ix(k), ix(k), Q2 + F2)
        cost.block(ix(k + 1), ix(k + 1), F2)
        cost.block(ix(k), ix(k + 1), -F2)
        cost.block(ix(k + 1), ix(k), -F2)
        cost.block(iu(k), iu(k), R2)
        q[ix(k) : ix(k) + n] += -Q2 @ r[k]
    cost.block(ix(N), ix(N), V2)
    q[ix(N) : ix(N) + n] += -V2 @ r[N]
    P = cost.matrix(nz)

    con = _Triplets(nz)
    lo: list[np.ndarray] = []
    hi: list[np.ndarray] = []
    row = 0
    eye_n = np.eye(n)

    for k in range(N):  # dynamics
        con.block(row, ix(k), -prob.Ad)
        con.block(row, ix(k + 1), eye_n)
        con.block(row, iu(k), -prob.Bd)
        lo.append(np.zeros(n))
        hi.append(np.zeros(n))
        row += n

    con.block(row, ix(0), eye_n)  # initial set
    lo.append(prob.initial_state + prob.initial_set.lo)
    hi.append(prob.initial_state + prob.initial_set.hi)
    row += n

    con.block(row, ix(N), eye_n)  # terminal anchor
    lo.append(r[N])
    hi.append(r[N])
    row += n

    nF = prob.oracle.G.size
    G_relaxed = prob.oracle.G + prob.oracle_slack
    for k in range(N):  # reachability rows
        con.block(row, ix(k), prob.oracle.F1)
        con.block(row, ix(k + 1), prob.oracle.F2)
        lo.append(np.full(nF, -np.inf))
        hi.append(G_relaxed)
        row += nF

    for k, entries in enumerate(prob.corridor):  # corridor rows
        for _, hp in entries:
            C = -np.einsum("d,jdq->jq", hp.normal, Wpos)  # (p+1, 2n)
            con.block(row, ix(k), C[:, :n])
            con.block(row, ix(k + 1), C[:, n:])
            lo.append(np.full(spec.p + 1, -np.inf))
            hi.append(np.full(spec.p + 1, -hp.offset))
            row += spec.p + 1

    A = con.matrix(row)
    return P, q, A, np.concatenate(lo), np.concatenate(hi)


@dataclass
class MpcSolution:
    states: np.ndarray  # (N+1, n)
    inputs: np.ndarray  # (N, m)
    status: qpsolver.SolveStatus
    objective: float
    curves: list[StateSpaceCurve]
    iterations: int
    objective_history: list[float] = field(default_factory=list)

    @property
    def solved(self) -> bool:
        return self.status == qpsolver.SolveStatus.SOLVED


def _objective(prob: MpcProblem, x: np.ndarray, u: np.ndarray) -> float:
    r = prob.reference.states
    w = prob.weights
    J = 0.0
    for k in range(prob.horizon):
        dx = x[k] - r[k]
        dd = x[k + 1] - x[k]
        J += dx @ w.Q @ dx + dd @ w.Fw @ dd + u[k] @ w.R @ u[k]
    dN = x[-1] - r[-1]
    return float(J + dN @ w.V @ dN)


def reference_check(prob: MpcProblem, tol: float = 1e-7) -> dict:
    """Direct substitution of the reference into every MPC constraint."""
    r = prob.reference.states
    uref = prob.reference.inputs
    N = prob.horizon
    dyn = prob.reference.dynamics_residual(prob.Ad, prob.Bd)
    ic = bool(
        np.all(r[0] - prob.initial_state >= prob.initial_set.lo - tol)
        and np.all(r[0] - prob.initial_state <= prob.initial_set.hi + tol)
    )
    oracle_viol = -np.inf
    for k in range(N):
        lhs = prob.oracle.F @ np.concatenate([r[k], r[k + 1]])
        oracle_viol = max(oracle_viol, float((lhs - prob.oracle.G - prob.oracle_slack).max()))
    corridor_sep = np.inf
    for k, entries in enumerate(prob.corridor):
        pts = bezier.boundary_points(prob.spec, r[k], r[k + 1])
        for _, hp in entries:
            corridor_sep = min(corridor_sep, float((hp.normal @ pts - hp.offset).min()))
    ok = dyn <= tol and ic and oracle_viol <= tol and corridor_sep >= -tol and N >= 1
    return {
        "ok": bool(ok),
        "dynamics_residual": dyn,
        "initial_set_ok": ic,
        "oracle_violation": oracle_viol,
        "corridor_separation": corridor_sep,
        "oracle_slack_max": float(prob.oracle_slack.max(initial=0.0)),
    }


def solve_mpc(
    prob: MpcProblem,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
    cfg: qpsolver.SolveConfig | None = None,
) -> MpcSolution:
    """Solve the MPC QP, warm-started from the reference by default."""
    n, m, N = prob.spec.n, prob.spec.m, prob.horizon
    P, q, A, l, u = prob.matrices()
    if warm_start is None:
        warm_start = (prob.reference.states, prob.reference.inputs)
    z0 = np.concatenate([np.asarray(warm_start[0]).reshape(-1), np.asarray(warm_start[1]).reshape(-1)])
    import dataclasses

    cfg = dataclasses.replace(cfg or DEFAULT_SOLVER_CONFIG)
    cfg.warm_start = (z0, np.zeros(A.shape[0]))
    sol = qpsolver.solve(qpsolver.QpProblem(P, q, A, l, u), cfg)
    x = sol.x[: (N + 1) * n].reshape(N + 1, n)
    uu = sol.x[(N + 1) * n :].reshape(N, m)
    curves = [bezier.connect(prob.spec, x[k], x[k + 1]) for k in range(N)]
    return MpcSolution(x, uu, sol.status, _objective(prob, x, uu), curves, sol.iterations)


def _corridor_equal(a, b) -> bool:
    if len(a) != len(b):
        return False
    for ea, eb in zip(a, b):
        if len(ea) != len(eb):
            return False
        for (oi, ha), (oj, hb) in zip(ea, eb):
            if oi != oj or abs(ha.offset - hb.offset) > 1e-12 or np.any(np.abs(ha.normal - hb.normal) > 1e-12):
                return False
    return True


def sqp_refine(
    prob: MpcProblem,
    iterations: int = 1,
    obstacles: list[Polytope] | None = None,
    radius: float = 2.0,
    cfg: qpsolver.SolveConfig | None = None,
) -> MpcSolution:
    """Iteratively re-linearize the corridor at the previous solution and
    re-solve; keeps the best (non-increasing) objective.  One iteration
    reproduces solve_mpc exactly."""
    if iterations < 1:
        raise ValueError("need at least one iteration")
    best = solve_mpc(prob, cfg=cfg)
    best.objective_history.append(best.objective)
    if not best.solved:
        return best
    current = prob
    for _ in range(iterations - 1):
        if obstacles is None:
            best.objective_history.append(best.objective)
            continue
        ref_like = Reference(
            best.states, best.inputs, prob.h, prob.spec, prob.reference.hop_curves, prob.reference.steps_per_hop
        )
        try:
            corridor = build_corridor(ref_like, obstacles, radius, previous=current.corridor)
        except CorridorError:
            best.objective_history.append(best.objective)
            break
        if _corridor_equal(corridor, current.corridor):
            best.objective_history.append(best.objective)
            break  # nothing to re-linearize
        trial = MpcProblem(
            prob.spec, prob.h, prob.Ad, prob.Bd, prob.reference, prob.initial_state,
            prob.initial_set, corridor, prob.oracle, prob.weights, prob.oracle_slack,
        )
        cand = solve_mpc(trial, warm_start=(best.states, best.inputs), cfg=cfg)
        if cand.solved and cand.objective <= best.objective + 1e-9:
            cand.objective_history = best.objective_history + [cand.objective]
            best, current = cand, trial
        else:
            best.objective_history.append(best.objective)
            break
    return best
