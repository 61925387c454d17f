"""Closed-loop validation on a disturbed integrator proxy.

The proxy plant is the planning model itself plus a bounded matched
disturbance and a linear tracking controller, which makes the tracking
tube enforceable and the pipeline's guarantees testable without hardware:
curves certified by the oracle, cut against tube-inflated obstacles, and
refined by the MPC should keep the disturbed plant inside the state set,
inside the input bounds, and out of every true obstacle.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import bezier, geometry, graph as graphmod, mpc as mpcmod, qpsolver, reachability
from .bezier import BezierSpec, StateSpaceCurve
from .geometry import Box, Polytope
from .graph import BezierGraph, CutConfig, CutMask
from .mpc import CorridorError, MpcProblem, MpcWeights, Reference
from .reachability import ReachOracle, TrackingTube
from .scenario import Scenario


def gain_matrix(spec: BezierSpec, gains: tuple[float, ...]) -> np.ndarray:
    """Full feedback matrix K (m x n) from per-derivative scalar gains."""
    if len(gains) != spec.gamma:
        raise ValueError(f"need {spec.gamma} gains, got {len(gains)}")
    return np.hstack([g * np.eye(spec.m) for g in gains])


def design_tube(
    spec: BezierSpec,
    gains: tuple[float, ...],
    w_max: float,
    headroom: float = 1.2,
    state_slack: float = 0.02,
    input_slack: float = 0.25,
) -> TrackingTube:
    """Disturbance-invariant tube for the tracked integrator chain.

    Per output axis the error obeys e' = A_cl e + B w with |w| <= w_max;
    a Lyapunov sublevel set invariant under that disturbance is bounded
    by a box, scaled by `headroom` to absorb discretization.  The input
    margin is the worst feedback effort over the box plus `input_slack`,
    and `state_slack` budgets the MPC reference resampling error; both
    slacks keep downstream constraint relaxations inside the certified
    bounds.
    """
    g = spec.gamma
    A = np.zeros((g, g))
    A[: g - 1, 1:] = np.eye(g - 1)
    A[-1, :] = -np.asarray(gains, dtype=np.float64)
    B = np.zeros(g)
    B[-1] = 1.0
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -np.eye(g))
    radius = 2.0 * np.linalg.norm(P @ B) * w_max
    level = float(np.linalg.eigvalsh(P).max()) * radius**2
    Pinv = np.linalg.inv(P)
    axis_box = headroom * np.sqrt(level * np.diag(Pinv))  # per-derivative bound

    e = np.concatenate([np.full(spec.m, axis_box[k]) for k in range(g)])
    e = e + state_slack
    fb = float(np.dot(np.abs(np.asarray(gains)), axis_box))
    margin = np.full(spec.m, fb + input_slack)
    return TrackingTube(Box(-e, e), Box(-margin, margin))


def tracking_controller(
    x: np.ndarray, curve: StateSpaceCurve, t: float, K: np.ndarray
) -> np.ndarray:
    """u = u_d(t) + K (x_d(t) - x): feedforward from the curve's input
    plus proportional feedback on the lifted tracking error."""
    t = min(max(t, 0.0), curve.spec.T)
    return curve.input_eval(t) + K @ (curve.eval(t) - x)


def step(
    state: np.ndarray, u: np.ndarray, w: np.ndarray, dt: float, spec: BezierSpec
) -> np.ndarray:
    """Exact integrator update under input u plus matched disturbance w."""
    Ad, Bd = mpcmod.discretize(spec, dt)
    return Ad @ state + Bd @ (u + w)


def _hold_curve(spec_h: BezierSpec, position: np.ndarray) -> StateSpaceCurve:
    state = np.concatenate([position, np.zeros(spec_h.n - spec_h.m)])
    return bezier.connect(spec_h, state, state)


@dataclass
class ClosedLoopTrace:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    events: list[dict]
    collision: bool
    input_violation: bool
    state_violation: bool
    goal_time: float | None
    success: bool
    cut_history: list[dict] = field(default_factory=list)
    final_graph: BezierGraph | None = None
    final_mask: CutMask | None = None
    final_path: list[int] | None = None

    def summary(self) -> dict:
        return {
            "steps": int(self.times.size),
            "duration": float(self.times[-1]) if self.times.size else 0.0,
            "success": self.success,
            "goal_time": self.goal_time,
            "collision": self.collision,
            "input_violation": self.input_violation,
            "state_violation": self.state_violation,
            "path_length": float(
                np.linalg.norm(np.diff(self.states[:, :2], axis=0), axis=1).sum()
            )
            if self.states.size
            else 0.0,
            "events": len(self.events),
        }

    def to_jsonl(self) -> str:
        lines = []
        for i in range(self.times.size):
            lines.append(
                json.dumps(
                    {
                        "t": float(self.times[i]),
                        "state": self.states[i].tolist(),
                        "input": self.inputs[i].tolist(),
                    }
                )
            )
        return "\n".join(lines)


def simulate_tracking(
    curve: StateSpaceCurve,
    gains: tuple[float, ...],
    w_max: float,
    x0: np.ndarray,
    dt: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Track one curve from (possibly batched) initial states under
    uniform bounded disturbance; returns (states, inputs) over time with
    shape (steps+1, B, n) / (steps, B, m)."""
    spec = curve.spec
    K = gain_matrix(spec, gains)
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    steps = int(round(spec.T / dt))
    Ad, Bd = mpcmod.discretize(spec, dt)
    ts = np.arange(steps) * dt
    xd = curve.eval_many(ts)  # (steps, n)
    ud = bezier.de_casteljau_many(curve.input_points(), ts / spec.T)  # (steps, m)
    states = np.empty((steps + 1,) + X0.shape)
    inputs = np.empty((steps,) + (X0.shape[0], spec.m))
    states[0] = X0
    x = X0.copy()
    for k in range(steps):
        u = ud[k] + (xd[k] - x) @ K.T
        w = rng.uniform(-w_max, w_max, (X0.shape[0], spec.m))
        x = x @ Ad.T + (u + w) @ Bd.T
        states[k + 1] = x
        inputs[k] = u
    return states, inputs


@dataclass
class PlanResult:
    graph: BezierGraph
    mask: CutMask
    path: list[int] | None
    reference: Reference | None
    solution: mpcmod.MpcSolution | None
    obstacles_inflated: list[Polytope]
    cut_wall_time: float

    @property
    def ok(self) -> bool:
        return self.path is not None and (self.solution is None or self.solution.solved)


def build_pipeline(scenario: Scenario, include_endpoints: bool = True, extra_vertices: np.ndarray | None = None):
    """Oracle + graph shared by one-shot planning and the closed loop.

    Start and goal are appended as graph vertices so Problem-style tube
    snapping always has a candidate; mutated goals later snap to existing
    vertices because the graph never changes after this call."""
    oracle = reachability.build_oracle(scenario.spec, scenario.xd, scenario.u_bounds, scenario.tube)
    include = []
    if include_endpoints:
        include = [scenario.start, scenario.goal]
    if extra_vertices is not None:
        include = list(extra_vertices) + include
    g = graphmod.build_graph(
        scenario.graph_n,
        scenario.spec,
        oracle,
        scenario.sample_bounds,
        scenario.seed_graph,
        include=np.array(include) if include else None,
    )
    spec_h = scenario.spec.with_duration(scenario.h)
    oracle_h = reachability.build_oracle(spec_h, scenario.xd, scenario.u_bounds, scenario.tube)
    return oracle, g, oracle_h


def _inflated(scenario: Scenario, t: float) -> list[Polytope]:
    pos_tube = scenario.tube.position_box(scenario.spec.m)
    return [geometry.inflate(ob, pos_tube) for ob in scenario.obstacles_at(t)]


def _project_on_path(
    path_states: np.ndarray, spec: BezierSpec, h: float, state: np.ndarray
) -> float:
    """Grid time along the path's curve chain positionally closest to the
    state; anchors the receding reference window at the vehicle's
    progression along the path rather than at the snapped vertex."""
    hops = [bezier.connect(spec, a, b) for a, b in zip(path_states[:-1], path_states[1:])]
    if not hops:
        return 0.0
    spt = int(round(spec.T / h))
    total = spt * len(hops)
    best_t, best_d = 0.0, np.inf
    for k in range(total):
        tau = k * h
        idx = min(int(tau / spec.T + 1e-9), len(hops) - 1)
        xs = hops[idx].eval(tau - idx * spec.T)
        d = float(np.linalg.norm(xs[: spec.m] - state[: spec.m]))
        if d < best_d:
            best_t, best_d = tau, d
    return best_t


def plan_once(
    scenario: Scenario,
    graph_pre: BezierGraph | None = None,
    oracle_h: ReachOracle | None = None,
    cut_cfg: CutConfig | None = None,
    extra_vertices: np.ndarray | None = None,
) -> PlanResult:
    """Single pass of the pipeline: cut, search, refine.  No simulation."""
    if graph_pre is None or oracle_h is None:
        _, graph_pre, oracle_h = build_pipeline(scenario, extra_vertices=extra_vertices)
    g = graph_pre
    inflated = _inflated(scenario, 0.0)
    t0 = time.perf_counter()
    mask = graphmod.cut_graph(g, inflated, cut_cfg)
    cut_wall = time.perf_counter() - t0
    path = graphmod.find_path(g, mask, scenario.start, scenario.goal)
    if path is None:
        return PlanResult(g, mask, None, None, None, inflated, cut_wall)
    reference = mpcmod.build_reference(g.vertices[path], scenario.spec, scenario.h, scenario.horizon)
    weights = MpcWeights.scaled(scenario.spec.n, scenario.spec.m, *scenario.weights)
    Ad, Bd = mpcmod.discretize(scenario.spec, scenario.h)
    try:
        corridor = mpcmod.build_corridor(reference, inflated, scenario.corridor_radius)
    except CorridorError:
        return PlanResult(g, mask, path, reference, None, inflated, cut_wall)
    problem = MpcProblem(
        reference.spec_h, scenario.h, Ad, Bd, reference, scenario.start,
        scenario.tube.error, corridor, oracle_h, weights,
    )
    solution = mpcmod.sqp_refine(problem, scenario.sqp_iters, inflated, scenario.corridor_radius)
    return PlanResult(g, mask, path, reference, solution, inflated, cut_wall)


def run_closed_loop(
    scenario: Scenario,
    extra_vertices: np.ndarray | None = None,
    max_wall_time: float | None = None,
) -> ClosedLoopTrace:
    """Receding-horizon loop: recut at cut_hz (fixed graph), re-plan the
    path and MPC at mpc_hz, track the refined first segment, hold at the
    last curve's end position on NoPath cycles, and stop when the state
    enters the goal's tube neighborhood or the scenario times out.
    """
    spec = scenario.spec
    dt = 1.0 / scenario.sim_hz
    cut_every = int(round(scenario.sim_hz / scenario.cut_hz))
    mpc_every = int(round(scenario.sim_hz / scenario.mpc_hz))
    h = scenario.h
    steps_total = int(round(scenario.timeout * scenario.sim_hz))

    _, g, oracle_h = build_pipeline(scenario, extra_vertices=extra_vertices)
    weights = MpcWeights.scaled(spec.n, spec.m, *scenario.weights)
    Ad_mpc, Bd_mpc = mpcmod.discretize(spec, h)
    Ad, Bd = mpcmod.discretize(spec, dt)
    K = gain_matrix(spec, scenario.gains)
    rng = np.random.default_rng(scenario.seed_disturbance)
    moving = any(ob.moves for ob in scenario.obstacles)

    state = scenario.start.copy()
    tube = scenario.tube.error
    times = [0.0]
    states = [state.copy()]
    inputs = []
    events: list[dict] = []
    cut_history: list[dict] = []
    collision = input_violation = state_violation = False
    goal_time: float | None = None

    mask: CutMask | None = None
    path: list[int] | None = None
    path_time = 0.0
    active_curve: StateSpaceCurve | None = None
    curve_t0 = 0.0
    inflated: list[Polytope] = []
    wall_start = time.perf_counter()

    for k in range(steps_total):
        t = k * dt
        if max_wall_time is not None and time.perf_counter() - wall_start > max_wall_time:
            events.append({"t": t, "kind": "wall_timeout"})
            break

        if k % cut_every == 0:
            if mask is None or moving:
                inflated = _inflated(scenario, t)
                mask = graphmod.cut_graph(g, inflated)
                cut_history.append(
                    {"t": t, "alive": mask.alive_count, "heuristic_fraction": mask.heuristic_fraction}
                )
            new_path = graphmod.find_path(
                g, mask, state, scenario.goal,
                position_only_snap=(k > 0),  # mid-run: anchor by position, MPC aligns velocity
                require_tube_snap=(k == 0),
            )
            if new_path is None:
                events.append({"t": t, "kind": "no_path"})
                path = None
            else:
                path = new_path
                path_time = _project_on_path(g.vertices[path], spec, h, state)

        if k % mpc_every == 0 and path is not None:
            reference = mpcmod.build_reference(g.vertices[path], spec, h, scenario.horizon, path_time)
            try:
                corridor = mpcmod.build_corridor(reference, inflated, scenario.corridor_radius)
                problem = MpcProblem(
                    reference.spec_h, h, Ad_mpc, Bd_mpc, reference, state,
                    tube, corridor, oracle_h, weights,
                )
                solution = mpcmod.sqp_refine(problem, scenario.sqp_iters, inflated, scenario.corridor_radius)
            except CorridorError as exc:
                events.append({"t": t, "kind": "corridor_failure", "detail": str(exc)})
                solution = None
            if solution is not None and solution.solved:
                active_curve = solution.curves[0]
                curve_t0 = t
            else:
                if solution is not None:
                    events.append({"t": t, "kind": "mpc_" + solution.status.value})
                # fall back to the (feasible) graph reference for this cycle
                active_curve = reference.segment(0)
                curve_t0 = t
            path_time += h

        if active_curve is None:
            active_curve = _hold_curve(spec.with_duration(h), state[: spec.m])
            curve_t0 = t
        tau = t - curve_t0
        if tau > active_curve.spec.T + 1e-9:
            active_curve = _hold_curve(spec.with_duration(h), active_curve.end_state()[: spec.m])
            curve_t0 = t
            tau = 0.0
        u = tracking_controller(state, active_curve, tau, K)
        w = rng.uniform(-scenario.w_max, scenario.w_max, spec.m)
        state = Ad @ state + Bd @ (u + w)

        times.append(t + dt)
        states.append(state.copy())
        inputs.append(u.copy())

        if not scenario.u_bounds.contains(u, 1e-9):
            input_violation = True
        if not scenario.xd.contains(state, 1e-7):
            state_violation = True
        pos = state[: spec.m]
        if any(ob.contains(pos) for ob in scenario.obstacles_at(t + dt)):
            collision = True
        err = state - scenario.goal
        if np.all(err >= tube.lo) and np.all(err <= tube.hi):
            goal_time = t + dt
            break

    return ClosedLoopTrace(
        times=np.asarray(times),
        states=np.asarray(states),
        inputs=np.asarray(inputs) if inputs else np.zeros((0, spec.m)),
        events=events,
        collision=collision,
        input_violation=input_violation,
        state_violation=state_violation,
        goal_time=goal_time,
        success=goal_time is not None and not collision and not input_violation,
        cut_history=cut_history,
        final_graph=g,
        final_mask=mask,
        final_path=path,
    )
