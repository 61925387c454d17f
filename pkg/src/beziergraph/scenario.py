"""Scenario files: the versioned JSON documents driving the planner,
simulator, service, and CLI.

A scenario bundles the curve family, state set, input bounds, tracking
tube, obstacle field (optionally with piecewise-linear motion schedules),
start/goal, loop rates, graph and MPC configuration, and seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bezier import BezierSpec
from .geometry import Box, Polytope, bounding_box
from .reachability import TrackingTube

SCENARIO_SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Scenario validation failure; the message names the offending field."""


@dataclass(frozen=True)
class ObstacleTrack:
    """A convex obstacle plus an optional translation schedule
    [(t, offset), ...] interpolated piecewise-linearly and held constant
    beyond the last waypoint."""

    shape: Polytope
    motion: tuple[tuple[float, np.ndarray], ...] = ()

    def offset_at(self, t: float) -> np.ndarray:
        if not self.motion:
            return np.zeros(self.shape.dim)
        times = np.array([w[0] for w in self.motion])
        offsets = np.stack([w[1] for w in self.motion])
        return np.stack([np.interp(t, times, offsets[:, d]) for d in range(self.shape.dim)])

    def at(self, t: float) -> Polytope:
        if not self.motion:
            return self.shape
        return self.shape.translate(self.offset_at(t))

    @property
    def moves(self) -> bool:
        return len(self.motion) > 1

    def to_json(self) -> dict:
        data = self.shape.to_json()
        if self.motion:
            data["motion"] = [{"t": float(t), "offset": o.tolist()} for t, o in self.motion]
        return data


@dataclass
class Scenario:
    spec: BezierSpec
    xd: Polytope
    u_bounds: Box
    tube: TrackingTube
    obstacles: list[ObstacleTrack]
    start: np.ndarray  # reduced state of the proxy plant
    goal: np.ndarray
    cut_hz: float = 10.0
    mpc_hz: float = 10.0
    sim_hz: float = 100.0
    graph_n: int = 250
    horizon: int = 20
    weights: tuple[float, float, float, float] = (10.0, 1.0, 0.1, 10.0)  # q, fw, r, v
    sqp_iters: int = 1
    corridor_radius: float = 2.0
    gains: tuple[float, ...] = (6.0, 5.0)
    w_max: float = 0.02
    seed_graph: int = 1
    seed_disturbance: int = 2
    timeout: float = 40.0
    sample_bounds: Box | None = None
    name: str = "scenario"

    @property
    def h(self) -> float:
        return 1.0 / self.mpc_hz

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        n = self.spec.n
        if self.start.shape != (n,):
            raise ScenarioError(f"start: expected {n} components, got {self.start.shape}")
        if self.goal.shape != (n,):
            raise ScenarioError(f"goal: expected {n} components, got {self.goal.shape}")
        if not self.xd.contains(self.start, 1e-9):
            raise ScenarioError("start: not inside the state set xd")
        if not self.xd.contains(self.goal, 1e-9):
            raise ScenarioError("goal: not inside the state set xd")
        if self.sample_bounds is None:
            self.sample_bounds = bounding_box(self.xd)
        steps = self.spec.T * self.mpc_hz
        if abs(steps - round(steps)) > 1e-6 or round(steps) < self.spec.gamma:
            raise ScenarioError("rates.mpc_hz: segment time T must be an integer (>= gamma) multiple of the MPC step")
        for r, name in ((self.cut_hz, "cut_hz"), (self.mpc_hz, "mpc_hz")):
            ratio = self.sim_hz / r
            if abs(ratio - round(ratio)) > 1e-6:
                raise ScenarioError(f"rates.{name}: sim_hz must be an integer multiple of {name}")
        scene = bounding_box(self.xd)
        pos_lo, pos_hi = scene.lo[: self.spec.m], scene.hi[: self.spec.m]
        for i, ob in enumerate(self.obstacles):
            if ob.shape.dim != self.spec.m:
                raise ScenarioError(f"obstacles[{i}]: must live in the {self.spec.m}-d position space")
            bb = bounding_box(ob.shape)
            if np.any(bb.hi < pos_lo - 1e-9) or np.any(bb.lo > pos_hi + 1e-9):
                raise ScenarioError(f"obstacles[{i}]: entirely outside the scene bounds")

    def obstacles_at(self, t: float) -> list[Polytope]:
        return [ob.at(t) for ob in self.obstacles]

    def scene_box(self) -> Box:
        scene = bounding_box(self.xd)
        return Box(scene.lo[: self.spec.m], scene.hi[: self.spec.m])

    def with_goal(self, goal: np.ndarray) -> Scenario:
        return replace(self, goal=np.asarray(goal, dtype=np.float64))

    def to_json(self) -> dict:
        return {
            "version": SCENARIO_SCHEMA_VERSION,
            "name": self.name,
            "bezier": {"m": self.spec.m, "gamma": self.spec.gamma, "segment_time": self.spec.T},
            "state_constraints": self.xd.to_json(),
            "input_bounds": self.u_bounds.to_json(),
            "tube": self.tube.to_json(),
            "obstacles": [ob.to_json() for ob in self.obstacles],
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "rates": {"cut_hz": self.cut_hz, "mpc_hz": self.mpc_hz, "sim_hz": self.sim_hz},
            "graph": {"N": self.graph_n, "seed": self.seed_graph},
            "mpc": {
                "horizon": self.horizon,
                "Q": self.weights[0],
                "Fw": self.weights[1],
                "R": self.weights[2],
                "V": self.weights[3],
                "sqp_iters": self.sqp_iters,
                "corridor_radius": self.corridor_radius,
            },
            "tracking": {"gains": list(self.gains), "w_max": self.w_max},
            "seeds": {"graph": self.seed_graph, "disturbance": self.seed_disturbance},
            "timeout": self.timeout,
        }


def _parse_set(data: dict, fieldname: str) -> Polytope:
    try:
        return Polytope.from_json(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"{fieldname}: {exc}") from exc


def scenario_from_json(data: dict) -> Scenario:
    """Parse and validate a scenario document, reporting the failing field."""
    try:
        from jsonschema import ValidationError, validate

        validate(data, scenario_schema())
    except ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{path}: {exc.message}") from exc

    bz = data["bezier"]
    spec = BezierSpec(m=int(bz["m"]), gamma=int(bz["gamma"]), T=float(bz["segment_time"]))
    xd = _parse_set(data["state_constraints"], "state_constraints")
    try:
        u_bounds = Box.from_json(data["input_bounds"])
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"input_bounds: {exc}") from exc
    try:
        tube = TrackingTube.from_json(data["tube"])
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"tube: {exc}") from exc

    obstacles = []
    for i, ob in enumerate(data.get("obstacles", [])):
        shape = _parse_set(ob, f"obstacles[{i}]")
        motion = tuple(
            (float(w["t"]), np.asarray(w["offset"], dtype=np.float64)) for w in ob.get("motion", [])
        )
        obstacles.append(ObstacleTrack(shape, motion))

    rates = data.get("rates", {})
    mpc = data.get("mpc", {})
    tracking = data.get("tracking", {})
    seeds = data.get("seeds", {})
    try:
        return Scenario(
            spec=spec,
            xd=xd,
            u_bounds=u_bounds,
            tube=tube,
            obstacles=obstacles,
            start=np.asarray(data["start"], dtype=np.float64),
            goal=np.asarray(data["goal"], dtype=np.float64),
            cut_hz=float(rates.get("cut_hz", 10.0)),
            mpc_hz=float(rates.get("mpc_hz", 10.0)),
            sim_hz=float(rates.get("sim_hz", 100.0)),
            graph_n=int(data.get("graph", {}).get("N", 250)),
            horizon=int(mpc.get("horizon", 20)),
            weights=(
                float(mpc.get("Q", 10.0)),
                float(mpc.get("Fw", 1.0)),
                float(mpc.get("R", 0.1)),
                float(mpc.get("V", 10.0)),
            ),
            sqp_iters=int(mpc.get("sqp_iters", 1)),
            corridor_radius=float(mpc.get("corridor_radius", 2.0)),
            gains=tuple(tracking.get("gains", (6.0, 5.0))),
            w_max=float(tracking.get("w_max", 0.02)),
            seed_graph=int(seeds.get("graph", data.get("graph", {}).get("seed", 1))),
            seed_disturbance=int(seeds.get("disturbance", 2)),
            timeout=float(data.get("timeout", 40.0)),
            name=str(data.get("name", "scenario")),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as f:
        return scenario_from_json(json.load(f))


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(scenario.to_json(), f, indent=2)


def scenario_schema() -> dict:
    """The JSON schema shipped in docs/schemas/scenario.schema.json."""
    schema_path = Path(__file__).resolve().parents[2] / "docs" / "schemas" / "scenario.schema.json"
    if schema_path.exists():
        with open(schema_path) as f:
            return json.load(f)
    return _SCHEMA_FALLBACK


_SET_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"A": {"type": "array"}, "b": {"type": "array"}},
            "required": ["A", "b"],
        },
        {
            "type": "object",
            "properties": {"lo": {"type": "array"}, "hi": {"type": "array"}},
            "required": ["lo", "hi"],
        },
    ]
}

_SCHEMA_FALLBACK = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "beziergraph scenario",
    "type": "object",
    "required": ["version", "bezier", "state_constraints", "input_bounds", "tube", "start", "goal"],
    "properties": {
        "version": {"const": SCENARIO_SCHEMA_VERSION},
        "name": {"type": "string"},
        "bezier": {
            "type": "object",
            "required": ["m", "gamma", "segment_time"],
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "gamma": {"type": "integer", "minimum": 1},
                "segment_time": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "state_constraints": _SET_SCHEMA,
        "input_bounds": _SET_SCHEMA["oneOf"][1],
        "tube": {
            "type": "object",
            "required": ["error", "input_margin"],
            "properties": {"error": _SET_SCHEMA["oneOf"][1], "input_margin": _SET_SCHEMA["oneOf"][1]},
        },
        "obstacles": {"type": "array"},
        "start": {"type": "array", "items": {"type": "number"}},
        "goal": {"type": "array", "items": {"type": "number"}},
        "rates": {"type": "object"},
        "graph": {"type": "object"},
        "mpc": {"type": "object"},
        "tracking": {"type": "object"},
        "seeds": {"type": "object"},
        "timeout": {"type": "number"},
    },
}


def _box_obstacle(cx: float, cy: float, wx: float, wy: float) -> ObstacleTrack:
    return ObstacleTrack(Box(np.array([cx - wx / 2, cy - wy / 2]), np.array([cx + wx / 2, cy + wy / 2])).to_polytope())


def _standard_sets(v_max: float = 1.5, u_max: float = 6.0, side: float = 5.0, v_sample: float = 0.6):
    xd = Box(np.array([0.0, 0.0, -v_max, -v_max]), np.array([side, side, v_max, v_max])).to_polytope()
    u = Box(np.array([-u_max, -u_max]), np.array([u_max, u_max]))
    sample = Box(np.array([0.0, 0.0, -v_sample, -v_sample]), np.array([side, side, v_sample, v_sample]))
    return xd, u, sample


def demo_scenario(seed: int = 7) -> Scenario:
    """The interactive default: a 5x5 field with a handful of boxes."""
    from .sim import design_tube

    spec = BezierSpec(m=2, gamma=2, T=1.0)
    xd, u, sample = _standard_sets()
    gains = (6.0, 5.0)
    w_max = 0.02
    tube = design_tube(spec, gains, w_max)
    obstacles = [
        _box_obstacle(2.5, 2.5, 1.0, 1.0),
        _box_obstacle(1.2, 3.8, 0.8, 0.8),
        _box_obstacle(3.8, 1.2, 0.8, 0.8),
    ]
    return Scenario(
        spec=spec,
        xd=xd,
        u_bounds=u,
        tube=tube,
        obstacles=obstacles,
        start=np.array([0.5, 0.5, 0.0, 0.0]),
        goal=np.array([4.5, 4.5, 0.0, 0.0]),
        graph_n=300,
        sample_bounds=sample,
        gains=gains,
        w_max=w_max,
        seed_graph=seed,
        seed_disturbance=seed + 1,
        name="demo",
    )


def random_field_scenario(
    seed: int,
    n_obstacles: int = 20,
    graph_n: int = 300,
    side: float = 5.0,
    obstacle_size: tuple[float, float] = (0.25, 0.7),
) -> Scenario:
    """Seeded random obstacle field with start/goal in opposite corners.

    Obstacles keep clear of the start and goal neighborhoods so the
    scenario is well-posed; everything else is uniform."""
    from .sim import design_tube

    rng = np.random.default_rng(seed)
    spec = BezierSpec(m=2, gamma=2, T=1.0)
    xd, u, sample = _standard_sets(side=side)
    gains = (6.0, 5.0)
    w_max = 0.02
    tube = design_tube(spec, gains, w_max)
    start = np.array([0.4, 0.4, 0.0, 0.0])
    goal = np.array([side - 0.4, side - 0.4, 0.0, 0.0])
    obstacles: list[ObstacleTrack] = []
    while len(obstacles) < n_obstacles:
        c = rng.uniform(0.4, side - 0.4, 2)
        w = rng.uniform(*obstacle_size, 2)
        if np.linalg.norm(c - start[:2]) < 0.9 or np.linalg.norm(c - goal[:2]) < 0.9:
            continue
        obstacles.append(_box_obstacle(c[0], c[1], w[0], w[1]))
    return Scenario(
        spec=spec,
        xd=xd,
        u_bounds=u,
        tube=tube,
        obstacles=obstacles,
        start=start,
        goal=goal,
        graph_n=graph_n,
        sample_bounds=sample,
        gains=gains,
        w_max=w_max,
        seed_graph=seed,
        seed_disturbance=seed + 1,
        timeout=60.0,
        name=f"random-field-{seed}",
    )


def corner_scenario(seed: int) -> Scenario:
    """One box forcing a dog-leg between start and goal; used to exercise
    path-length refinement."""
    from .sim import design_tube

    rng = np.random.default_rng(seed)
    spec = BezierSpec(m=2, gamma=2, T=1.0)
    xd, u, sample = _standard_sets()
    gains = (6.0, 5.0)
    w_max = 0.02
    tube = design_tube(spec, gains, w_max)
    cx, cy = rng.uniform(2.0, 3.0, 2)
    w = rng.uniform(0.8, 1.6)
    return Scenario(
        spec=spec,
        xd=xd,
        u_bounds=u,
        tube=tube,
        obstacles=[_box_obstacle(cx, cy, w, w)],
        start=np.array([0.5, 0.5, 0.0, 0.0]),
        goal=np.array([4.5, 4.5, 0.0, 0.0]),
        graph_n=260,
        sample_bounds=sample,
        gains=gains,
        w_max=w_max,
        seed_graph=seed,
        seed_disturbance=seed + 1,
        name=f"corner-{seed}",
    )


def maze_scenario(
    cells_x: int = 30,
    cells_y: int = 20,
    cell: float = 0.5,
    seed: int = 3,
    v_max: float = 2.5,
    u_max: float = 15.0,
) -> tuple[Scenario, np.ndarray]:
    """A maze on cells_x * cells_y cells with merged wall obstacles.

    Returns the scenario plus the grid of cell-center vertices (zero
    velocity) meant for build_graph's `include` hook; grid vertices suit
    the structured scene better than uniform samples."""
    from .sim import design_tube

    rng = np.random.default_rng(seed)
    W, Hc = cells_x, cells_y
    # depth-first spanning tree: passages[cell] is a set of open neighbors
    passages: dict[tuple[int, int], set[tuple[int, int]]] = {}
    stack = [(0, 0)]
    seen = {(0, 0)}
    while stack:
        cur = stack[-1]
        nbrs = [
            (cur[0] + dx, cur[1] + dy)
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= cur[0] + dx < W and 0 <= cur[1] + dy < Hc and (cur[0] + dx, cur[1] + dy) not in seen
        ]
        if not nbrs:
            stack.pop()
            continue
        nxt = tuple(nbrs[rng.integers(len(nbrs))])
        passages.setdefault(cur, set()).add(nxt)
        passages.setdefault(nxt, set()).add(cur)
        seen.add(nxt)
        stack.append(nxt)
    # a few extra openings so the maze is not a strict tree
    for _ in range(W * Hc // 10):
        x = int(rng.integers(0, W - 1))
        y = int(rng.integers(0, Hc - 1))
        nxt = (x + 1, y) if rng.random() < 0.5 else (x, y + 1)
        passages.setdefault((x, y), set()).add(nxt)
        passages.setdefault(nxt, set()).add((x, y))

    wall_t = 0.12 * cell
    walls: list[tuple[float, float, float, float]] = []  # cx, cy, wx, wy

    def wall_between(a, b):
        ax, ay = a
        mx = (ax + b[0] + 1) / 2 * cell
        my = (ay + b[1] + 1) / 2 * cell
        if ax != b[0]:  # vertical wall
            return (max(ax, b[0]) * cell, (ay + 0.5) * cell, wall_t, cell + wall_t)
        return ((ax + 0.5) * cell, max(ay, b[1]) * cell, cell + wall_t, wall_t)

    for x in range(W):
        for y in range(Hc):
            for nxt in ((x + 1, y), (x, y + 1)):
                if nxt[0] >= W or nxt[1] >= Hc:
                    continue
                if nxt not in passages.get((x, y), set()):
                    walls.append(wall_between((x, y), nxt))

    # merge colinear wall runs to keep the obstacle count near the
    # hundreds rather than the thousands
    merged: list[tuple[float, float, float, float]] = []
    walls.sort()
    used = [False] * len(walls)
    for i, wll in enumerate(walls):
        if used[i]:
            continue
        cx, cy, wx, wy = wll
        if wy > wx:  # vertical run: merge along y
            run = [wll]
            used[i] = True
            nxt_cy = cy + cell
            for j in range(i + 1, len(walls)):
                ox, oy, owx, owy = walls[j]
                if not used[j] and owy > owx and abs(ox - cx) < 1e-9 and abs(oy - nxt_cy) < 1e-9:
                    run.append(walls[j])
                    used[j] = True
                    nxt_cy += cell
            y0 = run[0][1] - run[0][3] / 2
            y1 = run[-1][1] + run[-1][3] / 2
            merged.append((cx, (y0 + y1) / 2, wx, y1 - y0))
        else:
            merged.append(wll)
            used[i] = True

    side_x, side_y = W * cell, Hc * cell
    xd = Box(
        np.array([0.0, 0.0, -v_max, -v_max]), np.array([side_x, side_y, v_max, v_max])
    ).to_polytope()
    gains = (8.0, 6.0)
    w_max = 0.01
    spec = BezierSpec(m=2, gamma=2, T=1.0)
    tube = design_tube(spec, gains, w_max)
    obstacles = [_box_obstacle(*wll) for wll in merged]
    centers = np.array([[(x + 0.5) * cell, (y + 0.5) * cell] for x in range(W) for y in range(Hc)])
    grid_vertices = np.hstack([centers, np.zeros_like(centers)])
    start = np.array([0.5 * cell, 0.5 * cell, 0.0, 0.0])
    goal = np.array([(W - 0.5) * cell, (Hc - 0.5) * cell, 0.0, 0.0])
    scenario = Scenario(
        spec=spec,
        xd=xd,
        u_bounds=Box(np.array([-u_max, -u_max]), np.array([u_max, u_max])),
        tube=tube,
        obstacles=obstacles,
        start=start,
        goal=goal,
        graph_n=2,  # grid vertices come through `include`
        gains=gains,
        w_max=w_max,
        mpc_hz=10.0,
        cut_hz=10.0,
        sim_hz=100.0,
        timeout=240.0,
        name="maze",
    )
    return scenario, grid_vertices
