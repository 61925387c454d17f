"""Bezier graph: sample vertices, connect oracle-feasible directed edges,
cut edges against convex obstacles, and search with Dijkstra.

The cut runs a three-branch screen per (edge, obstacle) pair: control
point inside the obstacle (unsafe), all control points beyond one face
hyperplane of the obstacle (safe), otherwise a small slack-minimizing QP
decides whether the control-point hull meets the obstacle.  The screen
only ever short-circuits the QP, never disagrees with it; the tolerances
are ordered to keep that true (point membership at 1e-9, QP safety
threshold at 1e-7, hyperplane margin at 1e-6).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import bezier, geometry, qpsolver
from .bezier import BezierSpec
from .geometry import EPS_GEO, Box, Polytope
from .reachability import ReachOracle, check_edges

_PAIR_CHUNK = 32


class CutVerdict(Enum):
    UNSAFE = "unsafe"
    SAFE = "safe"
    INDETERMINATE = "indeterminate"


class CutProvenance(Enum):
    HEURISTIC_UNSAFE = "heuristic_unsafe"
    HEURISTIC_SAFE = "heuristic_safe"
    QP_SAFE = "qp_safe"
    QP_UNSAFE = "qp_unsafe"


@dataclass
class CutConfig:
    eps_cut: float = 1e-7  # ||delta*|| above this certifies a free hull
    heur_margin: float = 1e-6  # strict hyperplane clearance for the safe branch
    eps_geo: float = EPS_GEO
    qp: qpsolver.SolveConfig = field(
        default_factory=lambda: qpsolver.SolveConfig(max_iter=500, eps_abs=1e-7, eps_rel=0.0, rho=1.0, polish=True)
    )


@dataclass(frozen=True)
class BezierGraph:
    """Fixed directed graph of oracle-feasible Bezier edges.

    Edge costs are the control-point path-length bound of the output
    curve; `edge_points` caches the output-space control points used by
    the obstacle cut.
    """

    spec: BezierSpec
    oracle: ReachOracle
    vertices: np.ndarray  # (V, n)
    edges: np.ndarray  # (E, 2) int64, directed (from, to)
    costs: np.ndarray  # (E,)
    edge_points: np.ndarray  # (E, m, p+1) output-space control points
    seed: int
    sample_bounds: Box

    def __post_init__(self):
        for name in ("vertices", "edges", "costs", "edge_points"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def to_json(self, max_edges: int | None = None) -> dict:
        edges = [
            [int(i), int(j), float(c)]
            for (i, j), c in zip(self.edges[:max_edges], self.costs[:max_edges])
        ]
        return {"vertices": self.vertices.tolist(), "edges": edges}


@dataclass
class CutMask:
    """Outcome of cutting one graph against one obstacle snapshot."""

    alive: np.ndarray  # (E,) bool
    provenance: np.ndarray  # (E,) CutProvenance
    pairs_total: int
    pairs_point_hit: int  # branch 1: a control point inside the obstacle
    pairs_hyperplane: int  # branch 2: separated by one face hyperplane
    pairs_qp: int  # branch 3: needed the QP
    qp_safe: int
    qp_unsafe: int

    @property
    def heuristic_fraction(self) -> float:
        """Fraction of (edge, obstacle) pairs resolved without a QP solve."""
        if self.pairs_total == 0:
            return 1.0
        return 1.0 - self.pairs_qp / self.pairs_total

    @property
    def alive_count(self) -> int:
        return int(self.alive.sum())

    def to_json(self) -> dict:
        counts: dict[str, int] = {}
        for p in self.provenance:
            counts[p.value] = counts.get(p.value, 0) + 1
        return {
            "alive_bitset": np.packbits(self.alive).tobytes().hex(),
            "num_edges": int(self.alive.size),
            "alive": self.alive_count,
            "provenance_counts": counts,
            "pairs_total": self.pairs_total,
            "heuristic_fraction": self.heuristic_fraction,
        }


def build_graph(
    N: int,
    spec: BezierSpec,
    oracle: ReachOracle,
    bounds: Box,
    seed: int,
    include: np.ndarray | None = None,
    k_nearest: int | None = None,
) -> BezierGraph:
    """Sample N states uniformly over the state box (rejecting any that
    leave the oracle's state set) and connect every oracle-feasible
    ordered pair.  Extra states in `include` (e.g. start and goal) are
    appended after the samples.  Fixed seed gives an identical graph.
    """
    if N < 2:
        raise ValueError("need at least two vertices")
    if bounds.dim != spec.n:
        raise ValueError(f"sampling bounds must be {spec.n}-dimensional")
    rng = np.random.default_rng(seed)
    samples: list[np.ndarray] = []
    needed = N
    while needed > 0:
        cand = bounds.sample(rng, needed)
        ok = oracle.Xd.contains_many(cand)
        accepted = cand[ok]
        if accepted.size:
            samples.append(accepted)
            needed -= accepted.shape[0]
    vertices = np.vstack(samples)[:N]
    if include is not None and len(include):
        vertices = np.vstack([vertices, np.atleast_2d(np.asarray(include, dtype=np.float64))])

    V = vertices.shape[0]
    allowed = None
    if k_nearest is not None:
        pos = vertices[:, : spec.m]
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        k = min(k_nearest, V - 1)
        nbr = np.argpartition(d2, k - 1, axis=1)[:, :k]
        allowed = np.zeros((V, V), dtype=bool)
        allowed[np.repeat(np.arange(V), k), nbr.ravel()] = True

    F1T = oracle.F1.T
    F2T = oracle.F2.T
    A1 = vertices @ F1T
    A2 = vertices @ F2T
    thresh = oracle.G + EPS_GEO
    src_list = []
    dst_list = []
    for lo in range(0, V, _PAIR_CHUNK):
        hi = min(lo + _PAIR_CHUNK, V)
        lhs = A1[lo:hi][:, None, :] + A2[None, :, :]  # (chunk, V, n_F)
        feas = np.all(lhs <= thresh, axis=2)
        idx = np.arange(lo, hi)
        feas[np.arange(hi - lo), idx] = False  # no self loops
        if allowed is not None:
            feas &= allowed[lo:hi]
        src, dst = np.nonzero(feas)
        src_list.append(src + lo)
        dst_list.append(dst)
    edges = np.stack([np.concatenate(src_list), np.concatenate(dst_list)], axis=1).astype(np.int64)

    D = bezier.boundary_matrix(spec)
    x1 = vertices[edges[:, 0]].reshape(-1, spec.gamma, spec.m)
    x2 = vertices[edges[:, 1]].reshape(-1, spec.gamma, spec.m)
    bv = np.concatenate([x1, x2], axis=1)  # (E, 2*gamma, m)
    points = np.einsum("pq,eqm->emp", D, bv)  # (E, m, p+1)
    costs = np.linalg.norm(np.diff(points, axis=2), axis=1).sum(axis=1)

    return BezierGraph(spec, oracle, vertices, edges, costs, points, seed, bounds)


def cut_heuristic(points: np.ndarray, obstacle: Polytope, cfg: CutConfig | None = None) -> CutVerdict:
    """Three-branch screen for one edge's output control points (m, p+1).

    Unsafe when a control point lies in the obstacle; safe when every
    control point clears the obstacle face adjacent to the control point
    closest to it; otherwise indeterminate (the QP must decide).
    """
    cfg = cfg or CutConfig()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    O = obstacle.normalized()
    inside = O.contains_many(pts.T, cfg.eps_geo)
    if np.any(inside):
        return CutVerdict.UNSAFE
    projections = [geometry.closest_point(O, p) for p in pts.T]
    dists = [np.linalg.norm(pr - p) for pr, p in zip(projections, pts.T)]
    anchor = int(np.argmin(dists))
    hp = geometry.adjacent_hyperplane(O, pts[:, anchor])
    if np.all(hp.normal @ pts - hp.offset > cfg.heur_margin):
        return CutVerdict.SAFE
    return CutVerdict.INDETERMINATE


def _heuristic_batch(points: np.ndarray, obstacle: Polytope, cfg: CutConfig) -> np.ndarray:
    """Vectorized screen over edges; returns int8 codes 0=unsafe, 1=safe,
    2=indeterminate.  Boxes take the closed-form path; other polytopes
    fall back to the per-edge reference implementation past branch 1."""
    E = points.shape[0]
    O = obstacle.normalized()
    codes = np.full(E, 2, dtype=np.int8)

    # branch 1: any control point inside the obstacle
    vals = np.einsum("cm,emj->ecj", O.A, points)  # (E, n_c, p+1)
    point_inside = np.all(vals <= O.b[None, :, None] + cfg.eps_geo, axis=1)  # (E, p+1)
    unsafe = np.any(point_inside, axis=1)
    codes[unsafe] = 0

    rest = np.nonzero(~unsafe)[0]
    if rest.size == 0:
        return codes

    box = O.as_box()
    if box is None:
        for e in rest:
            verdict = cut_heuristic(points[e], obstacle, cfg)
            codes[e] = {CutVerdict.UNSAFE: 0, CutVerdict.SAFE: 1, CutVerdict.INDETERMINATE: 2}[verdict]
        return codes

    pts = points[rest]  # (E', m, p+1)
    below = np.maximum(box.lo[None, :, None] - pts, 0.0)
    above = np.maximum(pts - box.hi[None, :, None], 0.0)
    d2 = ((below + above) ** 2).sum(axis=1)  # (E', p+1)
    anchor = np.argmin(d2, axis=1)
    v = np.take_along_axis(pts, anchor[:, None, None], axis=2)[:, :, 0]  # (E', m)
    proj = np.clip(v, box.lo, box.hi)
    # deepest separating face active at the projection, ties on row order
    sep = v @ O.A.T - O.b  # (E', n_c)
    active = np.abs(proj @ O.A.T - O.b) <= 1e-7
    masked = np.where(active, sep, -np.inf)
    face = np.argmax(masked, axis=1)
    h = O.A[face]  # (E', m)
    off = O.b[face]
    clear = np.einsum("em,emj->ej", h, pts) - off[:, None] > cfg.heur_margin
    codes[rest[np.all(clear, axis=1)]] = 1
    return codes


def _cut_qp_problem(points: np.ndarray, O: Polytope) -> qpsolver.QpProblem:
    m, J = points.shape
    C = O.num_rows
    nv = J + C
    P = np.zeros((nv, nv))
    P[J:, J:] = 2.0 * np.eye(C)
    q = np.zeros(nv)
    A = np.zeros((C + J + 1, nv))
    A[:C, :J] = O.A @ points
    A[:C, J:] = -np.eye(C)
    A[C : C + J, :J] = np.eye(J)
    A[C + J, :J] = 1.0
    l = np.concatenate([np.full(C, -np.inf), np.zeros(J), [1.0]])
    u = np.concatenate([O.b, np.full(J, np.inf), [1.0]])
    return qpsolver.QpProblem(P, q, A, l, u)


def cut_qp(points: np.ndarray, obstacle: Polytope, cfg: CutConfig | None = None) -> tuple[bool, float]:
    """Slack-minimizing hull/obstacle intersection test.

    Returns (safe, ||delta*||).  Safe means the convex hull of the control
    points provably misses the obstacle (||delta*|| above the threshold);
    anything else, including an unconverged solve, counts unsafe.
    """
    cfg = cfg or CutConfig()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    O = obstacle.normalized()
    sol = qpsolver.solve(_cut_qp_problem(pts, O), cfg.qp)
    delta = float(np.linalg.norm(sol.x[pts.shape[1] :]))
    if sol.status != qpsolver.SolveStatus.SOLVED:
        return False, delta
    return delta > cfg.eps_cut, delta


def cut_graph(graph: BezierGraph, obstacles: list[Polytope], cfg: CutConfig | None = None) -> CutMask:
    """Screen every (edge, obstacle) pair, batch the leftovers through the
    QP, and keep an edge alive only if it is safe for every obstacle."""
    cfg = cfg or CutConfig()
    E = graph.num_edges
    alive = np.ones(E, dtype=bool)
    prov = np.full(E, CutProvenance.HEURISTIC_SAFE, dtype=object)
    needed_qp = np.zeros(E, dtype=bool)
    stats = {"point_hit": 0, "hyper": 0, "qp": 0, "qp_safe": 0, "qp_unsafe": 0}

    for obstacle in obstacles:
        codes = _heuristic_batch(graph.edge_points, obstacle, cfg)
        stats["point_hit"] += int((codes == 0).sum())
        stats["hyper"] += int((codes == 1).sum())
        newly_cut = (codes == 0) & alive
        prov[newly_cut] = CutProvenance.HEURISTIC_UNSAFE
        alive &= codes != 0

        pending = np.nonzero(codes == 2)[0]
        stats["qp"] += pending.size
        if pending.size:
            O = obstacle.normalized()
            probs = [_cut_qp_problem(graph.edge_points[e], O) for e in pending]
            sols = qpsolver.solve_batch(probs, cfg.qp)
            J = graph.spec.p + 1
            for e, sol in zip(pending, sols):
                delta = float(np.linalg.norm(sol.x[J:]))
                safe = sol.status == qpsolver.SolveStatus.SOLVED and delta > cfg.eps_cut
                if safe:
                    stats["qp_safe"] += 1
                    needed_qp[e] = True
                else:
                    stats["qp_unsafe"] += 1
                    if alive[e]:
                        prov[e] = CutProvenance.QP_UNSAFE
                        alive[e] = False

    survivors_via_qp = alive & needed_qp
    prov[survivors_via_qp] = CutProvenance.QP_SAFE
    return CutMask(
        alive=alive,
        provenance=prov,
        pairs_total=E * len(obstacles),
        pairs_point_hit=stats["point_hit"],
        pairs_hyperplane=stats["hyper"],
        pairs_qp=stats["qp"],
        qp_safe=stats["qp_safe"],
        qp_unsafe=stats["qp_unsafe"],
    )


def find_path(
    graph: BezierGraph,
    mask: CutMask,
    start: np.ndarray,
    goal: np.ndarray,
    position_only_snap: bool = False,
    require_tube_snap: bool = True,
) -> list[int] | None:
    """Dijkstra over alive edges between snapped start and goal vertices.

    The start snaps to the nearest vertex whose tube neighborhood contains
    the start state (Euclidean norm over the full reduced state unless
    position_only_snap); with require_tube_snap=False the tube condition
    is dropped, which mid-run replanning uses.  Returns vertex indices or
    None when no snappable start exists or the graph is disconnected.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    V = graph.num_vertices
    m = graph.spec.m

    gdiff = graph.vertices - goal
    gnorm = np.linalg.norm(gdiff[:, :m] if position_only_snap else gdiff, axis=1)
    vg = int(np.argmin(gnorm))

    diff = graph.vertices - start
    norms = np.linalg.norm(diff[:, :m] if position_only_snap else diff, axis=1)
    tube = graph.oracle.tube.error
    in_tube = np.all((diff >= -tube.hi - EPS_GEO) & (diff <= -tube.lo + EPS_GEO), axis=1)
    # diff = v - start; Problem-2 snapping wants start - v inside the tube box
    if require_tube_snap:
        if not np.any(in_tube):
            return None
        cand = np.where(in_tube, norms, np.inf)
    else:
        # relaxed mid-run snap: nearest vertex that can still reach the goal
        reaches = _reaches_goal(graph, mask, vg)
        if not np.any(reaches):
            return None
        cand = np.where(reaches, norms, np.inf)
    v0 = int(np.argmin(cand))

    if v0 == vg:
        return [v0]

    order = np.argsort(graph.edges[:, 0], kind="stable")
    alive_sorted = mask.alive[order]
    es = graph.edges[order]
    cs = graph.costs[order]
    starts = np.searchsorted(es[:, 0], np.arange(V + 1))

    dist = np.full(V, np.inf)
    parent = np.full(V, -1, dtype=np.int64)
    dist[v0] = 0.0
    heap: list[tuple[float, int]] = [(0.0, v0)]
    visited = np.zeros(V, dtype=bool)
    while heap:
        d, node = heapq.heappop(heap)
        if visited[node]:
            continue
        visited[node] = True
        if node == vg:
            break
        for k in range(starts[node], starts[node + 1]):
            if not alive_sorted[k]:
                continue
            nxt = int(es[k, 1])
            nd = d + cs[k]
            if nd < dist[nxt]:
                dist[nxt] = nd
                parent[nxt] = node
                heapq.heappush(heap, (nd, nxt))
    if not np.isfinite(dist[vg]):
        return None
    path = [vg]
    while path[-1] != v0:
        path.append(int(parent[path[-1]]))
    return path[::-1]


def _reaches_goal(graph: BezierGraph, mask: CutMask, vg: int) -> np.ndarray:
    """Vertices with an alive directed route to vg (reverse BFS)."""
    V = graph.num_vertices
    alive_edges = graph.edges[mask.alive]
    order = np.argsort(alive_edges[:, 1], kind="stable")
    es = alive_edges[order]
    starts = np.searchsorted(es[:, 1], np.arange(V + 1))
    seen = np.zeros(V, dtype=bool)
    seen[vg] = True
    stack = [vg]
    while stack:
        node = stack.pop()
        for k in range(starts[node], starts[node + 1]):
            src = int(es[k, 0])
            if not seen[src]:
                seen[src] = True
                stack.append(src)
    return seen


def path_cost(graph: BezierGraph, path: list[int]) -> float:
    """Total edge cost along a vertex path (0 for a singleton)."""
    if len(path) < 2:
        return 0.0
    lookup = {(int(i), int(j)): c for (i, j), c in zip(graph.edges, graph.costs)}
    return float(sum(lookup[(a, b)] for a, b in zip(path, path[1:])))
