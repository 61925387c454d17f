"""Matplotlib scene rendering for the CLI report path.

Figures follow the pipeline's visual language: gray obstacles, light
alive edges, cyan graph path, blue refined curve, red closed-loop trace.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import bezier
from .graph import BezierGraph, CutMask
from .mpc import MpcSolution, Reference
from .scenario import Scenario
from .sim import ClosedLoopTrace

plt.rcParams.update({"figure.dpi": 110, "font.size": 9, "axes.grid": True, "grid.alpha": 0.25})

EDGE_SAMPLE_LIMIT = 4000


def _draw_obstacles(ax, scenario: Scenario, t: float = 0.0):
    for ob in scenario.obstacles_at(t):
        box = ob.as_box()
        if box is not None:
            ax.add_patch(
                plt.Rectangle(box.lo, *(box.hi - box.lo), facecolor="0.45", edgecolor="0.2", zorder=3)
            )
        else:
            pts = _polygon_vertices(ob)
            if pts is not None:
                ax.add_patch(plt.Polygon(pts, facecolor="0.45", edgecolor="0.2", zorder=3))


def _polygon_vertices(ob) -> np.ndarray | None:
    # 2-d H-polytope corners via pairwise row intersections
    if ob.dim != 2:
        return None
    A, b = ob.A, ob.b
    pts = []
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            M = np.stack([A[i], A[j]])
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            v = np.linalg.solve(M, np.array([b[i], b[j]]))
            if np.all(A @ v <= b + 1e-9):
                pts.append(v)
    if len(pts) < 3:
        return None
    pts = np.array(pts)
    c = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
    return pts[order]


def _draw_edges(ax, graph: BezierGraph, mask: CutMask | None, rng_seed: int = 0):
    alive = mask.alive if mask is not None else np.ones(graph.num_edges, dtype=bool)
    idx = np.nonzero(alive)[0]
    if idx.size > EDGE_SAMPLE_LIMIT:
        rng = np.random.default_rng(rng_seed)
        idx = rng.choice(idx, EDGE_SAMPLE_LIMIT, replace=False)
    segs = graph.edge_points[idx]  # (k, m, p+1)
    for s in segs:
        ax.plot(s[0], s[1], color="tab:green", lw=0.3, alpha=0.25, zorder=1)


def _draw_path(ax, graph: BezierGraph, path: list[int]):
    vs = graph.vertices[path]
    for a, b in zip(vs[:-1], vs[1:]):
        curve = bezier.connect(graph.spec, a, b)
        ts = np.linspace(0, graph.spec.T, 30)
        xy = curve.eval_many(ts)
        ax.plot(xy[:, 0], xy[:, 1], color="cyan", lw=2.0, zorder=4)
    ax.plot(vs[:, 0], vs[:, 1], "o", color="tab:blue", ms=3, zorder=5)


def _draw_solution(ax, solution: MpcSolution):
    for c in solution.curves:
        ts = np.linspace(0, c.spec.T, 8)
        xy = c.eval_many(ts)
        ax.plot(xy[:, 0], xy[:, 1], color="tab:blue", lw=2.2, zorder=6)


def scene_figure(
    scenario: Scenario,
    graph: BezierGraph | None = None,
    mask: CutMask | None = None,
    path: list[int] | None = None,
    reference: Reference | None = None,
    solution: MpcSolution | None = None,
    trace: ClosedLoopTrace | None = None,
    show_edges: bool = True,
    title: str | None = None,
):
    fig, ax = plt.subplots(figsize=(7, 7))
    scene = scenario.scene_box()
    ax.set_xlim(scene.lo[0] - 0.2, scene.hi[0] + 0.2)
    ax.set_ylim(scene.lo[1] - 0.2, scene.hi[1] + 0.2)
    ax.set_aspect("equal")
    _draw_obstacles(ax, scenario)
    if graph is not None and show_edges:
        _draw_edges(ax, graph, mask)
    if graph is not None and path:
        _draw_path(ax, graph, path)
    if solution is not None:
        _draw_solution(ax, solution)
    if trace is not None and trace.states.size:
        ax.plot(trace.states[:, 0], trace.states[:, 1], color="tab:red", lw=1.5, zorder=7)
    ax.plot(*scenario.start[:2], "s", color="k", ms=8, zorder=8)
    ax.plot(*scenario.goal[:2], "*", color="gold", mec="k", ms=14, zorder=8)
    ax.set_title(title or scenario.name)
    fig.tight_layout()
    return fig


def bench_figure(rows: list[dict]):
    """Bar chart of cut timing rows [{label, cut_ms, heuristic_fraction}]."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r["label"] for r in rows]
    times = [r["cut_ms"] for r in rows]
    ax.bar(labels, times, color="tab:blue")
    for i, r in enumerate(rows):
        ax.text(i, times[i], f"{r['heuristic_fraction']*100:.1f}% heur", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("full cut wall time [ms]")
    ax.set_title("graph cut timing")
    fig.tight_layout()
    return fig


def trace_figure(trace: ClosedLoopTrace, scenario: Scenario):
    """Time series: speed, inputs, and goal distance."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    t = trace.times
    m = scenario.spec.m
    speed = np.linalg.norm(trace.states[:, m : 2 * m], axis=1)
    axes[0].plot(t, speed, lw=1)
    axes[0].set_ylabel("speed")
    if trace.inputs.size:
        axes[1].plot(t[1:], trace.inputs, lw=1)
    axes[1].set_ylabel("input")
    dist = np.linalg.norm(trace.states[:, :m] - scenario.goal[:m], axis=1)
    axes[2].plot(t, dist, lw=1)
    axes[2].set_ylabel("goal distance")
    axes[2].set_xlabel("t [s]")
    fig.tight_layout()
    return fig
