"""Kinodynamic planning on graphs of dynamically feasible Bezier curves.

The pipeline: sample a graph of endpoint states whose connecting Bezier
curves are certified dynamically feasible by a linear reachability oracle,
cut edges against convex polytopic obstacles (fast heuristic + QP
fallback), search the surviving graph with Dijkstra, and refine the path
with robust tube MPC.  A closed-loop simulator, a session server for live
replanning, and a CLI sit on top.
"""

from .geometry import Box, Hyperplane, Polytope
from .bezier import BezierSpec, BezierCurve, StateSpaceCurve
from .qpsolver import QpProblem, QpSolution, SolveConfig, SolveStatus, solve, solve_batch
from .reachability import ReachOracle, TrackingTube, build_oracle, check_edge, connect_curve
from .graph import (
    BezierGraph,
    CutMask,
    CutVerdict,
    build_graph,
    cut_graph,
    cut_heuristic,
    cut_qp,
    find_path,
)
from .mpc import MpcProblem, MpcSolution, MpcWeights, build_corridor, build_reference, discretize, solve_mpc, sqp_refine
from .scenario import Scenario, load_scenario, demo_scenario, random_field_scenario
from .sim import ClosedLoopTrace, design_tube, run_closed_loop, plan_once

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Hyperplane",
    "Polytope",
    "BezierSpec",
    "BezierCurve",
    "StateSpaceCurve",
    "QpProblem",
    "QpSolution",
    "SolveConfig",
    "SolveStatus",
    "solve",
    "solve_batch",
    "ReachOracle",
    "TrackingTube",
    "build_oracle",
    "check_edge",
    "connect_curve",
    "BezierGraph",
    "CutMask",
    "CutVerdict",
    "build_graph",
    "cut_graph",
    "cut_heuristic",
    "cut_qp",
    "find_path",
    "MpcProblem",
    "MpcSolution",
    "MpcWeights",
    "build_corridor",
    "build_reference",
    "discretize",
    "solve_mpc",
    "sqp_refine",
    "Scenario",
    "load_scenario",
    "demo_scenario",
    "random_field_scenario",
    "ClosedLoopTrace",
    "design_tube",
    "run_closed_loop",
    "plan_once",
    "__version__",
]
