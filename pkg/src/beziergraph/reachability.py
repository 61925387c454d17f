"""Reachability oracle over endpoint pairs.

Builds matrices (F, G) such that F [x1; x2] <= G certifies a
dynamically feasible minimal-degree Bezier curve from x1 to x2 whose
tracked closed loop respects the state set and input bounds: every lifted
control point must sit in the state set eroded by the tracking tube, and
every input-curve control point in the input box eroded by the feedback
margin.  Both conditions are linear in the endpoints through the
boundary-value map, so a pairwise feasibility query is one matrix-vector
sweep and batches trivially.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import bezier, geometry
from .bezier import BezierSpec, StateSpaceCurve
from .geometry import EPS_GEO, Box, Polytope


@dataclass(frozen=True)
class TrackingTube:
    """Worst-case tracking error box and the input budget the feedback
    controller may consume while holding the error inside it."""

    error: Box
    input_margin: Box

    def __post_init__(self):
        zero_e = np.zeros(self.error.dim)
        zero_u = np.zeros(self.input_margin.dim)
        if not (self.error.contains(zero_e) and self.input_margin.contains(zero_u)):
            raise ValueError("tube boxes must contain the origin")

    def position_box(self, m: int) -> Box:
        """Output-space block of the error box (first m components)."""
        return Box(self.error.lo[:m], self.error.hi[:m])

    def to_json(self) -> dict:
        return {"error": self.error.to_json(), "input_margin": self.input_margin.to_json()}

    @classmethod
    def from_json(cls, data: dict) -> TrackingTube:
        return cls(Box.from_json(data["error"]), Box.from_json(data["input_margin"]))


@dataclass(frozen=True)
class ReachOracle:
    F: np.ndarray  # (n_F, 2n)
    G: np.ndarray  # (n_F,)
    spec: BezierSpec
    Xd: Polytope
    U: Box
    tube: TrackingTube

    @property
    def F1(self) -> np.ndarray:
        return self.F[:, : self.spec.n]

    @property
    def F2(self) -> np.ndarray:
        return self.F[:, self.spec.n :]


@lru_cache(maxsize=64)
def _endpoint_maps(spec: BezierSpec) -> tuple[np.ndarray, ...]:
    """W_j mapping [x1; x2] to the j-th lifted control-point column.

    Column j of the lifted matrix is sum_r w_r * (block r of the stacked
    boundary states), with w = D' H^k[:, j] per derivative block k.
    """
    D = bezier.boundary_matrix(spec)
    H = bezier.derivative_matrix(spec)
    n, m, gamma, p = spec.n, spec.m, spec.gamma, spec.p
    Hk = np.eye(p + 1)
    weights = []  # weights[k][:, j] = D' H^k[:, j]
    for _ in range(gamma + 1):
        weights.append(D.T @ Hk)
        Hk = Hk @ H
    maps = []
    for j in range(p + 1):
        W = np.zeros((m * (gamma + 1), 2 * n))
        for k in range(gamma + 1):
            w = weights[k][:, j]  # (2*gamma,)
            for r in range(gamma):
                W[k * m : (k + 1) * m, r * m : (r + 1) * m] = w[r] * np.eye(m)
                W[k * m : (k + 1) * m, n + r * m : n + (r + 1) * m] = w[gamma + r] * np.eye(m)
        W.setflags(write=False)
        maps.append(W)
    return tuple(maps)


def build_oracle(spec: BezierSpec, Xd: Polytope, U: Box, tube: TrackingTube) -> ReachOracle:
    """Assemble (F, G) from the state set, input box, and tracking tube."""
    if Xd.dim != spec.n:
        raise ValueError(f"state set must live in R^{spec.n}")
    if U.dim != spec.m or tube.input_margin.dim != spec.m or tube.error.dim != spec.n:
        raise ValueError("input box and tube dimensions must match the curve spec")

    Xd_eroded = geometry.erode(Xd, tube.error)
    _, radius = geometry.chebyshev_center(Xd_eroded)
    if radius <= 0:
        raise ValueError("state set is empty after erosion by the tracking tube")
    U_eroded = U.erode(tube.input_margin)  # raises when empty

    maps = _endpoint_maps(spec)
    n = spec.n
    rows_F = []
    rows_G = []
    for j in range(spec.p + 1):
        W_state = maps[j][:n]  # lifted column j as a function of [x1; x2]
        W_input = maps[j][n : n + spec.m]  # input-curve column j
        rows_F.append(Xd_eroded.A @ W_state)
        rows_G.append(Xd_eroded.b)
        rows_F.append(W_input)
        rows_G.append(U_eroded.hi)
        rows_F.append(-W_input)
        rows_G.append(-U_eroded.lo)
    F = np.vstack(rows_F)
    G = np.concatenate(rows_G)
    F.setflags(write=False)
    G.setflags(write=False)
    return ReachOracle(F, G, spec, Xd, U, tube)


def check_edge(oracle: ReachOracle, x1: np.ndarray, x2: np.ndarray, eps: float = EPS_GEO) -> bool:
    """True iff F [x1; x2] <= G + eps."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != (oracle.spec.n,) or x2.shape != (oracle.spec.n,):
        raise ValueError(f"endpoints must have dimension {oracle.spec.n}")
    return bool(np.all(oracle.F @ np.concatenate([x1, x2]) <= oracle.G + eps))


def check_edges(oracle: ReachOracle, X1: np.ndarray, X2: np.ndarray, eps: float = EPS_GEO) -> np.ndarray:
    """Vectorized check for stacked endpoint pairs (k, n) each."""
    lhs = X1 @ oracle.F1.T + X2 @ oracle.F2.T
    return np.all(lhs <= oracle.G + eps, axis=1)


def connect_curve(oracle: ReachOracle, x1: np.ndarray, x2: np.ndarray) -> StateSpaceCurve:
    """The unique minimal-degree curve realizing a feasible edge."""
    if not check_edge(oracle, x1, x2):
        raise ValueError("endpoint pair is not certified feasible by the oracle")
    curve = bezier.connect(oracle.spec, np.asarray(x1, float), np.asarray(x2, float))
    if __debug__:
        Xe = geometry.erode(oracle.Xd, oracle.tube.error)
        assert all(Xe.contains(col, 1e-7) for col in curve.P.T)
    return curve
