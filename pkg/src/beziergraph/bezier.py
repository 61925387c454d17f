"""Bernstein/Bezier algebra.

Everything runs at a fixed polynomial degree p: the derivative operator H
maps control points of a curve to control points of its derivative in the
SAME degree-p basis (finite difference to degree p-1, then degree
elevation back to p).  That convention keeps the state-space lift
[b; b'; ...; b^(gamma-1)] expressible as one control-point matrix against
one basis vector, and makes the unique boundary-value curve of degree
2*gamma - 1 a single linear map of the endpoint states.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .geometry import _freeze


@dataclass(frozen=True)
class BezierSpec:
    """Curve family: m output dims, integrator chain length gamma, degree
    p (defaults to the minimal boundary-value degree 2*gamma - 1), and
    segment duration T in seconds."""

    m: int
    gamma: int
    T: float
    p: int = -1

    def __post_init__(self):
        if self.p < 0:
            object.__setattr__(self, "p", 2 * self.gamma - 1)
        if self.gamma < 1 or self.p < self.gamma:
            raise ValueError("require p >= gamma >= 1")
        if self.T <= 0:
            raise ValueError("segment duration must be positive")

    @property
    def n(self) -> int:
        """Reduced state dimension m * gamma."""
        return self.m * self.gamma

    def with_duration(self, T: float) -> BezierSpec:
        return replace(self, T=T)


@dataclass(frozen=True)
class BezierCurve:
    """Output-space curve b(t) = points @ z(t) for t in [0, T]."""

    spec: BezierSpec
    points: np.ndarray  # (m, p+1)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.shape != (self.spec.m, self.spec.p + 1):
            raise ValueError(f"control points must be (m, p+1) = ({self.spec.m}, {self.spec.p + 1})")
        object.__setattr__(self, "points", _freeze(pts))

    def eval(self, t: float) -> np.ndarray:
        return de_casteljau(self.points, t / self.spec.T)

    def eval_many(self, ts: np.ndarray) -> np.ndarray:
        """Evaluate at many times; returns (len(ts), m)."""
        s = np.asarray(ts, dtype=np.float64) / self.spec.T
        return de_casteljau_many(self.points, s)

    def to_json(self) -> dict:
        return {
            "spec": {"m": self.spec.m, "gamma": self.spec.gamma, "p": self.spec.p, "T": self.spec.T},
            "points": self.points.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> BezierCurve:
        s = data["spec"]
        return cls(BezierSpec(s["m"], s["gamma"], s["T"], s.get("p", -1)), np.asarray(data["points"], float))


@dataclass(frozen=True)
class StateSpaceCurve:
    """Lifted curve x_d(t) = P @ z(t) stacking b, b', ..., b^(gamma-1)."""

    spec: BezierSpec
    P: np.ndarray  # (n, p+1)

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
        if P.shape != (self.spec.n, self.spec.p + 1):
            raise ValueError(f"lifted points must be (n, p+1) = ({self.spec.n}, {self.spec.p + 1})")
        object.__setattr__(self, "P", _freeze(P))

    @property
    def output_points(self) -> np.ndarray:
        return self.P[: self.spec.m]

    @property
    def output_curve(self) -> BezierCurve:
        return BezierCurve(self.spec, self.output_points)

    def eval(self, t: float) -> np.ndarray:
        return de_casteljau(self.P, t / self.spec.T)

    def eval_many(self, ts: np.ndarray) -> np.ndarray:
        s = np.asarray(ts, dtype=np.float64) / self.spec.T
        return de_casteljau_many(self.P, s)

    def input_points(self) -> np.ndarray:
        """Control points of the input curve u_d = b^(gamma), degree-p basis."""
        H = derivative_matrix(self.spec)
        return self.output_points @ np.linalg.matrix_power(H, self.spec.gamma)

    def input_eval(self, t: float) -> np.ndarray:
        return de_casteljau(self.input_points(), t / self.spec.T)

    def start_state(self) -> np.ndarray:
        return self.P[:, 0].copy()

    def end_state(self) -> np.ndarray:
        return self.P[:, -1].copy()


def bernstein_basis(spec: BezierSpec, t: float) -> np.ndarray:
    """Degree-p Bernstein weights z(t); nonnegative, summing to one.

    Built by the stable de Casteljau recurrence on s = t/T.
    """
    if t < -1e-12 or t > spec.T + 1e-12:
        raise ValueError(f"t={t} outside segment [0, {spec.T}]")
    s = min(max(t / spec.T, 0.0), 1.0)
    z = np.zeros(spec.p + 1)
    z[0] = 1.0
    for k in range(1, spec.p + 1):
        z[1 : k + 1] = (1.0 - s) * z[1 : k + 1] + s * z[:k]
        z[0] *= 1.0 - s
    return z


def de_casteljau(points: np.ndarray, s: float) -> np.ndarray:
    """Evaluate a curve with control points (rows x p+1) at s in [0,1]."""
    work = np.asarray(points, dtype=np.float64).copy()
    p = work.shape[1] - 1
    for k in range(p):
        work[:, : p - k] = (1.0 - s) * work[:, : p - k] + s * work[:, 1 : p - k + 1]
    return work[:, 0].copy()


def de_casteljau_many(points: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorized evaluation; returns (len(s), rows)."""
    s = np.asarray(s, dtype=np.float64)[:, None, None]  # (k, 1, 1)
    work = np.broadcast_to(np.asarray(points, float), (s.shape[0],) + points.shape).copy()
    p = points.shape[1] - 1
    for k in range(p):
        work[:, :, : p - k] = (1.0 - s) * work[:, :, : p - k] + s * work[:, :, 1 : p - k + 1]
    return work[:, :, 0].copy()


@lru_cache(maxsize=256)
def _derivative_matrix(p: int, T: float) -> np.ndarray:
    # difference to degree p-1 with the p/T factor ...
    diff = np.zeros((p + 1, p))
    for j in range(p):
        diff[j, j] = -p / T
        diff[j + 1, j] = p / T
    # ... then elevate back to degree p
    elev = np.zeros((p, p + 1))
    for k in range(p + 1):
        if k >= 1:
            elev[k - 1, k] += k / p
        if k <= p - 1:
            elev[k, k] += (p - k) / p
    H = diff @ elev
    H.setflags(write=False)
    return H


def derivative_matrix(spec: BezierSpec) -> np.ndarray:
    """Matrix H with d/dt (points @ z(t)) = (points @ H) @ z(t)."""
    return _derivative_matrix(spec.p, spec.T)


@lru_cache(maxsize=256)
def _boundary_matrix(p: int, gamma: int, T: float) -> np.ndarray:
    H = _derivative_matrix(p, T)
    # row r of M: the linear functional on control points giving the r-th
    # boundary value (derivatives 0..gamma-1 at t=0, then at t=T)
    M = np.zeros((2 * gamma, p + 1))
    Hk = np.eye(p + 1)
    for k in range(gamma):
        M[k] = Hk[:, 0]
        M[gamma + k] = Hk[:, p]
        Hk = Hk @ H
    D = np.linalg.inv(M)
    D.setflags(write=False)
    return D


def boundary_matrix(spec: BezierSpec) -> np.ndarray:
    """Unique map D from per-dimension boundary values to control points.

    For each output dimension with boundary vector
    (b(0), b'(0), ..., b^(gamma-1)(0), b(T), ..., b^(gamma-1)(T)) the
    control points are D @ boundary.  Requires the minimal degree
    p = 2*gamma - 1.
    """
    if spec.p != 2 * spec.gamma - 1:
        raise ValueError("boundary-value curves require p = 2*gamma - 1")
    return _boundary_matrix(spec.p, spec.gamma, spec.T)


def boundary_points(spec: BezierSpec, x0: np.ndarray, xT: np.ndarray) -> np.ndarray:
    """Output control points (m, p+1) of the curve joining lifted states
    x0 and xT (each of dimension n = m*gamma, blocks b, b', ...)."""
    x0 = np.asarray(x0, dtype=np.float64)
    xT = np.asarray(xT, dtype=np.float64)
    if x0.shape != (spec.n,) or xT.shape != (spec.n,):
        raise ValueError(f"boundary states must have dimension n = {spec.n}")
    D = boundary_matrix(spec)
    bv = np.vstack([x0.reshape(spec.gamma, spec.m), xT.reshape(spec.gamma, spec.m)])  # (2*gamma, m)
    return (D @ bv).T


def connect(spec: BezierSpec, x0: np.ndarray, xT: np.ndarray) -> StateSpaceCurve:
    """The unique minimal-degree lifted curve from x0 to xT."""
    return lift(BezierCurve(spec, boundary_points(spec, x0, xT)))


def lift(curve: BezierCurve) -> StateSpaceCurve:
    """Stack control points of b, b', ..., b^(gamma-1)."""
    H = derivative_matrix(curve.spec)
    blocks = [curve.points]
    for _ in range(curve.spec.gamma - 1):
        blocks.append(blocks[-1] @ H)
    return StateSpaceCurve(curve.spec, np.vstack(blocks))


def subdivide(curve: BezierCurve, times: list[float]) -> list[BezierCurve]:
    """Split at the given strictly increasing instants in (0, T).

    Each piece is a curve over its own duration; chaining the pieces
    reproduces the original (de Casteljau split).
    """
    T = curve.spec.T
    ts = list(times)
    if any(t <= 0 or t >= T for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("split times must be strictly increasing within (0, T)")
    if not ts:
        return [curve]
    pieces = []
    work = np.asarray(curve.points, dtype=np.float64).copy()
    t_prev = 0.0
    remaining_T = T
    for t in ts:
        s = (t - t_prev) / remaining_T
        left, work = _split(work, s)
        pieces.append(BezierCurve(curve.spec.with_duration(t - t_prev), left))
        remaining_T = T - t
        t_prev = t
    pieces.append(BezierCurve(curve.spec.with_duration(remaining_T), work))
    return pieces


def _split(points: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    p = points.shape[1] - 1
    work = points.copy()
    left = np.empty_like(points)
    right = np.empty_like(points)
    left[:, 0] = work[:, 0]
    right[:, p] = work[:, p]
    for k in range(p):
        work[:, : p - k] = (1.0 - s) * work[:, : p - k] + s * work[:, 1 : p - k + 1]
        left[:, k + 1] = work[:, 0]
        right[:, p - k - 1] = work[:, p - k - 1]
    return left, right


def path_length_bound(points: np.ndarray) -> float:
    """Sum of consecutive control-point distances; upper-bounds arc length."""
    pts = np.atleast_2d(points)
    return float(np.linalg.norm(np.diff(pts, axis=1), axis=0).sum())


def arc_length(curve: BezierCurve, nodes: int = 64) -> float:
    """Gauss-Legendre quadrature of ||b'(t)||; the independent oracle for
    the control-point path-length bound."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    T = curve.spec.T
    ts = 0.5 * T * (x + 1.0)
    H = derivative_matrix(curve.spec)
    dpts = curve.points @ H
    speeds = np.linalg.norm(de_casteljau_many(dpts, ts / T), axis=1)
    return float(0.5 * T * np.dot(w, speeds))
