"""Convex polytope primitives: membership, projection, face hyperplanes,
support functions, and Minkowski-style inflation/erosion by boxes.

All sets are immutable after construction and every operation is pure, so
everything here is safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_GEO = 1e-9


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {x : lo <= x <= hi}."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _freeze(np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", _freeze(np.atleast_1d(self.hi)))
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("box bounds must be 1-d vectors of equal length")
        if np.any(self.lo > self.hi):
            raise ValueError("box requires lo <= hi componentwise")

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: np.ndarray, eps: float = EPS_GEO) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lo - eps) and np.all(x <= self.hi + eps))

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)

    def support(self, direction: np.ndarray) -> float:
        """max_{e in box} direction . e"""
        d = np.asarray(direction, dtype=np.float64)
        return float(np.sum(np.maximum(d * self.lo, d * self.hi)))

    def erode(self, margin: Box) -> Box:
        """Minkowski difference self (-) margin; exact for boxes.

        Raises if the result is empty.
        """
        lo = self.lo - margin.lo
        hi = self.hi - margin.hi
        if np.any(lo > hi):
            raise ValueError("box erosion is empty")
        return Box(lo, hi)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if size is None:
            return rng.uniform(self.lo, self.hi)
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def to_polytope(self) -> Polytope:
        d = self.dim
        eye = np.eye(d)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([self.hi, -self.lo]))

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> Box:
        return cls(np.asarray(data["lo"], float), np.asarray(data["hi"], float))


@dataclass(frozen=True)
class Hyperplane:
    """Oriented hyperplane {x : normal . x = offset} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.atleast_1d(np.asarray(self.normal, dtype=np.float64))
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise ValueError("hyperplane normal must be nonzero")
        object.__setattr__(self, "normal", _freeze(n / norm))
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def separation(self, x: np.ndarray) -> float:
        """Signed distance of x from the plane, positive on the normal side."""
        return float(self.normal @ np.asarray(x, dtype=np.float64) - self.offset)


@dataclass(frozen=True)
class Polytope:
    """Convex set {x : A x <= b} with at least one nonzero constraint row."""

    A: np.ndarray
    b: np.ndarray
    _row_norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.size or A.shape[0] < 1:
            raise ValueError("polytope requires A (n_c x d) and matching b (n_c)")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("every polytope row must be nonzero")
        object.__setattr__(self, "A", _freeze(A))
        object.__setattr__(self, "b", _freeze(b))
        object.__setattr__(self, "_row_norms", _freeze(norms))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]

    def normalized(self) -> Polytope:
        """Copy with unit row normals (offsets rescaled to match)."""
        return Polytope(self.A / self._row_norms[:, None], self.b / self._row_norms)

    def contains(self, x: np.ndarray, eps: float = EPS_GEO) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"point has dimension {x.shape}, polytope is {self.dim}-d")
        return bool(np.all(self.A @ x <= self.b + eps))

    def contains_many(self, pts: np.ndarray, eps: float = EPS_GEO) -> np.ndarray:
        """Vectorized membership for pts of shape (k, d)."""
        pts = np.asarray(pts, dtype=np.float64)
        return np.all(pts @ self.A.T <= self.b + eps, axis=1)

    def translate(self, offset: np.ndarray) -> Polytope:
        """The set self + offset."""
        offset = np.asarray(offset, dtype=np.float64)
        return Polytope(self.A, self.b + self.A @ offset)

    def as_box(self) -> Box | None:
        """Recover a Box if the rows are exactly the +/- identity pattern.

        Cached: polytopes are immutable."""
        cached = getattr(self, "_box_cache", "unset")
        if cached != "unset":
            return cached
        box = self._as_box()
        object.__setattr__(self, "_box_cache", box)
        return box

    def _as_box(self) -> Box | None:
        d = self.dim
        if self.num_rows != 2 * d:
            return None
        lo = np.full(d, np.nan)
        hi = np.full(d, np.nan)
        for i in range(self.num_rows):
            row = self.A[i] / self._row_norms[i]
            j = int(np.argmax(np.abs(row)))
            unit = np.zeros(d)
            unit[j] = np.sign(row[j])
            if not np.allclose(row, unit, atol=1e-12):
                return None
            if row[j] > 0:
                hi[j] = self.b[i] / self._row_norms[i]
            else:
                lo[j] = -self.b[i] / self._row_norms[i]
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            return None
        return Box(lo, hi)

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> Polytope:
        if "lo" in data:
            return Box.from_json(data).to_polytope()
        return cls(np.asarray(data["A"], float), np.asarray(data["b"], float))


def contains(P: Polytope, x: np.ndarray, eps: float = EPS_GEO) -> bool:
    """Membership test A x <= b + eps."""
    return P.contains(x, eps)


def closest_point(P: Polytope, x: np.ndarray, eps: float = EPS_GEO) -> np.ndarray:
    """Euclidean projection of x onto P (returns x itself when inside).

    Boxes take a closed-form clamp; general polytopes go through the
    embedded QP solver with a polish step for near-exact projections.
    """
    x = np.asarray(x, dtype=np.float64)
    if P.contains(x, eps):
        return x.copy()
    box = P.as_box()
    if box is not None:
        return box.clamp(x)

    # min ||y - x||^2  s.t.  A y <= b
    from . import qpsolver

    d = P.dim
    prob = qpsolver.QpProblem(
        P=2.0 * np.eye(d),
        q=-2.0 * x,
        A=P.A,
        l=np.full(P.num_rows, -np.inf),
        u=P.b.copy(),
    )
    cfg = qpsolver.SolveConfig(max_iter=20000, eps_abs=1e-10, eps_rel=1e-10, polish=True)
    sol = qpsolver.solve(prob, cfg)
    if sol.status == qpsolver.SolveStatus.INFEASIBLE:
        raise ValueError("cannot project onto an empty polytope")
    return sol.x


def adjacent_hyperplane(P: Polytope, x: np.ndarray, eps: float = EPS_GEO) -> Hyperplane:
    """Face hyperplane of P active at the projection of x, oriented outward.

    Among faces active at closestPoint(P, x) the one with the deepest
    separation normal.x - offset (unit normals) wins; ties break on the
    lowest row index.  Requires x outside the interior of P.
    """
    x = np.asarray(x, dtype=np.float64)
    slack = (P.b - P.A @ x) / P._row_norms
    if np.all(slack > eps):
        raise ValueError("adjacent_hyperplane requires a point outside the interior")
    y = closest_point(P, x, eps)
    residual = (P.b - P.A @ y) / P._row_norms
    active = residual <= 1e-7
    if not np.any(active):
        # projection landed strictly inside (solver noise); fall back to all rows
        active = np.ones(P.num_rows, dtype=bool)
    separation = np.where(active, -slack, -np.inf)
    idx = int(np.argmax(separation))  # argmax takes the first (lowest row) on ties
    return Hyperplane(P.A[idx], float(P.b[idx]))


def inflate(P: Polytope, E: Box) -> Polytope:
    """Outer approximation of the Minkowski sum P (+) E.

    Each offset grows by the support of E in the row direction; exact when
    P is a box.
    """
    if E.dim != P.dim:
        raise ValueError("dimension mismatch between polytope and box")
    grow = np.array([E.support(row) for row in P.A])
    return Polytope(P.A, P.b + grow)


def erode(P: Polytope, E: Box) -> Polytope:
    """Inner set {x : x + e in P for all e in E} (Minkowski difference)."""
    if E.dim != P.dim:
        raise ValueError("dimension mismatch between polytope and box")
    shrink = np.array([E.support(row) for row in P.A])
    return Polytope(P.A, P.b - shrink)


def chebyshev_center(P: Polytope) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed ball (LP).

    Radius < 0 means the polytope is empty.
    """
    from scipy.optimize import linprog

    n = P.dim
    # maximize r  s.t.  A c + ||A_i|| r <= b
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([P.A, P._row_norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=P.b, bounds=[(None, None)] * n + [(None, None)], method="highs")
    if not res.success:
        return np.zeros(n), -np.inf
    return res.x[:n], float(res.x[-1])


def bounding_box(P: Polytope) -> Box:
    """Axis-aligned bounding box via per-axis support LPs."""
    from scipy.optimize import linprog

    box = P.as_box()
    if box is not None:
        return box
    d = P.dim
    lo = np.zeros(d)
    hi = np.zeros(d)
    for j in range(d):
        c = np.zeros(d)
        c[j] = 1.0
        res = linprog(c, A_ub=P.A, b_ub=P.b, bounds=[(None, None)] * d, method="highs")
        if not res.success:
            raise ValueError("polytope is empty or unbounded along an axis")
        lo[j] = res.x[j]
        res = linprog(-c, A_ub=P.A, b_ub=P.b, bounds=[(None, None)] * d, method="highs")
        if not res.success:
            raise ValueError("polytope is empty or unbounded along an axis")
        hi[j] = res.x[j]
    return Box(lo, hi)
