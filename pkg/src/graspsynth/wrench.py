"""Wrench algebra: grasp maps, friction cones, target wrenches, force solves.

All wrenches are [force; torque] about the object frame origin, which is
assumed to coincide with the center of mass. Friction cones are handled as
inner K-facet pyramids so every force problem is a QP with linear
inequalities; the inscribed pyramid under-fills the quadratic cone by a
factor cos(pi/K) at the facet midlines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroMotion
from .geometry import MassProperties, OrientedPointCloud
from .qp import solve_qp
from .transforms import skew

DEFAULT_PYRAMID_FACETS = 8
FORCE_SOLVE_EPS = 1e-8
CLOSURE_RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    @staticmethod
    def from_vector(v) -> "Wrench":
        v = np.asarray(v, dtype=float)
        return Wrench(v[:3].copy(), v[3:].copy())

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def tangent_basis(axis: np.ndarray):
    """Deterministic orthonormal (u, v) spanning the plane normal to axis."""
    axis = np.asarray(axis, dtype=float)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(axis)))] = 1.0
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


@dataclass(frozen=True)
class FrictionCone:
    """Coulomb cone about the inward surface normal."""

    axis: np.ndarray
    mu: float

    def contains(self, f, tol: float = 1e-8) -> bool:
        f = np.asarray(f, dtype=float)
        normal = float(np.dot(f, self.axis))
        if normal < -tol:
            return False
        tangential = np.linalg.norm(f - normal * self.axis)
        return tangential <= self.mu * max(normal, 0.0) + tol

    def pyramid_rows(self, facets: int = DEFAULT_PYRAMID_FACETS):
        """(A, l, u) such that l <= A f <= u describes the inner pyramid.

        Edge rays lie on the cone boundary, so the pyramid is an inner
        approximation. mu == 0 degenerates to the axis ray, expressed as two
        tangential equality rows.
        """
        a = self.axis
        u_t, v_t = tangent_basis(a)
        if self.mu < 1e-12:
            A = np.vstack([u_t, v_t, a])
            lo = np.array([0.0, 0.0, 0.0])
            hi = np.array([0.0, 0.0, np.inf])
            return A, lo, hi
        angles = 2.0 * np.pi * np.arange(facets) / facets
        edges = a[None, :] + self.mu * (np.cos(angles)[:, None] * u_t + np.sin(angles)[:, None] * v_t)
        rows = [np.cross(edges[j], edges[(j + 1) % facets]) for j in range(facets)]
        A = np.vstack(rows + [a])
        lo = np.zeros(facets + 1)
        hi = np.full(facets + 1, np.inf)
        return A, lo, hi

    def sample(self, magnitude: float, tangential_ratio: float, angle: float) -> np.ndarray:
        """Force with the given normal magnitude and tangential ratio <= mu."""
        u_t, v_t = tangent_basis(self.axis)
        return magnitude * (self.axis + tangential_ratio * (np.cos(angle) * u_t + np.sin(angle) * v_t))

    def clip_to_pyramid(self, f, facets: int = DEFAULT_PYRAMID_FACETS) -> np.ndarray:
        """Shrink the tangential part of f until every pyramid row is satisfied.

        The normal component is clamped nonnegative first; used to restore
        feasibility after a force is transported between nearby cones.
        """
        f = np.asarray(f, dtype=float)
        normal = max(float(np.dot(f, self.axis)), 0.0)
        tangential = f - float(np.dot(f, self.axis)) * self.axis
        A, lo, _ = self.pyramid_rows(facets)
        base = A @ (normal * self.axis)
        tang = A @ tangential
        scale = 1.0
        for r in range(len(lo)):
            if tang[r] < -1e-15:
                scale = min(scale, (base[r] - lo[r]) / (-tang[r]))
        return normal * self.axis + max(scale, 0.0) * tangential


@dataclass(frozen=True)
class GraspMap:
    """Linear map from a fingertip force to the object wrench: f -> [f; p x f]."""

    matrix: np.ndarray  # 6x3
    contact_point: np.ndarray
    cone: FrictionCone

    def wrench_of(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)


def grasp_map(p, cloud: OrientedPointCloud, mu: float) -> GraspMap:
    """Grasp map at p; the cone axis is the inward normal at p's surface projection."""
    p = np.asarray(p, dtype=float)
    query = cloud.nearest_surface_point(p)
    G = np.vstack([np.eye(3), skew(p)])
    return GraspMap(G, p.copy(), FrictionCone(-query.outward_normal, mu))


@dataclass(frozen=True)
class ContactForceSet:
    forces: np.ndarray  # (m, 3)
    residual: np.ndarray  # task-space residual (6 for free objects)

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residual))


def target_wrench(dx, dtheta, mass_props: MassProperties, dt: float) -> Wrench:
    """Unit target wrench from a rigid motion over dt, by inverse dynamics.

    The raw wrench is (2/dt^2) [dx/M; I^-1 dtheta], assuming motion from
    rest under a constant wrench; normalization removes the dt dependence
    entirely.
    """
    dx = np.asarray(dx, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if np.allclose(dx, 0.0) and np.allclose(dtheta, 0.0):
        raise ZeroMotion("both translation and rotation are zero")
    scale = 2.0 / (dt * dt)
    raw = scale * np.concatenate([dx / mass_props.mass,
                                  np.linalg.solve(mass_props.inertia, dtheta)])
    return Wrench.from_vector(raw / np.linalg.norm(raw))


def stacked_grasp_matrix(maps) -> np.ndarray:
    return np.hstack([g.matrix for g in maps])


def _pyramid_blocks(maps, facets):
    """Block-diagonal pyramid constraint system over the stacked force vector."""
    m = len(maps)
    rows, lows, highs = [], [], []
    for i, g in enumerate(maps):
        A_i, lo_i, hi_i = g.cone.pyramid_rows(facets)
        block = np.zeros((A_i.shape[0], 3 * m))
        block[:, 3 * i:3 * i + 3] = A_i
        rows.append(block)
        lows.append(lo_i)
        highs.append(hi_i)
    return np.vstack(rows), np.concatenate(lows), np.concatenate(highs)


def optimal_contact_forces(maps, w, facets: int = DEFAULT_PYRAMID_FACETS,
                           task_matrix: np.ndarray | None = None) -> ContactForceSet:
    """Minimize || sum_i G_i f_i - w ||^2 subject to pyramid cone feasibility.

    task_matrix, when given, projects wrenches before the residual is taken
    (articulated objects); w must then live in the projected space.
    """
    if len(maps) < 1:
        raise ValueError("need at least one contact")
    w = w.vector if isinstance(w, Wrench) else np.asarray(w, dtype=float)
    G = stacked_grasp_matrix(maps)
    if task_matrix is not None:
        G = np.atleast_2d(task_matrix) @ G
    P = 2.0 * G.T @ G
    q = -2.0 * G.T @ w
    A, lo, hi = _pyramid_blocks(maps, facets)
    sol = solve_qp(P, q, A, lo, hi, eps=FORCE_SOLVE_EPS, x0=np.zeros(len(q)))
    forces = sol.x.reshape(-1, 3)
    return ContactForceSet(forces=forces, residual=G @ sol.x - w)


def is_force_closure(maps, facets: int = DEFAULT_PYRAMID_FACETS,
                     tol: float = CLOSURE_RESIDUAL_TOL) -> bool:
    """Twelve-wrench closure test: every signed basis wrench must be reachable.

    The achievable wrench set is a convex cone, so containing all of +-e_j
    implies a neighborhood of the origin and hence, by force scaling, the
    whole wrench space.
    """
    for j in range(6):
        for sign in (1.0, -1.0):
            target = np.zeros(6)
            target[j] = sign
            result = optimal_contact_forces(maps, target, facets)
            if result.residual_norm >= tol:
                return False
    return True


@dataclass(frozen=True)
class JointProjection:
    """Rows mapping an object wrench to articulated joint torques."""

    matrix: np.ndarray  # (d, 6)

    def project(self, w) -> np.ndarray:
        w = w.vector if isinstance(w, Wrench) else np.asarray(w, dtype=float)
        return self.matrix @ w

    @property
    def dof(self) -> int:
        return self.matrix.shape[0]


def joint_projection(axis, origin=(0.0, 0.0, 0.0), kind: str = "revolute") -> JointProjection:
    """Projection row for one joint: revolute [(o x a)^T, a^T], prismatic [a^T, 0]."""
    a = np.asarray(axis, dtype=float)
    o = np.asarray(origin, dtype=float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-9:
        raise ValueError("joint axis must be a unit vector")
    if kind == "revolute":
        row = np.concatenate([np.cross(o, a), a])
    elif kind == "prismatic":
        row = np.concatenate([a, np.zeros(3)])
    else:
        raise ValueError(f"unknown joint kind {kind!r}")
    return JointProjection(row[None, :])


def stack_projections(projections) -> JointProjection:
    return JointProjection(np.vstack([p.matrix for p in projections]))
