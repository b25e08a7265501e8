"""Oriented point clouds, surface queries, and the first-order signed distance field.

The cloud stores outward unit normals. The signed distance at a query x is
phi(x) = n . (x - p) with p the nearest surface sample and n its outward
normal; the gradient is that normal, piecewise constant between
nearest-neighbor cells. This is first-order valid near the surface only and
degrades deep inside the object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import DegenerateGeometry, ParseError

DEFAULT_DENSITY = 500.0  # kg/m^3, used when a caller gives no density


@dataclass(frozen=True)
class SurfaceQuery:
    """Nearest surface sample for a query point."""

    nearest_point: np.ndarray
    outward_normal: np.ndarray
    signed_distance: float
    index: int


@dataclass(frozen=True)
class MassProperties:
    mass: float
    inertia: np.ndarray  # 3x3, about the center of mass
    center_of_mass: np.ndarray


class OrientedPointCloud:
    """Surface samples with outward unit normals and an exact nearest-neighbor index."""

    def __init__(self, points: np.ndarray, normals: np.ndarray):
        points = np.ascontiguousarray(points, dtype=float)
        normals = np.ascontiguousarray(normals, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {points.shape}")
        if normals.shape != points.shape:
            raise ValueError("normals must match points shape")
        if len(points) < 4:
            raise ValueError("cloud needs at least 4 points")
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            raise ValueError("normals must be unit length within 1e-6")
        self.points = points
        self.normals = normals
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    # -- spatial queries -----------------------------------------------

    def nearest_index(self, x) -> int:
        _, idx = self._tree.query(np.asarray(x, dtype=float))
        return int(idx)

    def nearest_indices(self, xs: np.ndarray) -> np.ndarray:
        _, idx = self._tree.query(np.asarray(xs, dtype=float))
        return np.atleast_1d(idx).astype(int)

    def nearest_surface_point(self, x) -> SurfaceQuery:
        x = np.asarray(x, dtype=float)
        idx = self.nearest_index(x)
        p = self.points[idx]
        n = self.normals[idx]
        return SurfaceQuery(p, n, float(np.dot(n, x - p)), idx)

    def signed_distance(self, x) -> float:
        return self.nearest_surface_point(x).signed_distance

    def signed_distances(self, xs: np.ndarray) -> np.ndarray:
        """Batch signed distance; one KD-tree query for all rows."""
        xs = np.asarray(xs, dtype=float)
        idx = self.nearest_indices(xs)
        diff = np.atleast_2d(xs) - self.points[idx]
        return np.einsum("ij,ij->i", self.normals[idx], diff)

    def sdf_gradient(self, x) -> np.ndarray:
        return self.normals[self.nearest_index(x)].copy()

    def mean_sampling_spacing(self) -> float:
        """Mean distance from each sample to its nearest other sample."""
        d, _ = self._tree.query(self.points, k=2)
        return float(np.mean(d[:, 1]))

    def transformed(self, T: np.ndarray) -> "OrientedPointCloud":
        R = T[:3, :3]
        return OrientedPointCloud(self.points @ R.T + T[:3, 3], self.normals @ R.T)


def nearest_surface_point(cloud: OrientedPointCloud, x) -> SurfaceQuery:
    return cloud.nearest_surface_point(x)


def signed_distance(cloud: OrientedPointCloud, x) -> float:
    return cloud.signed_distance(x)


def sdf_gradient(cloud: OrientedPointCloud, x) -> np.ndarray:
    return cloud.sdf_gradient(x)


def estimate_mass_properties(cloud: OrientedPointCloud, density: float = DEFAULT_DENSITY) -> MassProperties:
    """Mass from the convex-hull volume, inertia from equal point masses.

    The inertia treats the samples as point masses summing to the total
    mass, taken about the centroid. Raises DegenerateGeometry when the
    samples span no volume.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    try:
        hull = ConvexHull(cloud.points)
    except QhullError as exc:
        raise DegenerateGeometry(f"convex hull failed: {exc}") from exc
    volume = float(hull.volume)
    if volume < 1e-12:
        raise DegenerateGeometry(f"hull volume {volume:.3e} m^3 is below 1e-12")
    mass = density * volume
    centroid = cloud.points.mean(axis=0)
    r = cloud.points - centroid
    m_k = mass / len(cloud.points)
    r2 = np.einsum("ij,ij->i", r, r)
    inertia = m_k * (np.sum(r2) * np.eye(3) - r.T @ r)
    return MassProperties(mass=mass, inertia=inertia, center_of_mass=centroid)


def farthest_point_indices(cloud: OrientedPointCloud, n: int, seed: int) -> np.ndarray:
    """Greedy max-min subsample; the first point is drawn by the seeded RNG."""
    total = len(cloud)
    if n > total:
        raise ValueError(f"cannot sample {n} points from a cloud of {total}")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    chosen = np.empty(n, dtype=int)
    chosen[0] = int(rng.integers(total))
    min_d2 = np.sum((cloud.points - cloud.points[chosen[0]]) ** 2, axis=1)
    for k in range(1, n):
        idx = int(np.argmax(min_d2))
        chosen[k] = idx
        d2 = np.sum((cloud.points - cloud.points[idx]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def farthest_point_sample(cloud: OrientedPointCloud, n: int, seed: int) -> OrientedPointCloud:
    idx = farthest_point_indices(cloud, n, seed)
    return OrientedPointCloud(cloud.points[idx], cloud.normals[idx])


# -- file I/O ------------------------------------------------------------


def load_point_cloud(path) -> OrientedPointCloud:
    """Load `x y z nx ny nz` ASCII (with # comments) or ASCII PLY with normals.

    Normals are renormalized; zero normals are rejected.
    """
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        if first.strip().lower() == "ply":
            points, normals = _parse_ply(fh, path)
        else:
            points, normals = _parse_xyzn(fh, path)
    points = np.asarray(points, dtype=float)
    normals = np.asarray(normals, dtype=float)
    if len(points) < 4:
        raise ParseError("cloud has fewer than 4 points", path=path)
    lengths = np.linalg.norm(normals, axis=1)
    bad = np.nonzero(lengths < 1e-12)[0]
    if len(bad):
        raise ParseError(f"zero normal at record {bad[0] + 1}", path=path)
    return OrientedPointCloud(points, normals / lengths[:, None])


def _parse_xyzn(fh, path):
    points, normals = [], []
    for lineno, raw in enumerate(fh, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields, got {len(fields)}", path=path, line=lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", path=path, line=lineno) from exc
        points.append(vals[:3])
        normals.append(vals[3:])
    return points, normals


def _parse_ply(fh, path):
    n_vertices = None
    props = []
    lineno = 0
    for raw in fh:
        lineno += 1
        tokens = raw.strip().split()
        if not tokens:
            continue
        if tokens[0] == "format" and tokens[1] != "ascii":
            raise ParseError("only ascii PLY is supported", path=path, line=lineno)
        if tokens[0] == "element" and tokens[1] == "vertex":
            n_vertices = int(tokens[2])
            props = []
        elif tokens[0] == "property" and n_vertices is not None:
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            break
    if n_vertices is None:
        raise ParseError("PLY header has no vertex element", path=path, line=lineno)
    needed = ["x", "y", "z", "nx", "ny", "nz"]
    try:
        cols = [props.index(name) for name in needed]
    except ValueError as exc:
        raise ParseError(f"PLY vertex element lacks property: {exc}", path=path) from exc
    points, normals = [], []
    read = 0
    for raw in fh:
        lineno += 1
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        try:
            vals = [float(fields[c]) for c in cols]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad vertex record: {exc}", path=path, line=lineno) from exc
        points.append(vals[:3])
        normals.append(vals[3:])
        read += 1
        if read == n_vertices:
            break
    if read != n_vertices:
        raise ParseError(f"expected {n_vertices} vertices, file has {read}", path=path)
    return points, normals


def save_point_cloud(path, cloud: OrientedPointCloud) -> None:
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("# x y z nx ny nz\n")
        for p, n in zip(cloud.points, cloud.normals):
            fh.write(
                f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n"
            )


# -- primitive surface samplers (used by the eval harness and tests) -----


def sample_sphere(radius: float, n: int, seed: int) -> OrientedPointCloud:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return OrientedPointCloud(radius * v, v)


def sample_box(half_extents, n: int, seed: int) -> OrientedPointCloud:
    """Uniform area sampling over the six faces of an axis-aligned box."""
    rng = np.random.default_rng(seed)
    h = np.asarray(half_extents, dtype=float)
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    points = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for f in range(6):
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign == 0 else -1.0
        sel = face == f
        others = [i for i in range(3) if i != axis]
        points[sel, axis] = sign * h[axis]
        points[sel, others[0]] = u[sel, 0] * h[others[0]]
        points[sel, others[1]] = u[sel, 1] * h[others[1]]
        normals[sel, axis] = sign
    return OrientedPointCloud(points, normals)


def sample_cylinder(radius: float, height: float, n: int, seed: int) -> OrientedPointCloud:
    """Uniform area sampling of a z-aligned cylinder with caps."""
    rng = np.random.default_rng(seed)
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius * radius
    part = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    points = np.empty((n, 3))
    normals = np.zeros((n, 3))
    side = part == 0
    points[side, 0] = radius * np.cos(theta[side])
    points[side, 1] = radius * np.sin(theta[side])
    points[side, 2] = rng.uniform(-height / 2.0, height / 2.0, size=int(side.sum()))
    normals[side, 0] = np.cos(theta[side])
    normals[side, 1] = np.sin(theta[side])
    for which, z, nz in ((1, height / 2.0, 1.0), (2, -height / 2.0, -1.0)):
        sel = part == which
        r = radius * np.sqrt(rng.uniform(size=int(sel.sum())))
        points[sel, 0] = r * np.cos(theta[sel])
        points[sel, 1] = r * np.sin(theta[sel])
        points[sel, 2] = z
        normals[sel, 2] = nz
    return OrientedPointCloud(points, normals)


def sample_primitive(kind: str, dims, n: int, seed: int) -> OrientedPointCloud:
    """Dispatch by kind: sphere(r), box(hx, hy, hz), cylinder(r, h)."""
    dims = list(np.atleast_1d(dims).astype(float))
    if kind == "sphere":
        return sample_sphere(dims[0], n, seed)
    if kind == "box":
        return sample_box(dims, n, seed)
    if kind == "cylinder":
        return sample_cylinder(dims[0], dims[1], n, seed)
    raise ValueError(f"unknown primitive kind {kind!r}")
