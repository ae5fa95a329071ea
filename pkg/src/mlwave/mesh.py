"""Template grid surfaces, scans, landmarks, similarity transforms and the
umbrella operators used by the smoothing energy.

Vertices of a ``rows x cols`` grid are numbered row-major:
``vertex = r * cols + c``. Positions are in millimeters.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import BadGridDimensions, DataError, DegenerateConfiguration


def max_levels(rows: int, cols: int) -> int:
    """Largest L with ``rows - 1`` and ``cols - 1`` both divisible by 2**L."""
    if rows < 2 or cols < 2:
        return 0
    level = 0
    while (rows - 1) % (2 ** (level + 1)) == 0 and (cols - 1) % (2 ** (level + 1)) == 0:
        level += 1
    return level


@dataclass(frozen=True)
class GridGeometry:
    """Connectivity of a subdivision grid: ``rows = a*2**L + 1``, ``cols = b*2**L + 1``."""

    rows: int
    cols: int
    levels: int

    def __post_init__(self):
        if self.levels < 1:
            raise BadGridDimensions(f"level count must be >= 1, got {self.levels}")
        step = 2 ** self.levels
        for name, size in (("rows", self.rows), ("cols", self.cols)):
            if size < step + 1 or (size - 1) % step:
                raise BadGridDimensions(
                    f"{name}={size} is not of the form a*2^{self.levels}+1 with a >= 1"
                )

    @property
    def n_vertices(self) -> int:
        return self.rows * self.cols

    @property
    def base_shape(self) -> tuple[int, int]:
        """Dimensions of the coarsest scaling grid, ``(a + 1, b + 1)``."""
        step = 2 ** self.levels
        return (self.rows - 1) // step + 1, (self.cols - 1) // step + 1

    def vertex(self, r: int, c: int) -> int:
        return r * self.cols + c


class QuadGridShape:
    """A surface sampled on a regular quad grid with subdivision connectivity.

    ``positions`` has shape ``(rows, cols, 3)`` and is stored read-only.
    """

    __slots__ = ("geometry", "positions")

    def __init__(self, positions, level_count: int | None = None):
        pos = np.array(positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise BadGridDimensions(f"positions must have shape (rows, cols, 3), got {pos.shape}")
        rows, cols = pos.shape[:2]
        if level_count is None:
            level_count = max_levels(rows, cols)
        self.geometry = GridGeometry(rows, cols, int(level_count))
        if not np.all(np.isfinite(pos)):
            raise DataError("grid positions contain non-finite values")
        pos.setflags(write=False)
        self.positions = pos

    @property
    def rows(self) -> int:
        return self.geometry.rows

    @property
    def cols(self) -> int:
        return self.geometry.cols

    @property
    def level_count(self) -> int:
        return self.geometry.levels

    @property
    def n_vertices(self) -> int:
        return self.geometry.n_vertices

    @property
    def vertices(self) -> np.ndarray:
        """Flat ``(rows*cols, 3)`` view in row-major vertex order."""
        return self.positions.reshape(-1, 3)

    @classmethod
    def from_vertices(cls, vertices, geometry: GridGeometry) -> "QuadGridShape":
        v = np.asarray(vertices, dtype=float).reshape(geometry.rows, geometry.cols, 3)
        return cls(v, geometry.levels)

    def with_vertices(self, vertices) -> "QuadGridShape":
        return QuadGridShape.from_vertices(vertices, self.geometry)

    def __eq__(self, other):
        if not isinstance(other, QuadGridShape):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.positions, other.positions)

    def __repr__(self):
        g = self.geometry
        return f"QuadGridShape(rows={g.rows}, cols={g.cols}, levels={g.levels})"


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    model_indices: np.ndarray
    data_points: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.model_indices, dtype=np.int64).reshape(-1)
        pts = np.asarray(self.data_points, dtype=float).reshape(-1, 3)
        if len(idx) != len(pts):
            raise DataError(f"{len(idx)} landmark indices but {len(pts)} landmark points")
        if len(np.unique(idx)) != len(idx):
            raise DataError("landmark model indices must be distinct")
        if np.any(idx < 0):
            raise DataError("landmark model indices must be non-negative")
        if not np.all(np.isfinite(pts)):
            raise DataError("landmark points contain non-finite values")
        object.__setattr__(self, "model_indices", idx)
        object.__setattr__(self, "data_points", pts)

    def __len__(self):
        return len(self.model_indices)

    def check_range(self, n_vertices: int) -> None:
        if len(self) and self.model_indices.max() >= n_vertices:
            raise DataError(
                f"landmark index {self.model_indices.max()} out of range for {n_vertices} vertices"
            )


@dataclass(frozen=True, eq=False)
class TargetScan:
    """Oriented point cloud with optional landmarks."""

    points: np.ndarray
    normals: np.ndarray
    landmarks: LandmarkSet | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if len(pts) != len(nrm):
            raise DataError(f"{len(pts)} points but {len(nrm)} normals")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(nrm))):
            raise DataError("scan contains non-finite values")
        if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
            raise DataError("scan normals must have unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    def transformed(self, t: "SimilarityTransform") -> "TargetScan":
        lm = self.landmarks
        if lm is not None:
            lm = LandmarkSet(lm.model_indices, apply_transform(t, lm.data_points))
        return TargetScan(apply_transform(t, self.points), self.normals @ t.rotation.T, lm)


def unit_normals(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise DataError(f"scale must be positive, got {self.scale}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-8 or np.linalg.det(rot) <= 0:
            raise DataError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def __call__(self, x):
        return apply_transform(self, x)


def apply_transform(t: SimilarityTransform, x) -> np.ndarray:
    """``scale * rotation @ x + translation`` for one point or an ``(N, 3)`` array."""
    x = np.asarray(x, dtype=float)
    return t.scale * (x @ t.rotation.T) + t.translation


def invert(t: SimilarityTransform) -> SimilarityTransform:
    return t.inverse()


def estimate_similarity(model_pts, data_pts) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``model_pts`` onto ``data_pts``.

    Closed-form absolute orientation from the SVD of the centered
    cross-covariance (Umeyama's method).
    """
    a = np.asarray(model_pts, dtype=float).reshape(-1, 3)
    b = np.asarray(data_pts, dtype=float).reshape(-1, 3)
    if len(a) != len(b):
        raise DataError(f"{len(a)} model points but {len(b)} data points")
    if len(a) < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(a)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - mu_a, b - mu_b
    sv = np.linalg.svd(ac, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfiguration("model correspondences are collinear")
    cov = bc.T @ ac / len(a)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    var_a = np.sum(ac**2) / len(a)
    scale = float(np.sum(d * sign) / var_a)
    if scale <= 0:
        raise DegenerateConfiguration("correspondences admit no positive-scale similarity")
    # re-orthonormalize against round-off before validation
    uu, _, vv = np.linalg.svd(rot)
    rot = uu @ vv
    return SimilarityTransform(scale, rot, mu_b - scale * rot @ mu_a)


_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))
BOUNDARY_RULES = ("truncated", "reflect")


def _check_boundary(boundary: str) -> None:
    if boundary not in BOUNDARY_RULES:
        raise ValueError(f"boundary must be one of {BOUNDARY_RULES}, got {boundary!r}")


@lru_cache(maxsize=16)
def umbrella_matrix(rows: int, cols: int, boundary: str = "truncated") -> sp.csr_matrix:
    """Sparse ``U`` with ``(U X)_v = mean of the 4-neighbors of v - x_v``.

    ``"truncated"`` averages over the neighbors that exist, so edge vertices use
    3 and corners 2. ``"reflect"`` replaces a missing neighbor by the reflection
    of the opposite neighbor through ``v`` (``2 x_v - x_opposite``), so affine
    position fields have zero umbrella everywhere, boundary included.
    """
    _check_boundary(boundary)
    n = rows * cols
    r, c = np.divmod(np.arange(n), cols)
    count = np.zeros(n)
    src, dst, val = [], [], []
    for dr, dc in _STEPS:
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
        count += ok
        v = np.flatnonzero(ok)
        src.append(v)
        dst.append(rr[ok] * cols + cc[ok])
        val.append(np.full(len(v), 0.25))
        if boundary == "reflect":
            g = np.flatnonzero(~ok)
            src += [g, g]
            dst += [g, (r[g] - dr) * cols + (c[g] - dc)]
            val += [np.full(len(g), 0.5), np.full(len(g), -0.25)]
    if boundary == "truncated":
        val = [w * 4 / count[s] for w, s in zip(val, src)]
    u = sp.csr_matrix((np.concatenate(val), (np.concatenate(src), np.concatenate(dst))), shape=(n, n))
    u = (u - sp.identity(n, format="csr")).tocsr()
    u.sum_duplicates()
    u.eliminate_zeros()
    u.sort_indices()
    return u


@lru_cache(maxsize=16)
def bi_umbrella_matrix(rows: int, cols: int, boundary: str = "truncated") -> sp.csr_matrix:
    u = umbrella_matrix(rows, cols, boundary)
    b = (u @ u).tocsr()
    b.sort_indices()
    return b


def umbrella_field(shape: QuadGridShape, boundary: str = "truncated") -> np.ndarray:
    return umbrella_matrix(shape.rows, shape.cols, boundary) @ shape.vertices


def bi_umbrella_field(shape: QuadGridShape, boundary: str = "truncated") -> np.ndarray:
    u = umbrella_matrix(shape.rows, shape.cols, boundary)
    return u @ (u @ shape.vertices)


def _check_vertex(shape: QuadGridShape, vertex: int) -> None:
    if not 0 <= vertex < shape.n_vertices:
        raise IndexError(f"vertex {vertex} out of range for {shape.n_vertices} vertices")


def _umbrella_at(geometry: GridGeometry, value, vertex: int, boundary: str) -> np.ndarray:
    """Umbrella of the per-vertex field ``value(v)`` at ``vertex``."""
    r, c = divmod(vertex, geometry.cols)
    here = value(vertex)
    total, count = np.zeros_like(here), 0
    for dr, dc in _STEPS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < geometry.rows and 0 <= cc < geometry.cols:
            total += value(geometry.vertex(rr, cc))
            count += 1
        elif boundary == "reflect":
            total += 2 * here - value(geometry.vertex(r - dr, c - dc))
            count += 1
    return total / count - here


def umbrella(shape: QuadGridShape, vertex: int, boundary: str = "truncated") -> np.ndarray:
    """Umbrella vector at ``vertex``; see :func:`umbrella_matrix` for the boundary rules."""
    _check_boundary(boundary)
    _check_vertex(shape, vertex)
    v = shape.vertices
    return _umbrella_at(shape.geometry, lambda j: v[j], vertex, boundary)


def bi_umbrella(shape: QuadGridShape, vertex: int, boundary: str = "truncated") -> np.ndarray:
    """Umbrella of the umbrella field at ``vertex``, with the same boundary rule."""
    _check_boundary(boundary)
    _check_vertex(shape, vertex)
    return _umbrella_at(shape.geometry, lambda j: umbrella(shape, j, boundary), vertex, boundary)
