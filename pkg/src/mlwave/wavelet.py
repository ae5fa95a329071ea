"""Separable subdivision wavelet transform on quad grids, via lifting.

One level of the 1D transform acts on ``2m + 1`` samples split into evens
``e_0..e_m`` and odds ``o_0..o_{m-1}``::

    c_i = 2 e_i - (o_{i-1} + o_i) / 2      interior evens, c_0 = e_0, c_m = e_m
    d_i = o_i - (c_i + c_{i+1}) / 2

Synthesis undoes the two steps in reverse order. With ``d = 0`` it is cubic
B-spline refinement ``o_i = (c_i + c_{i+1}) / 2``,
``e_i = (c_{i-1} + 6 c_i + c_{i+1}) / 8``; the end samples interpolate, which
is the antisymmetric (point) reflection of the odd samples about the
boundary. Affine data therefore has zero detail everywhere.

The 2D transform applies the 1D step along rows and then along columns,
level by level from fine to coarse, in place. After the sweep a coefficient
sits at a grid position; the canonical coefficient order is

1. scaling coefficients (positions on the ``2**L`` lattice), row-major;
2. for each level 1..L, coarse to fine: horizontal, vertical, then diagonal
   details, each row-major.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import CoefficientIndexError, InconsistentDimensions
from .mesh import GridGeometry, QuadGridShape

ORDERING_TAG = "mlwave/bspline-lifting/coarse-first/level-kind-rowmajor/v1"

SCALING, HORIZONTAL, VERTICAL, DIAGONAL = 0, 1, 2, 3
KIND_NAMES = ("scaling", "detail-horizontal", "detail-vertical", "detail-diagonal")


def _along(axis: int, s: slice) -> tuple:
    return (slice(None),) * axis + (s,)


def _analyze(v: np.ndarray, axis: int) -> None:
    e = v[_along(axis, slice(0, None, 2))]
    o = v[_along(axis, slice(1, None, 2))]
    inner = _along(axis, slice(1, -1))
    e[inner] = 2.0 * e[inner] - 0.5 * (o[_along(axis, slice(None, -1))] + o[_along(axis, slice(1, None))])
    o -= 0.5 * (e[_along(axis, slice(None, -1))] + e[_along(axis, slice(1, None))])


def _synthesize(v: np.ndarray, axis: int) -> None:
    e = v[_along(axis, slice(0, None, 2))]
    o = v[_along(axis, slice(1, None, 2))]
    o += 0.5 * (e[_along(axis, slice(None, -1))] + e[_along(axis, slice(1, None))])
    inner = _along(axis, slice(1, -1))
    e[inner] = 0.5 * e[inner] + 0.25 * (o[_along(axis, slice(None, -1))] + o[_along(axis, slice(1, None))])


def _check(shape2d: tuple[int, int], levels: int) -> None:
    GridGeometry(shape2d[0], shape2d[1], levels)


def forward_array(values: np.ndarray, levels: int) -> np.ndarray:
    """In-place-layout transform of a ``(rows, cols, ...)`` array (copied).

    Trailing axes are independent channels.
    """
    out = np.array(values, dtype=float)
    _check(out.shape[:2], levels)
    for lev in range(levels):
        s = 2**lev
        sub = out[::s, ::s]
        _analyze(sub, 1)
        _analyze(sub, 0)
    return out


def inverse_array(values: np.ndarray, levels: int) -> np.ndarray:
    out = np.array(values, dtype=float)
    _check(out.shape[:2], levels)
    for lev in reversed(range(levels)):
        s = 2**lev
        sub = out[::s, ::s]
        _synthesize(sub, 0)
        _synthesize(sub, 1)
    return out


@dataclass(frozen=True, eq=False)
class CoefficientLayout:
    """Per-coefficient metadata in canonical order.

    ``position[k]`` is the flat grid index holding coefficient ``k`` in the
    in-place layout.
    """

    geometry: GridGeometry
    position: np.ndarray
    level: np.ndarray
    kind: np.ndarray

    @property
    def n(self) -> int:
        return len(self.position)

    def level_slices(self) -> list[slice]:
        """Contiguous index range of each level, coarse to fine."""
        bounds = np.searchsorted(self.level, np.arange(self.geometry.levels + 2))
        return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(self.geometry.levels + 1)]


@lru_cache(maxsize=32)
def coefficient_layout(geometry: GridGeometry) -> CoefficientLayout:
    rows, cols, levels = geometry.rows, geometry.cols, geometry.levels
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    pos, lev, kind = [], [], []

    def add(mask, level, k):
        p = np.flatnonzero(mask.ravel())
        pos.append(p)
        lev.append(np.full(len(p), level, dtype=np.int64))
        kind.append(np.full(len(p), k, dtype=np.int64))

    top = 2**levels
    add((r % top == 0) & (c % top == 0), 0, SCALING)
    for level in range(1, levels + 1):
        s = 2 ** (levels - level)
        r_even, r_odd = r % (2 * s) == 0, r % (2 * s) == s
        c_even, c_odd = c % (2 * s) == 0, c % (2 * s) == s
        add(r_even & c_odd, level, HORIZONTAL)
        add(r_odd & c_even, level, VERTICAL)
        add(r_odd & c_odd, level, DIAGONAL)
    position = np.concatenate(pos)
    assert len(position) == rows * cols
    out = CoefficientLayout(geometry, position, np.concatenate(lev), np.concatenate(kind))
    for a in (out.position, out.level, out.kind):
        a.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class WaveletCoefficients:
    """``n`` coefficient 3-vectors in canonical order for one grid geometry."""

    geometry: GridGeometry
    coeffs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != self.geometry.n_vertices:
            raise InconsistentDimensions(
                f"expected {self.geometry.n_vertices} coefficients for a "
                f"{self.geometry.rows}x{self.geometry.cols} grid, got shape {arr.shape}"
            )
        object.__setattr__(self, "coeffs", arr)

    @property
    def n(self) -> int:
        return len(self.coeffs)

    @property
    def levels(self) -> int:
        return self.geometry.levels

    @property
    def base_rows(self) -> int:
        return self.geometry.base_shape[0]

    @property
    def base_cols(self) -> int:
        return self.geometry.base_shape[1]

    @property
    def layout(self) -> CoefficientLayout:
        return coefficient_layout(self.geometry)

    def level(self, k: int) -> int:
        return int(self.layout.level[_check_index(k, self.n)])

    def kind(self, k: int) -> str:
        return KIND_NAMES[self.layout.kind[_check_index(k, self.n)]]

    def support(self, k: int) -> np.ndarray:
        return coefficient_support(self.geometry, k)


def _check_index(k: int, n: int) -> int:
    if not 0 <= k < n:
        raise CoefficientIndexError(f"coefficient index {k} out of range [0, {n})")
    return k


def forward(shape: QuadGridShape) -> WaveletCoefficients:
    g = shape.geometry
    arr = forward_array(shape.positions, g.levels)
    layout = coefficient_layout(g)
    return WaveletCoefficients(g, arr.reshape(g.n_vertices, -1)[layout.position])


def inverse(coeffs: WaveletCoefficients) -> QuadGridShape:
    g = coeffs.geometry
    return QuadGridShape(inverse_array(to_grid(coeffs.coeffs, g), g.levels), g.levels)


def to_grid(coeffs: np.ndarray, geometry: GridGeometry) -> np.ndarray:
    """Scatter canonical-order coefficients ``(n, ...)`` into the in-place grid layout."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != geometry.n_vertices:
        raise InconsistentDimensions(
            f"expected {geometry.n_vertices} coefficients, got {coeffs.shape[0]}"
        )
    layout = coefficient_layout(geometry)
    flat = np.empty_like(coeffs)
    flat[layout.position] = coeffs
    return flat.reshape((geometry.rows, geometry.cols) + coeffs.shape[1:])


def forward_batch(vertices: np.ndarray, geometry: GridGeometry) -> np.ndarray:
    """Transform a stack of shapes: ``(rows*cols, ...)`` -> canonical ``(n, ...)``."""
    v = np.asarray(vertices, dtype=float)
    arr = forward_array(v.reshape((geometry.rows, geometry.cols) + v.shape[1:]), geometry.levels)
    return arr.reshape((geometry.n_vertices,) + v.shape[1:])[coefficient_layout(geometry).position]


def inverse_batch(coeffs: np.ndarray, geometry: GridGeometry) -> np.ndarray:
    """Inverse of :func:`forward_batch`; returns flat ``(rows*cols, ...)`` vertices."""
    arr = inverse_array(to_grid(coeffs, geometry), geometry.levels)
    return arr.reshape((geometry.n_vertices,) + arr.shape[2:])


@lru_cache(maxsize=8)
def synthesis_matrix(geometry: GridGeometry, chunk: int = 512) -> sp.csc_matrix:
    """Sparse ``(n_vertices, n)`` matrix of the inverse transform.

    Column ``k`` is the scalar footprint of coefficient ``k``; it applies to
    every coordinate channel alike. Computed by pushing unit impulses
    through :func:`inverse_array`, so its sparsity pattern is exactly the
    set of vertices each coefficient moves.
    """
    n = geometry.n_vertices
    layout = coefficient_layout(geometry)
    indptr = [0]
    indices, data = [], []
    for start in range(0, n, chunk):
        ks = np.arange(start, min(start + chunk, n))
        batch = np.zeros((n, len(ks)))
        batch[layout.position[ks], np.arange(len(ks))] = 1.0
        resp = inverse_array(batch.reshape(geometry.rows, geometry.cols, len(ks)), geometry.levels)
        resp = resp.reshape(n, len(ks))
        for j in range(len(ks)):
            nz = np.flatnonzero(resp[:, j])
            indices.append(nz)
            data.append(resp[nz, j])
            indptr.append(indptr[-1] + len(nz))
    mat = sp.csc_matrix(
        (np.concatenate(data), np.concatenate(indices), np.asarray(indptr)), shape=(n, n)
    )
    mat.data.setflags(write=False)
    return mat


def coefficient_support(meta, k: int) -> np.ndarray:
    """Sorted vertex indices moved by coefficient ``k``.

    ``meta`` is a :class:`GridGeometry` or anything with a ``geometry``.
    """
    geometry = meta if isinstance(meta, GridGeometry) else meta.geometry
    _check_index(k, geometry.n_vertices)
    mat = synthesis_matrix(geometry)
    return mat.indices[mat.indptr[k] : mat.indptr[k + 1]].copy()

