"""3-mode tensor algebra: unfoldings, mode products and truncated HOSVD.

A :class:`Mode3Tensor` wraps an array of shape ``(d1, d2, d3)``. Its flat
canonical layout runs mode 1 fastest, then mode 2, then mode 3 (Fortran
order). Unfoldings order their columns with the trailing remaining mode
fastest: the mode-2 unfolding has columns ``(i, k)`` with ``k`` fastest,
the mode-3 unfolding has columns ``(i, j)`` with ``j`` fastest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeMismatch, SvdFailure, UnsupportedMode


class Mode3Tensor:
    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=float)
        if arr.ndim != 3:
            raise ShapeMismatch(f"expected a 3-mode array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor values must be finite")
        self.values = arr

    @classmethod
    def from_flat(cls, flat, dims) -> "Mode3Tensor":
        flat = np.asarray(flat, dtype=float)
        if flat.size != int(np.prod(dims)):
            raise ShapeMismatch(f"{flat.size} values do not fill dims {tuple(dims)}")
        return cls(flat.reshape(tuple(dims), order="F"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, Mode3Tensor):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"Mode3Tensor(dims={self.dims})"


_PERM = {2: (1, 0, 2), 3: (2, 0, 1)}


def _check_mode(mode: int) -> None:
    if mode not in _PERM:
        raise UnsupportedMode(f"mode must be 2 or 3, got {mode!r}")


def unfold(t: Mode3Tensor, mode: int) -> np.ndarray:
    _check_mode(mode)
    a = t.values.transpose(_PERM[mode])
    return a.reshape(a.shape[0], -1).copy()


def refold(m: np.ndarray, mode: int, dims) -> Mode3Tensor:
    _check_mode(mode)
    perm = _PERM[mode]
    permuted = tuple(dims[p] for p in perm)
    m = np.asarray(m, dtype=float)
    if m.size != int(np.prod(dims)) or m.shape[0] != permuted[0]:
        raise ShapeMismatch(f"matrix of shape {m.shape} cannot refold to dims {tuple(dims)}")
    return Mode3Tensor(m.reshape(permuted).transpose(np.argsort(perm)))


def mode_product(t: Mode3Tensor, m, mode: int) -> Mode3Tensor:
    """Replace every mode-``mode`` fiber ``f`` by ``m @ f``."""
    _check_mode(mode)
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[1] != t.dims[mode - 1]:
        raise ShapeMismatch(
            f"matrix with {m.shape[-1]} columns does not act on mode {mode} of dims {t.dims}"
        )
    if mode == 2:
        return Mode3Tensor(np.einsum("aj,ijk->iak", m, t.values))
    return Mode3Tensor(np.einsum("ak,ijk->ija", m, t.values))


def fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip columns so each column's largest-magnitude entry is non-negative.

    Works on a single matrix or a stack ``(..., rows, cols)``.
    """
    idx = np.argmax(np.abs(u), axis=-2)
    lead = np.take_along_axis(u, idx[..., None, :], axis=-2)
    return u * np.where(lead < 0, -1.0, 1.0)


def _eigh_desc(gram: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        evals, evecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise SvdFailure(str(exc)) from exc
    return np.sqrt(np.clip(evals[..., ::-1], 0.0, None)), evecs[..., ::-1]


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False by an orthonormal completion.

    Each new column is the coordinate axis least covered by the columns so
    far, with those columns projected out, so the result is deterministic.
    """
    u = u.copy()
    rows = u.shape[-2]
    for j in range(u.shape[-1]):
        bad = ~good[..., j]
        if not np.any(bad):
            continue
        prev = u[bad, :, :j]
        leverage = np.sum(prev**2, axis=-1)
        c = np.argmin(leverage, axis=-1)
        axis = np.zeros((len(c), rows))
        axis[np.arange(len(c)), c] = 1.0
        v = axis - np.einsum("bij,bj->bi", prev, prev[np.arange(len(c)), c])
        u[bad, :, j] = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return u


def leading_left_vectors(unfoldings: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``m`` left singular vectors of a stack of matrices.

    Works through the eigen-decomposition of the smaller Gram matrix, so the
    cost grows linearly with the longer side. Returns ``(vectors,
    singular_values)`` with vectors sign-fixed and all ``rows`` singular
    values (descending, zero-padded) for truncation bookkeeping.
    """
    rows, cols = unfoldings.shape[-2:]
    if rows <= cols:
        sv, evecs = _eigh_desc(np.einsum("...ic,...jc->...ij", unfoldings, unfoldings))
        return fix_signs(evecs[..., :m]), sv
    sv, right = _eigh_desc(np.einsum("...ci,...cj->...ij", unfoldings, unfoldings))
    k = min(m, cols)
    top = sv[..., :k]
    # directions with negligible singular value are not determined by A v / s
    good = top > 1e-7 * np.maximum(sv[..., :1], 1e-300)
    u = np.zeros(unfoldings.shape[:-2] + (rows, m))
    u[..., :k] = np.einsum("...ic,...ck->...ik", unfoldings, right[..., :k]) / np.where(good, top, 1.0)[..., None, :]
    good = np.concatenate([good, np.zeros(good.shape[:-1] + (m - k,), dtype=bool)], axis=-1)
    u = _complete_columns(u, good)
    pad = np.zeros(sv.shape[:-1] + (rows - cols,))
    return fix_signs(u), np.concatenate([sv, pad], axis=-1)


@dataclass(frozen=True, eq=False)
class HosvdResult:
    core: Mode3Tensor
    mode2_factors: np.ndarray
    mode3_factors: np.ndarray
    mode2_singular_values: np.ndarray
    mode3_singular_values: np.ndarray

    def reconstruct(self) -> Mode3Tensor:
        return mode_product(mode_product(self.core, self.mode2_factors, 2), self.mode3_factors, 3)


def hosvd_batch(values: np.ndarray, m2: int, m3: int):
    """Truncated HOSVD of a stack ``(K, d1, d2, d3)`` of independent tensors.

    Returns ``(core, u2, u3, sv2, sv3)`` with shapes ``(K, d1, m2, m3)``,
    ``(K, d2, m2)``, ``(K, d3, m3)``, ``(K, d2)``, ``(K, d3)``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 4:
        raise ShapeMismatch(f"expected a (K, d1, d2, d3) stack, got shape {values.shape}")
    _, d1, d2, d3 = values.shape
    if not (1 <= m2 <= d2 and 1 <= m3 <= d3):
        raise ShapeMismatch(f"truncation ({m2}, {m3}) invalid for dims ({d1}, {d2}, {d3})")
    unf2 = values.transpose(0, 2, 1, 3).reshape(len(values), d2, d1 * d3)
    unf3 = values.transpose(0, 3, 1, 2).reshape(len(values), d3, d1 * d2)
    u2, sv2 = leading_left_vectors(unf2, m2)
    u3, sv3 = leading_left_vectors(unf3, m3)
    core = np.einsum("kijl,kja,klb->kiab", values, u2, u3)
    return core, u2, u3, sv2, sv3


def hosvd(t: Mode3Tensor, m2: int, m3: int) -> HosvdResult:
    core, u2, u3, sv2, sv3 = hosvd_batch(t.values[None], m2, m3)
    return HosvdResult(Mode3Tensor(core[0]), u2[0], u3[0], sv2[0], sv3[0])
