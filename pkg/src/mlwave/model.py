"""The learned shape space: one multilinear model per wavelet coefficient.

Weights are handled in normalized units. For coefficient ``k`` the actual
mode-2 weight vector is ``id_mean[k] + id_scale[k] * w2`` (likewise for
mode 3), so ``w = 0`` sits at the mode-means and a hyper-box of half-width
``lam`` means ``lam`` training standard deviations per component.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wavelet
from .errors import (
    ChecksumMismatch,
    DataError,
    FormatVersionMismatch,
    IoFailure,
    ShapeMismatch,
)
from .mesh import GridGeometry, QuadGridShape
from .tensor import Mode3Tensor

MAGIC = b"MLWMODEL"
FORMAT_VERSION = 1
SCALE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class MultilinearCoefficientModel:
    mean: np.ndarray
    core: Mode3Tensor
    id_mode_mean: np.ndarray
    expr_mode_mean: np.ndarray
    id_scale: np.ndarray
    expr_scale: np.ndarray

    @property
    def m2(self) -> int:
        return self.core.dims[1]

    @property
    def m3(self) -> int:
        return self.core.dims[2]


def synthesize_coefficient(m: MultilinearCoefficientModel, w2, w3) -> np.ndarray:
    w2 = np.asarray(w2, dtype=float)
    w3 = np.asarray(w3, dtype=float)
    if w2.shape != (m.m2,) or w3.shape != (m.m3,):
        raise ShapeMismatch(f"weights {w2.shape}, {w3.shape} do not match ({m.m2},), ({m.m3},)")
    a2 = m.id_mode_mean + m.id_scale * w2
    a3 = m.expr_mode_mean + m.expr_scale * w3
    return m.mean + np.einsum("cjl,j,l->c", m.core.values, a2, a3)


@dataclass(eq=False)
class FitWeights:
    id_weights: np.ndarray
    expr_weights: np.ndarray

    def __post_init__(self):
        self.id_weights = np.asarray(self.id_weights, dtype=float)
        self.expr_weights = np.asarray(self.expr_weights, dtype=float)
        if self.id_weights.ndim != 2 or self.expr_weights.ndim != 2:
            raise ShapeMismatch("weights must be (n, m2) and (n, m3) arrays")
        if len(self.id_weights) != len(self.expr_weights):
            raise ShapeMismatch("identity and expression weights disagree on n")

    @classmethod
    def zeros(cls, model: "WaveletShapeModel") -> "FitWeights":
        return cls(np.zeros((model.n, model.m2)), np.zeros((model.n, model.m3)))

    def copy(self) -> "FitWeights":
        return FitWeights(self.id_weights.copy(), self.expr_weights.copy())

    def flat(self, k: int) -> np.ndarray:
        return np.concatenate([self.id_weights[k], self.expr_weights[k]])


class WaveletShapeModel:
    """Per-coefficient multilinear models stored as stacked arrays.

    Array shapes: ``mean (n, 3)``, ``core (n, 3, m2, m3)``,
    ``id_mean``/``id_scale`` ``(n, m2)``, ``expr_mean``/``expr_scale`` ``(n, m3)``.
    ``support_indptr``/``support_indices`` hold the per-coefficient vertex
    supports in CSR form.
    """

    def __init__(
        self,
        geometry: GridGeometry,
        mean,
        core,
        id_mean,
        expr_mean,
        id_scale,
        expr_scale,
        landmark_indices=(),
        support_indptr=None,
        support_indices=None,
        ordering_tag: str = wavelet.ORDERING_TAG,
    ):
        self.geometry = geometry
        self.mean = np.asarray(mean, dtype=float)
        self.core = np.asarray(core, dtype=float)
        self.id_mean = np.asarray(id_mean, dtype=float)
        self.expr_mean = np.asarray(expr_mean, dtype=float)
        self.id_scale = np.asarray(id_scale, dtype=float)
        self.expr_scale = np.asarray(expr_scale, dtype=float)
        self.landmark_indices = np.asarray(landmark_indices, dtype=np.int64).reshape(-1)
        self.ordering_tag = ordering_tag
        n = geometry.n_vertices
        _, _, m2, m3 = self.core.shape
        expected = {
            "mean": (n, 3),
            "core": (n, 3, m2, m3),
            "id_mean": (n, m2),
            "expr_mean": (n, m3),
            "id_scale": (n, m2),
            "expr_scale": (n, m3),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.id_scale <= 0) or np.any(self.expr_scale <= 0):
            raise DataError("component scales must be strictly positive")
        if len(self.landmark_indices) and (
            self.landmark_indices.min() < 0 or self.landmark_indices.max() >= n
        ):
            raise DataError("landmark index out of range")
        if support_indptr is None:
            mat = wavelet.synthesis_matrix(geometry)
            support_indptr, support_indices = mat.indptr, mat.indices
        self.support_indptr = np.asarray(support_indptr, dtype=np.int64)
        self.support_indices = np.asarray(support_indices, dtype=np.int64)
        if len(self.support_indptr) != n + 1:
            raise ShapeMismatch("support table does not match the coefficient count")

    @property
    def n(self) -> int:
        return self.geometry.n_vertices

    @property
    def m2(self) -> int:
        return self.core.shape[2]

    @property
    def m3(self) -> int:
        return self.core.shape[3]

    def support(self, k: int) -> np.ndarray:
        return self.support_indices[self.support_indptr[k] : self.support_indptr[k + 1]]

    def coefficient(self, k: int) -> MultilinearCoefficientModel:
        return MultilinearCoefficientModel(
            self.mean[k],
            Mode3Tensor(self.core[k]),
            self.id_mean[k],
            self.expr_mean[k],
            self.id_scale[k],
            self.expr_scale[k],
        )

    @property
    def coefficient_models(self) -> list[MultilinearCoefficientModel]:
        return [self.coefficient(k) for k in range(self.n)]

    def actual_weights(self, w: FitWeights) -> tuple[np.ndarray, np.ndarray]:
        if w.id_weights.shape != (self.n, self.m2) or w.expr_weights.shape != (self.n, self.m3):
            raise ShapeMismatch(
                f"weights {w.id_weights.shape}/{w.expr_weights.shape} do not match "
                f"model ({self.n}, {self.m2})/({self.n}, {self.m3})"
            )
        return self.id_mean + self.id_scale * w.id_weights, self.expr_mean + self.expr_scale * w.expr_weights

    def coefficients(self, w: FitWeights) -> np.ndarray:
        a2, a3 = self.actual_weights(w)
        return self.mean + np.einsum("kcjl,kj,kl->kc", self.core, a2, a3)

    def mean_shape(self) -> QuadGridShape:
        return synthesize_shape(self, FitWeights.zeros(self))

    def __eq__(self, other):
        if not isinstance(other, WaveletShapeModel):
            return NotImplemented
        arrays = (
            "mean", "core", "id_mean", "expr_mean", "id_scale", "expr_scale",
            "landmark_indices", "support_indptr", "support_indices",
        )
        return (
            self.geometry == other.geometry
            and self.ordering_tag == other.ordering_tag
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )

    def __repr__(self):
        g = self.geometry
        return f"WaveletShapeModel({g.rows}x{g.cols}, L={g.levels}, m2={self.m2}, m3={self.m3})"


def synthesize_shape(model: WaveletShapeModel, w: FitWeights) -> QuadGridShape:
    coeffs = wavelet.WaveletCoefficients(model.geometry, model.coefficients(w))
    return wavelet.inverse(coeffs)


def _record_dtype(m2: int, m3: int) -> np.dtype:
    return np.dtype(
        [
            ("mean", "<f8", (3,)),
            ("core", "<f8", (3 * m2 * m3,)),
            ("id_mean", "<f8", (m2,)),
            ("expr_mean", "<f8", (m3,)),
            ("id_scale", "<f8", (m2,)),
            ("expr_scale", "<f8", (m3,)),
        ]
    )


def serialize_model(model: WaveletShapeModel) -> bytes:
    """Little-endian byte layout, see ``docs/model_format.md``."""
    g = model.geometry
    tag = model.ordering_tag.encode("ascii")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<6I", g.rows, g.cols, g.levels, model.n, model.m2, model.m3),
        struct.pack("<I", len(tag)),
        tag,
        struct.pack("<I", len(model.landmark_indices)),
        model.landmark_indices.astype("<u4").tobytes(),
    ]
    rec = np.zeros(model.n, dtype=_record_dtype(model.m2, model.m3))
    rec["mean"] = model.mean
    # core per coefficient in the canonical mode-1-fastest layout
    rec["core"] = model.core.transpose(0, 3, 2, 1).reshape(model.n, -1)
    rec["id_mean"] = model.id_mean
    rec["expr_mean"] = model.expr_mean
    rec["id_scale"] = model.id_scale
    rec["expr_scale"] = model.expr_scale
    parts.append(rec.tobytes())
    parts.append(np.diff(model.support_indptr).astype("<u4").tobytes())
    parts.append(model.support_indices.astype("<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_model(data: bytes) -> WaveletShapeModel:
    if not MAGIC.startswith(data[:8]):
        raise DataError("not a model file (bad magic)")
    if len(data) < 12:
        raise ChecksumMismatch("model file truncated")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 16:
        raise ChecksumMismatch("model file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("model file checksum mismatch (corrupt or truncated)")
    try:
        return _parse_body(body)
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"malformed model file: {exc}") from exc


def _parse_body(body: bytes) -> WaveletShapeModel:
    off = 12
    rows, cols, levels, n, m2, m3 = struct.unpack_from("<6I", body, off)
    off += 24
    (tag_len,) = struct.unpack_from("<I", body, off)
    off += 4
    tag = body[off : off + tag_len].decode("ascii")
    off += tag_len
    (n_lmk,) = struct.unpack_from("<I", body, off)
    off += 4
    lmk = np.frombuffer(body, dtype="<u4", count=n_lmk, offset=off).astype(np.int64)
    off += 4 * n_lmk
    dt = _record_dtype(m2, m3)
    rec = np.frombuffer(body, dtype=dt, count=n, offset=off)
    off += dt.itemsize * n
    counts = np.frombuffer(body, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.frombuffer(body, dtype="<u4", count=int(indptr[-1]), offset=off).astype(np.int64)
    off += 4 * int(indptr[-1])
    if off != len(body):
        raise DataError(f"model file has {len(body) - off} unexpected trailing bytes")
    geometry = GridGeometry(rows, cols, levels)
    if geometry.n_vertices != n:
        raise DataError("coefficient count does not match the grid")
    core = rec["core"].reshape(n, m3, m2, 3).transpose(0, 3, 2, 1)
    return WaveletShapeModel(
        geometry,
        rec["mean"].copy(),
        np.ascontiguousarray(core),
        rec["id_mean"].copy(),
        rec["expr_mean"].copy(),
        rec["id_scale"].copy(),
        rec["expr_scale"].copy(),
        lmk,
        indptr,
        indices,
        tag,
    )


def save_model(model: WaveletShapeModel, path) -> None:
    try:
        Path(path).write_bytes(serialize_model(model))
    except OSError as exc:
        raise IoFailure(f"cannot write model file {path}: {exc}") from exc


def load_model(path) -> WaveletShapeModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read model file {path}: {exc}") from exc
    return deserialize_model(data)
