"""Learning a :class:`WaveletShapeModel` from an identity x expression grid of shapes."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import wavelet
from .errors import IncompleteGrid, InsufficientSamples, ShapeMismatch
from .mesh import QuadGridShape
from .model import SCALE_FLOOR, FitWeights, WaveletShapeModel
from .tensor import hosvd_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """``shapes[i][e]`` is identity ``i`` in expression ``e``."""

    shapes: tuple

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.shapes)
        if not rows or not rows[0]:
            raise IncompleteGrid("training set is empty")
        d3 = len(rows[0])
        for i, r in enumerate(rows):
            if len(r) != d3:
                raise IncompleteGrid(f"identity {i} has {len(r)} expressions, expected {d3}")
            for e, s in enumerate(r):
                if not isinstance(s, QuadGridShape):
                    raise IncompleteGrid(f"missing shape for identity {i}, expression {e}")
        geometry = rows[0][0].geometry
        for r in rows:
            for s in r:
                if s.geometry != geometry:
                    raise ShapeMismatch("training shapes do not share one grid geometry")
        object.__setattr__(self, "shapes", rows)

    @property
    def identities(self) -> int:
        return len(self.shapes)

    @property
    def expressions(self) -> int:
        return len(self.shapes[0])

    @property
    def geometry(self):
        return self.shapes[0][0].geometry

    def stacked(self) -> np.ndarray:
        """Positions as ``(rows, cols, 3, d2, d3)``."""
        arr = np.array([[s.positions for s in r] for r in self.shapes])
        return arr.transpose(2, 3, 4, 0, 1)


def coefficient_tensors(ts: TrainingSet) -> np.ndarray:
    """Wavelet coefficients of every training shape as ``(n, 3, d2, d3)``."""
    g = ts.geometry
    coeffs = wavelet.forward_array(ts.stacked(), g.levels)
    layout = wavelet.coefficient_layout(g)
    return coeffs.reshape((g.n_vertices,) + coeffs.shape[2:])[layout.position]


@dataclass(frozen=True, eq=False)
class TrainingFactors:
    """Per-coefficient HOSVD factors: ``u2`` is ``(n, d2, m2)``, ``u3`` is ``(n, d3, m3)``."""

    u2: np.ndarray
    u3: np.ndarray


def train(
    ts: TrainingSet,
    m2: int = 3,
    m3: int = 3,
    landmark_indices=(),
    threads: int = 1,
    chunk: int = 4096,
) -> WaveletShapeModel:
    return train_with_factors(ts, m2, m3, landmark_indices, threads, chunk)[0]


def train_with_factors(
    ts: TrainingSet,
    m2: int = 3,
    m3: int = 3,
    landmark_indices=(),
    threads: int = 1,
    chunk: int = 4096,
) -> tuple[WaveletShapeModel, TrainingFactors]:
    d2, d3 = ts.identities, ts.expressions
    if not (1 <= m2 <= d2 and 1 <= m3 <= d3):
        raise InsufficientSamples(f"need d2 >= m2 and d3 >= m3; got d2={d2}, d3={d3}, m2={m2}, m3={m3}")
    g = ts.geometry
    log.info("training on %d identities x %d expressions, %dx%d grid", d2, d3, g.rows, g.cols)
    a = coefficient_tensors(ts)
    mean = a.mean(axis=(2, 3))
    centered = a - mean[:, :, None, None]
    n = len(a)
    core = np.empty((n, 3, m2, m3))
    u2 = np.empty((n, d2, m2))
    u3 = np.empty((n, d3, m3))

    def job(sl: slice) -> None:
        c, f2, f3, _, _ = hosvd_batch(centered[sl], m2, m3)
        core[sl], u2[sl], u3[sl] = c, f2, f3

    slices = [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(job, slices))
    else:
        for sl in slices:
            job(sl)
    id_mean, expr_mean = u2.mean(axis=1), u3.mean(axis=1)
    # a truncated core evaluated at the mode-means need not vanish; folding it
    # into the offset makes the mode-means reproduce the training mean and is
    # the least-squares optimal constant for the truncated reconstruction
    mean = mean - np.einsum("kcjl,kj,kl->kc", core, id_mean, expr_mean)
    model = WaveletShapeModel(
        g,
        mean,
        core,
        id_mean,
        expr_mean,
        np.maximum(u2.std(axis=1), SCALE_FLOOR),
        np.maximum(u3.std(axis=1), SCALE_FLOOR),
        landmark_indices,
    )
    return model, TrainingFactors(u2, u3)


def blend_weights(model: WaveletShapeModel, factors: TrainingFactors, alpha, beta) -> FitWeights:
    """Normalized weights reproducing ``sum_i sum_e alpha_i beta_e shape(i, e)``.

    ``alpha`` and ``beta`` must each sum to one. When the training tensor has
    multilinear rank at most ``(m2, m3)`` per coefficient the result is exact.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if alpha.shape != (factors.u2.shape[1],) or beta.shape != (factors.u3.shape[1],):
        raise ShapeMismatch("blend vectors do not match the training dimensions")
    if abs(alpha.sum() - 1.0) > 1e-9 or abs(beta.sum() - 1.0) > 1e-9:
        raise ShapeMismatch("blend vectors must sum to one")
    a2 = np.einsum("i,kij->kj", alpha, factors.u2)
    a3 = np.einsum("e,kej->kj", beta, factors.u3)
    return FitWeights((a2 - model.id_mean) / model.id_scale, (a3 - model.expr_mean) / model.expr_scale)


def _solve_min_norm(design: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    pinv = np.linalg.pinv(design, rcond=1e-10)
    return np.einsum("kjc,kc->kj", pinv, rhs)


def project_weights(
    model: WaveletShapeModel, shape: QuadGridShape, max_iter: int = 10, tol: float = 1e-10
) -> FitWeights:
    """Per-coefficient least-squares weights by alternating least squares."""
    if shape.geometry != model.geometry:
        raise ShapeMismatch("shape is not on the model's template grid")
    target = wavelet.forward(shape).coeffs - model.mean
    w2 = np.zeros((model.n, model.m2))
    w3 = np.zeros((model.n, model.m3))
    for _ in range(max_iter):
        a3 = model.expr_mean + model.expr_scale * w3
        m2 = np.einsum("kcjl,kl->kcj", model.core, a3)
        new_w2 = _solve_min_norm(m2 * model.id_scale[:, None, :], target - np.einsum("kcj,kj->kc", m2, model.id_mean))
        a2 = model.id_mean + model.id_scale * new_w2
        m3 = np.einsum("kcjl,kj->kcl", model.core, a2)
        new_w3 = _solve_min_norm(m3 * model.expr_scale[:, None, :], target - np.einsum("kcl,kl->kc", m3, model.expr_mean))
        change = max(np.max(np.abs(new_w2 - w2)), np.max(np.abs(new_w3 - w3)))
        size = max(np.max(np.abs(new_w2)), np.max(np.abs(new_w3)), 1.0)
        w2, w3 = new_w2, new_w3
        if change <= tol * size:
            break
    return FitWeights(w2, w3)
