"""Fitting a :class:`WaveletShapeModel` to oriented point clouds and sequences.

The fitting energy is ``E_L + E_X + E_S (+ E_T)`` with the hyper-box prior
realized as optimizer bounds. Weights are optimized one coefficient at a
time, level by level from coarse to fine.

Within a block only coefficient ``k`` moves, so every vertex position is
``x_v = base_v + phi_k(v) * s_k`` with ``phi_k`` the scalar footprint of the
inverse wavelet transform. With the transform and the correspondences
frozen, every energy term is then a quadratic in the 3-vector ``s_k``; the
block objective gathers that quadratic once over the coefficient's support
and evaluates it in closed form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import wavelet
from .errors import DataError, EmptyScan
from .mesh import (
    GridGeometry,
    LandmarkSet,
    QuadGridShape,
    SimilarityTransform,
    TargetScan,
    BOUNDARY_RULES,
    apply_transform,
    bi_umbrella_matrix,
    estimate_similarity,
)
from .model import FitWeights, WaveletShapeModel, synthesize_shape
from .optim import BoxBounds, OptimizerOptions, minimize, minimize_box_quadratic

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    rho_L: float = 1.0
    tau: float = 10.0
    rho_S: float = 100.0
    # boundary rule of the umbrella stencil, "truncated" or "reflect"
    smoothing_boundary: str = "truncated"
    lambda_init: float = 1.0
    lambda_surface: float = 0.5
    rho_T: float = 1.0
    init_iterations: int = 3
    surface_passes: int = 3
    # exact rounds over all identity and expression weights after the block passes
    polish_rounds: int = 1
    polish_iterations: int = 20
    # tracking polishes every frame so that a repeated frame is a fixed point
    track_polish_rounds: int = 20
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    initial_transform: SimilarityTransform | None = None

    def __post_init__(self):
        for name in ("rho_L", "rho_S", "lambda_init", "lambda_surface", "rho_T"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if self.smoothing_boundary not in BOUNDARY_RULES:
            raise DataError(f"smoothing_boundary must be one of {BOUNDARY_RULES}")
        if not self.tau > 0:
            raise DataError("tau must be > 0")
        for name in ("init_iterations", "surface_passes", "polish_rounds", "polish_iterations", "track_polish_rounds"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "rho_L", "tau", "rho_S", "smoothing_boundary", "lambda_init", "lambda_surface", "rho_T",
                "init_iterations", "surface_passes", "polish_rounds", "polish_iterations",
                "track_polish_rounds",
            )
        }
        o = self.optimizer
        out["optimizer"] = {"max_iters": o.max_iters, "grad_tol": o.grad_tol, "memory": o.memory}
        return out


@dataclass
class PassRecord:
    """Total energy at the start of a pass and after each block solve."""

    step: str
    level: int
    iteration: int
    energies: np.ndarray


@dataclass(eq=False)
class FitResult:
    weights: FitWeights
    transform: SimilarityTransform
    fitted_shape: QuadGridShape
    energy_trace: list[PassRecord]
    per_vertex_distance: np.ndarray
    status: list[str] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    bounds: BoxBounds | None = None

    def aligned_shape(self) -> QuadGridShape:
        """Fitted surface mapped into the scan's frame."""
        return self.fitted_shape.with_vertices(apply_transform(self.transform, self.fitted_shape.vertices))


@dataclass(eq=False)
class Correspondences:
    """Nearest scan point, its normal and the robust weight, per model vertex."""

    points: np.ndarray
    normals: np.ndarray
    active: np.ndarray


def find_correspondences(
    aligned_vertices: np.ndarray, scan: TargetScan, tau: float, tree: cKDTree | None = None
) -> Correspondences:
    if len(scan) == 0:
        raise EmptyScan("scan has no points")
    tree = tree if tree is not None else cKDTree(scan.points)
    dist, idx = tree.query(aligned_vertices)
    return Correspondences(scan.points[idx], scan.normals[idx], dist <= tau)


def _landmarks(scan: TargetScan, n_vertices: int) -> LandmarkSet | None:
    lm = scan.landmarks
    if lm is None or len(lm) == 0:
        return None
    lm.check_range(n_vertices)
    return lm


# --- full-surface energies ---------------------------------------------------


def weights_gradient(model: WaveletShapeModel, weights: FitWeights, grad_coeffs: np.ndarray) -> FitWeights:
    """Chain ``dE/ds_k`` (``(n, 3)``) to normalized weights."""
    a2, a3 = model.actual_weights(weights)
    c3 = np.einsum("kcjl,kl->kcj", model.core, a3)
    c2 = np.einsum("kcjl,kj->kcl", model.core, a2)
    g2 = model.id_scale * np.einsum("kc,kcj->kj", grad_coeffs, c3)
    g3 = model.expr_scale * np.einsum("kc,kcl->kl", grad_coeffs, c2)
    return FitWeights(g2, g3)


def positions_to_weights_gradient(model: WaveletShapeModel, weights: FitWeights, grad_vertices) -> FitWeights:
    """Chain ``dE/dx`` (``(V, 3)``) through the inverse wavelet transform."""
    phi = wavelet.synthesis_matrix(model.geometry)
    return weights_gradient(model, weights, phi.T @ np.asarray(grad_vertices).reshape(-1, 3))


def landmark_energy(
    model: WaveletShapeModel,
    weights: FitWeights,
    transform: SimilarityTransform,
    landmarks: LandmarkSet,
    rho_L: float = 1.0,
) -> tuple[float, FitWeights]:
    """``rho_L * |X| / |L| * sum ||R l_m - l_d||^2`` and its weight gradient."""
    landmarks.check_range(model.n)
    x = synthesize_shape(model, weights).vertices
    c = rho_L * model.n / len(landmarks)
    r = apply_transform(transform, x[landmarks.model_indices]) - landmarks.data_points
    value = c * float(np.sum(r**2))
    gx = np.zeros_like(x)
    gx[landmarks.model_indices] = 2 * c * transform.scale * (r @ transform.rotation)
    return value, positions_to_weights_gradient(model, weights, gx)


def surface_energy(
    model: WaveletShapeModel,
    weights: FitWeights,
    transform: SimilarityTransform,
    scan: TargetScan,
    nn_index: cKDTree | None = None,
    tau: float = 10.0,
    correspondences: Correspondences | None = None,
) -> tuple[float, FitWeights]:
    """Point-to-plane energy over non-landmark vertices.

    Correspondences (nearest point, normal, robust weight) are computed from
    the current state unless given; the gradient treats them as fixed.
    """
    x = synthesize_shape(model, weights).vertices
    value, gx = _surface_terms(x, transform, scan, nn_index, tau, correspondences)
    return value, positions_to_weights_gradient(model, weights, gx)


def _surface_terms(x, transform, scan, nn_index, tau, correspondences):
    if len(scan) == 0:
        raise EmptyScan("scan has no points")
    y = apply_transform(transform, x)
    corr = correspondences or find_correspondences(y, scan, tau, nn_index)
    weight = corr.active.astype(float)
    lm = _landmarks(scan, len(x))
    if lm is not None:
        weight[lm.model_indices] = 0.0
    dist = np.sum((y - corr.points) * corr.normals, axis=1)
    value = float(np.sum(weight * dist**2))
    gy = (2 * weight * dist)[:, None] * corr.normals
    return value, transform.scale * (gy @ transform.rotation)


def smoothing_energy(shape: QuadGridShape, rho_S: float, boundary: str = "truncated") -> tuple[float, np.ndarray]:
    """``rho_S * sum ||U^2(x)||^2`` and its gradient with respect to positions."""
    if rho_S == 0:
        return 0.0, np.zeros_like(shape.positions)
    b = bi_umbrella_matrix(shape.rows, shape.cols, boundary)
    bx = b @ shape.vertices
    grad = 2 * rho_S * (b.T @ bx)
    return rho_S * float(np.sum(bx**2)), grad.reshape(shape.positions.shape)


def temporal_energy(shape: QuadGridShape, previous: QuadGridShape, rho_T: float) -> tuple[float, np.ndarray]:
    d = shape.positions - previous.positions
    return rho_T * float(np.sum(d**2)), 2 * rho_T * d


def prior_bounds(model: WaveletShapeModel, lam: float, current_weights: FitWeights | None = None) -> BoxBounds:
    """Hyper-box ``[-lam, lam]`` per normalized component, as ``(n, m2 + m3)`` flattened.

    A component of ``current_weights`` already outside the box stretches
    its side of the box to include it.
    """
    if lam <= 0:
        raise DataError("lambda must be > 0")
    d = model.m2 + model.m3
    lower = np.full((model.n, d), -float(lam))
    upper = np.full((model.n, d), float(lam))
    if current_weights is not None:
        cur = np.hstack([current_weights.id_weights, current_weights.expr_weights])
        lower = np.minimum(lower, cur)
        upper = np.maximum(upper, cur)
    return BoxBounds(lower.ravel(), upper.ravel())


def block_bounds(bounds: BoxBounds, model: WaveletShapeModel, k: int) -> BoxBounds:
    d = model.m2 + model.m3
    return BoxBounds(bounds.lower[k * d : (k + 1) * d], bounds.upper[k * d : (k + 1) * d])


# --- block-coordinate engine -----------------------------------------------


@lru_cache(maxsize=8)
def smoothing_columns(geometry: GridGeometry, boundary: str = "truncated") -> sp.csc_matrix:
    """``B @ Phi``: bi-umbrella response of each coefficient's footprint."""
    b = bi_umbrella_matrix(geometry.rows, geometry.cols, boundary)
    out = (b @ wavelet.synthesis_matrix(geometry)).tocsc()
    out.eliminate_zeros()
    out.sort_indices()
    return out


@dataclass
class _Terms:
    landmark: bool = False
    surface: bool = False
    smooth: bool = False
    temporal: bool = False


class BlockFitter:
    """Mutable fitting state shared by :func:`fit` and :func:`track`."""

    def __init__(
        self,
        model: WaveletShapeModel,
        scan: TargetScan,
        config: FitConfig,
        weights: FitWeights | None = None,
        transform: SimilarityTransform | None = None,
        previous: np.ndarray | None = None,
        frozen_identity: bool = False,
    ):
        if len(scan) == 0:
            raise EmptyScan("scan has no points")
        self.model = model
        self.scan = scan
        self.cfg = config
        self.geometry = model.geometry
        self.phi = wavelet.synthesis_matrix(self.geometry)
        self.weights = weights.copy() if weights is not None else FitWeights.zeros(model)
        self.transform = transform or config.initial_transform or SimilarityTransform.identity()
        self.previous = None if previous is None else np.asarray(previous, dtype=float).reshape(-1, 3)
        self.frozen_identity = frozen_identity
        self.tree = cKDTree(scan.points)
        self.landmarks = _landmarks(scan, model.n)
        self.is_landmark = np.zeros(model.n, dtype=bool)
        self.landmark_slot = np.full(model.n, -1, dtype=np.int64)
        if self.landmarks is not None:
            self.is_landmark[self.landmarks.model_indices] = True
            self.landmark_slot[self.landmarks.model_indices] = np.arange(len(self.landmarks))
        self.smooth_cols = smoothing_columns(self.geometry, config.smoothing_boundary) if config.rho_S > 0 else None
        self.bmat = bi_umbrella_matrix(self.geometry.rows, self.geometry.cols, config.smoothing_boundary) if config.rho_S > 0 else None
        self.corr: Correspondences | None = None
        self.trace: list[PassRecord] = []
        self.distance_evals = np.zeros(model.n, dtype=np.int64)
        self.block_solves = 0
        self.objective_evals = 0
        self.refresh()

    # state bookkeeping
    def refresh(self) -> None:
        """Recompute coefficients, positions and the bi-umbrella field from the weights."""
        self.S = self.model.coefficients(self.weights)
        self.X = wavelet.inverse_batch(self.S, self.geometry)
        if self.bmat is not None:
            self.BX = self.bmat @ self.X

    def shape(self) -> QuadGridShape:
        return QuadGridShape.from_vertices(self.X, self.geometry)

    def update_correspondences(self) -> None:
        self.corr = find_correspondences(
            apply_transform(self.transform, self.X), self.scan, self.cfg.tau, self.tree
        )

    def estimate_transform(self) -> None:
        lm = self.landmarks
        self.transform = estimate_similarity(self.X[lm.model_indices], lm.data_points)

    def position_energy(self, x: np.ndarray, terms: _Terms, gradient: bool = True):
        """Energy of vertex positions ``x`` (``(V, 3)``) and, optionally, ``dE/dx``."""
        cfg = self.cfg
        sigma, q, t = self.transform.scale, self.transform.rotation, self.transform.translation
        e = 0.0
        g = np.zeros_like(x) if gradient else None
        if terms.landmark and self.landmarks is not None:
            lm = self.landmarks
            w = cfg.rho_L * self.model.n / len(lm)
            r = sigma * x[lm.model_indices] @ q.T + t - lm.data_points
            e += w * float(np.sum(r**2))
            if gradient:
                np.add.at(g, lm.model_indices, 2 * w * sigma * (r @ q))
        if terms.surface:
            act = self.corr.active & ~self.is_landmark
            y = sigma * x[act] @ q.T + t
            d = np.sum((y - self.corr.points[act]) * self.corr.normals[act], axis=1)
            e += float(d @ d)
            if gradient:
                g[act] += 2 * sigma * d[:, None] * (self.corr.normals[act] @ q)
        if terms.smooth and self.bmat is not None:
            bx = self.bmat @ x
            e += cfg.rho_S * float(np.sum(bx**2))
            if gradient:
                g += 2 * cfg.rho_S * (self.bmat.T @ bx)
        if terms.temporal and self.previous is not None:
            dx = x - self.previous
            e += cfg.rho_T * float(np.sum(dx**2))
            if gradient:
                g += 2 * cfg.rho_T * dx
        return e, g

    def total_energy(self, terms: _Terms) -> float:
        return self.position_energy(self.X, terms, gradient=False)[0]

    def mode_weights(self, mode: str) -> np.ndarray:
        """The live ``(n, m)`` weight array of ``mode`` ("id" or "expr")."""
        if mode == "id":
            return self.weights.id_weights
        if mode == "expr":
            return self.weights.expr_weights
        raise DataError(f"unknown weight mode {mode!r}")

    def mode_bounds(self, bounds: BoxBounds, mode: str) -> BoxBounds:
        m = self.model
        d = m.m2 + m.m3
        cols = slice(0, m.m2) if mode == "id" else slice(m.m2, d)
        return BoxBounds(bounds.lower.reshape(-1, d)[:, cols].ravel(), bounds.upper.reshape(-1, d)[:, cols].ravel())

    def mode_system(self, terms: _Terms, mode: str):
        """Hessian and gradient of the energy in the weights of one mode.

        With the other mode's weights, the transform and correspondences
        frozen, every vertex is affine in this mode's weights, so the energy
        is exactly ``||J w - r||^2``; returns ``(2 J^T J, 2 J^T r)`` at the
        current state.
        """
        cfg, m = self.cfg, self.model
        sigma, q, t = self.transform.scale, self.transform.rotation, self.transform.translation
        a2, a3 = m.actual_weights(self.weights)
        if mode == "expr":
            lin = np.einsum("kcjl,kj->kcl", m.core, a2) * m.expr_scale[:, None, :]
        elif mode == "id":
            lin = np.einsum("kcjl,kl->kcj", m.core, a3) * m.id_scale[:, None, :]
        else:
            raise DataError(f"unknown weight mode {mode!r}")
        width = lin.shape[2]
        cols = np.arange(m.n * width)
        rows = np.repeat(np.arange(m.n), width)
        jc = [(self.phi @ sp.csr_matrix((lin[:, c, :].ravel(), (rows, cols)), shape=(m.n, m.n * width))).tocsr()
              for c in range(3)]
        blocks, resid = [], []
        if terms.landmark and self.landmarks is not None:
            lm = self.landmarks
            w = np.sqrt(cfg.rho_L * m.n / len(lm))
            r = sigma * self.X[lm.model_indices] @ q.T + t - lm.data_points
            for i in range(3):
                blocks.append(w * sigma * sum(q[i, c] * jc[c][lm.model_indices] for c in range(3)))
                resid.append(w * r[:, i])
        if terms.surface:
            act = np.flatnonzero(self.corr.active & ~self.is_landmark)
            nq = sigma * (self.corr.normals[act] @ q)
            y = sigma * self.X[act] @ q.T + t
            blocks.append(sum(sp.diags(nq[:, c]) @ jc[c][act] for c in range(3)))
            resid.append(np.sum((y - self.corr.points[act]) * self.corr.normals[act], axis=1))
        if terms.smooth and self.bmat is not None:
            w = np.sqrt(cfg.rho_S)
            for c in range(3):
                blocks.append(w * (self.bmat @ jc[c]))
                resid.append(w * self.BX[:, c])
        if terms.temporal and self.previous is not None:
            w = np.sqrt(cfg.rho_T)
            for c in range(3):
                blocks.append(w * jc[c])
                resid.append(w * (self.X[:, c] - self.previous[:, c]))
        jac = sp.vstack(blocks).tocsr()
        r = np.concatenate(resid)
        return (2.0 * (jac.T @ jac)).tocsc(), 2.0 * (jac.T @ r)

    def _quadratic(self, k: int, terms: _Terms):
        """``(H, b, c)`` with block energy ``s^T H s + 2 b^T s + c``."""
        cfg = self.cfg
        lo, hi = self.phi.indptr[k], self.phi.indptr[k + 1]
        idx = self.phi.indices[lo:hi]
        f = self.phi.data[lo:hi]
        s_cur = self.S[k]
        base = self.X[idx] - f[:, None] * s_cur
        sigma, q, t = self.transform.scale, self.transform.rotation, self.transform.translation
        h = np.zeros((3, 3))
        b = np.zeros(3)
        c = 0.0
        iso = 0.0
        lm_mask = self.is_landmark[idx]
        if terms.landmark and self.landmarks is not None and lm_mask.any():
            w = cfg.rho_L * self.model.n / len(self.landmarks)
            fl = sigma * f[lm_mask]
            e = sigma * base[lm_mask] @ q.T + t - self.landmarks.data_points[self.landmark_slot[idx[lm_mask]]]
            iso += w * float(fl @ fl)
            b += w * (fl @ (e @ q))
            c += w * float(np.sum(e**2))
        if terms.surface:
            self.distance_evals[k] += len(idx)
            sm = ~lm_mask
            act = self.corr.active[idx[sm]].astype(float)
            nrm = self.corr.normals[idx[sm]]
            a = (sigma * f[sm] * act)[:, None] * (nrm @ q)
            e = act * np.sum((sigma * base[sm] @ q.T + t - self.corr.points[idx[sm]]) * nrm, axis=1)
            h += a.T @ a
            b += a.T @ e
            c += float(e @ e)
        if terms.smooth and self.smooth_cols is not None:
            slo, shi = self.smooth_cols.indptr[k], self.smooth_cols.indptr[k + 1]
            region = self.smooth_cols.indices[slo:shi]
            g = self.smooth_cols.data[slo:shi]
            b0 = self.BX[region] - g[:, None] * s_cur
            iso += cfg.rho_S * float(g @ g)
            b += cfg.rho_S * (g @ b0)
            c += cfg.rho_S * float(np.sum(b0**2))
        if terms.temporal and self.previous is not None:
            d = base - self.previous[idx]
            iso += cfg.rho_T * float(f @ f)
            b += cfg.rho_T * (f @ d)
            c += cfg.rho_T * float(np.sum(d**2))
        h[np.diag_indices(3)] += iso
        return h, b, c

    def block_objective(self, k: int, terms: _Terms):
        """Objective over the block's free weights plus the frozen quadratic."""
        h, b, c = self._quadratic(k, terms)
        m = self.model
        core = m.core[k]
        mean = m.mean[k]
        mm2, sc2, mm3, sc3 = m.id_mean[k], m.id_scale[k], m.expr_mean[k], m.expr_scale[k]
        m2 = m.m2
        fixed_a2 = mm2 + sc2 * self.weights.id_weights[k]

        def coeff(x):
            if self.frozen_identity:
                a2, a3 = fixed_a2, mm3 + sc3 * x
            else:
                a2, a3 = mm2 + sc2 * x[:m2], mm3 + sc3 * x[m2:]
            c3 = core @ a3
            return a2, a3, c3, mean + c3 @ a2

        def f(x):
            a2, a3, c3, s = coeff(x)
            hs = h @ s
            gs = 2.0 * (hs + b)
            value = float(s @ hs + 2.0 * b @ s + c)
            g3 = sc3 * (gs @ np.einsum("cjl,j->cl", core, a2))
            if self.frozen_identity:
                return value, g3
            return value, np.concatenate([sc2 * (gs @ c3), g3])

        return f, coeff

    def solve_block(self, k: int, terms: _Terms, bounds: BoxBounds) -> float:
        """Optimize coefficient ``k``; returns the energy decrease."""
        f, coeff = self.block_objective(k, terms)
        m2 = self.model.m2
        x0 = self.weights.flat(k)
        bb = block_bounds(bounds, self.model, k)
        if self.frozen_identity:
            x0, bb = x0[m2:], BoxBounds(bb.lower[m2:], bb.upper[m2:])
        res = minimize(f, x0, bb, self.cfg.optimizer)
        self.block_solves += 1
        self.objective_evals += res.evaluations
        decrease = res.values[0] - res.value
        if self.frozen_identity:
            self.weights.expr_weights[k] = res.x
        else:
            self.weights.id_weights[k] = res.x[:m2]
            self.weights.expr_weights[k] = res.x[m2:]
        s_new = coeff(res.x)[3]
        delta = s_new - self.S[k]
        if np.any(delta):
            lo, hi = self.phi.indptr[k], self.phi.indptr[k + 1]
            self.X[self.phi.indices[lo:hi]] += self.phi.data[lo:hi, None] * delta
            if self.smooth_cols is not None:
                slo, shi = self.smooth_cols.indptr[k], self.smooth_cols.indptr[k + 1]
                self.BX[self.smooth_cols.indices[slo:shi]] += self.smooth_cols.data[slo:shi, None] * delta
            self.S[k] = s_new
        return decrease

    def run_pass(self, step: str, level: int, iteration: int, terms: _Terms, bounds: BoxBounds, ks) -> float:
        """One sweep over coefficients ``ks``; returns the largest weight change."""
        start = self.total_energy(terms)
        energies = [start]
        biggest = 0.0
        for k in ks:
            before = self.weights.flat(k)
            energies.append(energies[-1] - self.solve_block(k, terms, bounds))
            biggest = max(biggest, float(np.max(np.abs(self.weights.flat(k) - before))))
        self.trace.append(PassRecord(step, level, iteration, np.asarray(energies)))
        return biggest

    def level_ranges(self) -> list[range]:
        layout = wavelet.coefficient_layout(self.geometry)
        return [range(s.start, s.stop) for s in layout.level_slices()]

    def counters(self) -> dict:
        return {
            "distance_evals": self.distance_evals.copy(),
            "block_solves": self.block_solves,
            "objective_evals": self.objective_evals,
        }


def _initialize(fitter: BlockFitter, cfg: FitConfig) -> None:
    terms = _Terms(landmark=True, smooth=cfg.rho_S > 0)
    bounds = prior_bounds(fitter.model, cfg.lambda_init)
    for level, ks in enumerate(fitter.level_ranges()):
        for it in range(cfg.init_iterations):
            fitter.refresh()
            fitter.estimate_transform()
            fitter.run_pass("init", level, it, terms, bounds, ks)


def _surface_terms_for(fitter: BlockFitter, cfg: FitConfig, temporal: bool) -> _Terms:
    return _Terms(landmark=fitter.landmarks is not None, surface=True, smooth=cfg.rho_S > 0, temporal=temporal)


def _surface_fit(
    fitter: BlockFitter,
    cfg: FitConfig,
    bounds: BoxBounds,
    temporal: bool,
    step: str,
    polish_rounds: int,
    modes=("expr",),
    max_iters: int = 500,
) -> bool | None:
    terms = _surface_terms_for(fitter, cfg, temporal)
    for level, ks in enumerate(fitter.level_ranges()):
        for it in range(cfg.surface_passes):
            fitter.refresh()
            fitter.update_correspondences()
            fitter.run_pass(step, level, it, terms, bounds, ks)
    converged = None
    if polish_rounds > 0:
        converged = _polish(fitter, cfg, terms, bounds, polish_rounds, step + "-polish", modes, max_iters)
    fitter.refresh()
    return converged


def _polish(
    fitter: BlockFitter,
    cfg: FitConfig,
    terms: _Terms,
    bounds: BoxBounds,
    rounds: int,
    step: str,
    modes=("expr",),
    max_iters: int = 500,
) -> bool:
    """Exact minimization over all weights of each mode in ``modes``, alternating with correspondence updates.

    Each round freezes the nearest neighbors and, mode by mode, solves the
    box QP in that mode's weights with the other mode held fixed. Polishing
    stops once a round starts at a stationary point of the freshly rebuilt
    energy in every mode; the tolerance sits below the block tolerance, so
    block passes on unchanged data afterwards leave the state untouched.
    Returns whether that fixed point was reached.
    """
    tol = 0.1 * cfg.optimizer.grad_tol
    for r in range(rounds):
        fitter.refresh()
        fitter.update_correspondences()
        settled = True
        for mode in modes:
            start = fitter.total_energy(terms)
            h, g = fitter.mode_system(terms, mode)
            # H = 2 J^T J gives |g_i| <= sqrt(2 H_ii E); variables whose bound stays
            # under a tenth of the tolerance for every E <= start are left out
            relevant = np.flatnonzero(np.sqrt(2.0 * h.diagonal() * start) > 0.1 * tol)
            live = fitter.mode_weights(mode)
            x = live.ravel().copy()
            box = fitter.mode_bounds(bounds, mode)
            res = minimize_box_quadratic(
                h[relevant][:, relevant],
                g[relevant],
                x[relevant],
                BoxBounds(box.lower[relevant], box.upper[relevant]),
                grad_tol=tol,
                max_iters=max_iters,
            )
            x[relevant] = res.x
            fitter.trace.append(PassRecord(f"{step}-{mode}", -1, r, np.array([start, start + res.value_change])))
            if res.iterations == 0 and res.converged:
                continue
            settled = False
            live[:] = x.reshape(live.shape)
            fitter.refresh()
        if settled:
            fitter.refresh()
            return True
    fitter.refresh()
    log.info("polishing stopped after %d rounds without reaching a fixed point", rounds)
    return False


def _result(fitter: BlockFitter, status: list[str], bounds: BoxBounds) -> FitResult:
    fitted = synthesize_shape(fitter.model, fitter.weights)
    aligned = apply_transform(fitter.transform, fitted.vertices)
    dist, _ = fitter.tree.query(aligned)
    return FitResult(
        fitter.weights.copy(),
        fitter.transform,
        fitted,
        fitter.trace,
        dist,
        status,
        fitter.counters(),
        bounds,
    )


def fit(model: WaveletShapeModel, scan: TargetScan, config: FitConfig | None = None) -> FitResult:
    """Two-step fit: landmark initialization, then surface fitting.

    Step 1 alternates a similarity estimate from the landmarks with
    per-coefficient minimization of ``E_L + E_S`` inside the ``lambda_init``
    box, level by level. Step 2 freezes the transform and minimizes
    ``E_L + E_X + E_S`` inside the ``lambda_surface`` box, rebuilding nearest
    neighbors before each pass. Step 2 ends with ``polish_rounds`` exact box
    QP solves over all identity weights, then all expression weights.
    """
    return _fit(model, scan, config or FitConfig())[0]


def _fit(model: WaveletShapeModel, scan: TargetScan, cfg: FitConfig) -> tuple[FitResult, BlockFitter]:
    fitter = BlockFitter(model, scan, cfg)
    status: list[str] = []
    lm = fitter.landmarks
    if lm is not None and len(lm) >= 3:
        _initialize(fitter, cfg)
    else:
        status.append("no_landmarks: initialization skipped, using the configured transform")
        log.warning("scan has fewer than 3 landmarks; skipping landmark initialization")
    bounds = prior_bounds(model, cfg.lambda_surface, fitter.weights)
    _surface_fit(fitter, cfg, bounds, False, "surface", cfg.polish_rounds, ("id", "expr"), cfg.polish_iterations)
    status.append("ok")
    return _result(fitter, status, bounds), fitter


def _frame_motion(prev: LandmarkSet | None, cur: LandmarkSet | None) -> SimilarityTransform | None:
    """Similarity moving the previous frame's data landmarks onto the current ones."""
    if prev is None or cur is None:
        return None
    common, ip, ic = np.intersect1d(prev.model_indices, cur.model_indices, return_indices=True)
    if len(common) < 3:
        return None
    a, b = prev.data_points[ip], cur.data_points[ic]
    if np.array_equal(a, b):
        return None
    return estimate_similarity(a, b)


def track(model: WaveletShapeModel, frames, config: FitConfig | None = None) -> list[FitResult]:
    """Fit a sequence with identity weights frozen after the first frame.

    Frames after the first start from the previous frame's weights and add
    ``E_T = rho_T * sum ||x_t - x_{t-1}||^2`` to surface fitting. The
    transform follows the rigid motion of the data landmarks between frames.
    Every frame ends with joint polishing of the expression weights, so that
    each frame is a stationary point of its energy.
    """
    cfg = config or FitConfig()
    frames = list(frames)
    if not frames:
        return []
    if frames[0].landmarks is None or len(frames[0].landmarks) < 3:
        raise DataError("the first frame needs at least 3 landmarks")
    first, fitter = _fit(model, frames[0], cfg)
    bounds = first.bounds
    if cfg.track_polish_rounds > 0:
        fitter.frozen_identity = True
        ok = _polish(fitter, cfg, _surface_terms_for(fitter, cfg, False), bounds, cfg.track_polish_rounds, "track-polish")
        first = _result(fitter, first.status + ([] if ok else ["polish: no fixed point"]), bounds)
    results = [first]
    last_landmarks = frames[0].landmarks
    for t, frame in enumerate(frames[1:], start=1):
        prev = results[-1]
        transform = prev.transform
        motion = _frame_motion(last_landmarks, frame.landmarks)
        if motion is not None:
            transform = motion.compose(transform)
        if frame.landmarks is not None and len(frame.landmarks):
            last_landmarks = frame.landmarks
        fitter = BlockFitter(
            model,
            frame,
            cfg,
            weights=prev.weights,
            transform=transform,
            previous=prev.fitted_shape.vertices,
            frozen_identity=True,
        )
        ok = _surface_fit(fitter, cfg, bounds, cfg.rho_T > 0, "track", cfg.track_polish_rounds)
        status = [f"frame {t}"] + (["polish: no fixed point"] if ok is False else []) + ["ok"]
        results.append(_result(fitter, status, bounds))
    return results
