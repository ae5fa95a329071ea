"""Synthetic face populations, scan corruption and distance-to-data metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyScan, ShapeMismatch
from .mesh import LandmarkSet, QuadGridShape, TargetScan, unit_normals
from .model import FitWeights
from .training import TrainingFactors, TrainingSet, blend_weights

# (cx, cy, sx, sy, amplitude) Gaussian bumps in mm; y points up, row 0 is the forehead.
# Widths stay >= 9 mm so features are resolved by a 33x33 grid over 150 mm.
BASE_BUMPS = (
    (0.0, 0.0, 55.0, 65.0, 45.0),     # head dome
    (0.0, 0.0, 9.0, 16.0, 18.0),      # nose ridge
    (0.0, -12.0, 9.0, 9.0, 6.0),      # nose tip
    (-27.0, 16.0, 10.0, 9.0, -7.0),   # eye sockets
    (27.0, 16.0, 10.0, 9.0, -7.0),
    (-25.0, 30.0, 13.0, 9.0, 4.0),    # brows
    (25.0, 30.0, 13.0, 9.0, 4.0),
    (0.0, -35.0, 17.0, 9.0, 3.5),     # lips
    (0.0, -60.0, 14.0, 9.0, 4.0),     # chin
)

IDENTITY_FIELDS = (
    ((0.0, 0.0, 9.0, 16.0, 1.0), (0.0, -12.0, 9.0, 9.0, 0.5)),   # nose size
    ((0.0, 0.0, 45.0, 55.0, 1.0),),                            # face fullness
    ((-25.0, 30.0, 14.0, 9.0, 1.0), (25.0, 30.0, 14.0, 9.0, 1.0)),  # brow ridge
    ((0.0, -60.0, 14.0, 10.0, 1.0),),                          # chin
    ((-35.0, -5.0, 12.0, 12.0, 1.0), (35.0, -5.0, 12.0, 12.0, 1.0)),  # cheekbones
)

EXPRESSION_FIELDS = (
    ((-20.0, -33.0, 9.0, 9.0, 1.0), (20.0, -33.0, 9.0, 9.0, 1.0)),  # smile corners
    ((0.0, -38.0, 12.0, 9.0, -1.0),),                              # mouth open
    ((-25.0, 33.0, 13.0, 9.0, 1.0), (25.0, 33.0, 13.0, 9.0, 1.0)),  # brow raise
    ((-35.0, -20.0, 11.0, 10.0, 1.0), (35.0, -20.0, 11.0, 10.0, 1.0)),  # cheek puff
)

# nose tip, inner/outer eye corners, mouth corners, chin, brow centers
LANDMARK_POSITIONS = (
    (0.0, -12.0),
    (-14.0, 16.0), (14.0, 16.0),
    (-40.0, 16.0), (40.0, 16.0),
    (-20.0, -35.0), (20.0, -35.0),
    (0.0, -60.0),
    (-25.0, 30.0), (25.0, 30.0),
)


def _bumps(x, y, bumps) -> np.ndarray:
    z = np.zeros_like(x)
    for cx, cy, sx, sy, amp in bumps:
        z += amp * np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))
    return z


@dataclass
class SyntheticPopulationSpec:
    seed: int = 0
    rows: int = 33
    cols: int = 33
    levels: int | None = None
    d2: int = 10
    d3: int = 5
    extent: float = 150.0
    identity_sigma: float = 3.0
    expression_sigma: float = 3.0
    identity_fields: int = len(IDENTITY_FIELDS)
    expression_fields: int = len(EXPRESSION_FIELDS)
    interaction: float = 0.0
    noise_sigma: float = 0.0
    sample_density: int = 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(eq=False)
class Population:
    spec: SyntheticPopulationSpec
    xy: np.ndarray
    base: np.ndarray
    id_fields: np.ndarray
    expr_fields: np.ndarray
    id_amps: np.ndarray
    expr_amps: np.ndarray

    def height(self, id_amps, expr_amps, interaction: float | None = None) -> np.ndarray:
        c = self.spec.interaction if interaction is None else interaction
        id_part = np.tensordot(id_amps, self.id_fields, axes=1)
        expr_part = np.tensordot(expr_amps, self.expr_fields, axes=1)
        # identity-dependent expression strength
        gain = 1.0 + c * float(np.sum(id_amps)) / max(self.spec.identity_sigma, 1e-12)
        return self.base + id_part + gain * expr_part

    def shape(self, id_amps, expr_amps, interaction: float | None = None) -> QuadGridShape:
        z = self.height(np.asarray(id_amps, float), np.asarray(expr_amps, float), interaction)
        return QuadGridShape(np.dstack([self.xy, z]), self.spec.levels)

    def training_set(self) -> TrainingSet:
        return TrainingSet(
            [[self.shape(a, b) for b in self.expr_amps] for a in self.id_amps]
        )

    def random_identity(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.spec.identity_sigma, len(self.id_fields))

    def landmark_indices(self) -> np.ndarray:
        return default_landmark_indices(self.xy)


def grid_xy(rows: int, cols: int, extent: float) -> np.ndarray:
    half = extent / 2
    x = np.linspace(-half, half, cols)
    y = np.linspace(half, -half, rows)
    return np.dstack(np.meshgrid(x, y))


def default_landmark_indices(xy: np.ndarray) -> np.ndarray:
    flat = xy.reshape(-1, 2)
    idx = [int(np.argmin(np.sum((flat - p) ** 2, axis=1))) for p in LANDMARK_POSITIONS]
    return np.array(sorted(set(idx), key=idx.index), dtype=np.int64)


def make_population(spec: SyntheticPopulationSpec) -> Population:
    rng = np.random.default_rng(spec.seed)
    xy = grid_xy(spec.rows, spec.cols, spec.extent)
    x, y = xy[..., 0], xy[..., 1]
    base = _bumps(x, y, BASE_BUMPS)
    id_fields = np.array([_bumps(x, y, f) for f in IDENTITY_FIELDS[: spec.identity_fields]])
    expr_fields = np.array([_bumps(x, y, f) for f in EXPRESSION_FIELDS[: spec.expression_fields]])
    id_amps = rng.normal(0.0, spec.identity_sigma, (spec.d2, len(id_fields)))
    expr_amps = rng.normal(0.0, spec.expression_sigma, (spec.d3, len(expr_fields)))
    if spec.d3:
        expr_amps[0] = 0.0  # neutral
    return Population(spec, xy, base, id_fields, expr_fields, id_amps, expr_amps)


def generate_population(spec: SyntheticPopulationSpec) -> TrainingSet:
    """``shape(i, e) = base + sum_a id_amp[i, a] F_a + sum_b expr_amp[e, b] G_b`` as height fields."""
    return make_population(spec).training_set()


def shrink_blend(model, factors: TrainingFactors, alpha, beta, limit: float = 0.45):
    """Move convex blend vectors towards uniform until every normalized weight is within ``limit``.

    Weights are linear in the deviation from the uniform blend, which maps to
    zero, so each mode is scaled by a single factor.
    """
    alpha, beta = np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float)
    w = blend_weights(model, factors, alpha, beta)
    t2 = min(1.0, limit / max(np.max(np.abs(w.id_weights)), 1e-300))
    t3 = min(1.0, limit / max(np.max(np.abs(w.expr_weights)), 1e-300))
    return 1.0 / len(alpha) + t2 * (alpha - 1.0 / len(alpha)), 1.0 / len(beta) + t3 * (beta - 1.0 / len(beta))


def blend_shape(pop: Population, alpha, beta) -> QuadGridShape:
    """``sum_i sum_e alpha_i beta_e shape(i, e)`` for the additive population."""
    return pop.shape(np.asarray(alpha) @ pop.id_amps, np.asarray(beta) @ pop.expr_amps)


def representable_blend(
    pop: Population,
    model,
    factors: TrainingFactors,
    rng: np.random.Generator,
    limit: float = 0.45,
    concentration: float = 5.0,
) -> tuple[QuadGridShape, FitWeights]:
    """A held-out face the model reproduces exactly with weights inside ``[-limit, limit]``.

    Draws Dirichlet blends of the training identities and expressions and
    shrinks them with :func:`shrink_blend`. Returns the ground-truth shape
    and its normalized weights.
    """
    alpha = rng.dirichlet(np.full(len(pop.id_amps), concentration))
    beta = rng.dirichlet(np.full(len(pop.expr_amps), concentration))
    alpha, beta = shrink_blend(model, factors, alpha, beta, limit)
    return blend_shape(pop, alpha, beta), blend_weights(model, factors, alpha, beta)


def grid_normals(positions: np.ndarray) -> np.ndarray:
    """Unit normals of a grid surface from central differences, oriented towards +z on average."""
    d_row = np.gradient(positions, axis=0)
    d_col = np.gradient(positions, axis=1)
    n = np.cross(d_col, d_row)
    if np.sum(n[..., 2]) < 0:
        n = -n
    return unit_normals(n)


def refine_bilinear(positions: np.ndarray, density: int) -> np.ndarray:
    """Sample each quad bilinearly on a ``density x density`` lattice."""
    if density <= 1:
        return np.array(positions, dtype=float)
    rows, cols = positions.shape[:2]
    t_r = np.linspace(0, rows - 1, (rows - 1) * density + 1)
    t_c = np.linspace(0, cols - 1, (cols - 1) * density + 1)
    r0 = np.minimum(np.floor(t_r).astype(int), rows - 2)
    c0 = np.minimum(np.floor(t_c).astype(int), cols - 2)
    fr = (t_r - r0)[:, None, None]
    fc = (t_c - c0)[None, :, None]
    p00 = positions[r0][:, c0]
    p01 = positions[r0][:, c0 + 1]
    p10 = positions[r0 + 1][:, c0]
    p11 = positions[r0 + 1][:, c0 + 1]
    return (1 - fr) * ((1 - fc) * p00 + fc * p01) + fr * ((1 - fc) * p10 + fc * p11)


@dataclass
class Occlusion:
    """Sphere removing scan points; ``radius`` or ``fraction`` of points to drop."""

    center: tuple
    radius: float | None = None
    fraction: float | None = None

    def resolve_radius(self, points: np.ndarray) -> float:
        if self.radius is not None:
            return float(self.radius)
        d = np.sort(np.linalg.norm(points - np.asarray(self.center), axis=1))
        k = int(round(self.fraction * len(d)))
        if k <= 0:
            return 0.0
        return float(0.5 * (d[k - 1] + d[min(k, len(d) - 1)]))


def corrupt_scan(
    shape: QuadGridShape,
    noise_sigma: float = 0.0,
    occlusion: Occlusion | None = None,
    subsample: float = 1.0,
    seed: int = 0,
    density: int = 2,
    landmark_indices=None,
) -> TargetScan:
    """Sample an oriented point cloud from ``shape`` and corrupt it.

    Points come from bilinear refinement of the grid (vertices included);
    normals are those of the clean refined surface. Landmarks, if requested,
    are the clean vertex positions, minus any inside the occlusion.
    """
    rng = np.random.default_rng(seed)
    dense = refine_bilinear(shape.positions, density)
    normals = grid_normals(dense).reshape(-1, 3)
    points = dense.reshape(-1, 3)
    keep = np.ones(len(points), dtype=bool)
    lm = None
    if landmark_indices is not None:
        idx = np.asarray(landmark_indices, dtype=np.int64)
        lm_pts = shape.vertices[idx]
    if occlusion is not None:
        radius = occlusion.resolve_radius(points)
        keep &= np.linalg.norm(points - np.asarray(occlusion.center), axis=1) > radius
        if landmark_indices is not None:
            vis = np.linalg.norm(lm_pts - np.asarray(occlusion.center), axis=1) > radius
            idx, lm_pts = idx[vis], lm_pts[vis]
    if subsample < 1.0:
        keep &= rng.random(len(points)) < subsample
    points, normals = points[keep], normals[keep]
    if noise_sigma > 0:
        points = points + rng.normal(0.0, noise_sigma, points.shape)
    if landmark_indices is not None:
        lm = LandmarkSet(idx, lm_pts)
    return TargetScan(points, normals, lm)


@dataclass(eq=False)
class ErrorReport:
    per_vertex: np.ndarray
    mask: np.ndarray | None = None
    summary: dict = field(default_factory=dict)
    cumulative_curve: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def measured(self) -> np.ndarray:
        keep = np.ones(len(self.per_vertex), dtype=bool)
        if self.mask is not None and len(self.mask):
            keep[self.mask] = False
        return self.per_vertex[keep]

    def fraction_below(self, threshold: float) -> float:
        d = self.measured
        return float(np.mean(d < threshold)) if len(d) else float("nan")

    def to_csv(self, config: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write("# mlwave distance-to-data report\n")
        if config is not None:
            buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record", "key", "value"])
        for k, v in self.summary.items():
            w.writerow(["summary", k, repr(float(v)) if isinstance(v, float) else v])
        for t, f in self.cumulative_curve:
            w.writerow(["curve", repr(float(t)), repr(float(f))])
        return buf.getvalue()


def make_report(per_vertex, mask=None) -> ErrorReport:
    per_vertex = np.asarray(per_vertex, dtype=float)
    mask = None if mask is None else np.unique(np.asarray(mask, dtype=np.int64))
    rep = ErrorReport(per_vertex, mask)
    d = np.sort(rep.measured)
    if len(d):
        rep.summary = {
            "count": int(len(d)),
            "median_mm": float(np.median(d)),
            "mean_mm": float(np.mean(d)),
            "max_mm": float(d[-1]),
            "fraction_below_1mm": float(np.mean(d < 1.0)),
        }
        thresholds = np.unique(d)
        counts = np.searchsorted(d, thresholds, side="right")
        rep.cumulative_curve = np.column_stack([thresholds, counts / len(d)])
    else:
        rep.summary = {"count": 0}
    return rep


def distance_to_data(fitted: QuadGridShape, scan: TargetScan, mask=None) -> ErrorReport:
    """Per-vertex Euclidean distance to the nearest scan point."""
    if len(scan) == 0:
        raise EmptyScan("scan has no points")
    dist, _ = cKDTree(scan.points).query(fitted.vertices)
    return make_report(dist, mask)


def sphere_mask(shape: QuadGridShape, center, radius: float) -> np.ndarray:
    """Vertices of ``shape`` inside a sphere, for masking occluded regions."""
    d = np.linalg.norm(shape.vertices - np.asarray(center), axis=1)
    return np.flatnonzero(d <= radius)


def check_same_grid(a: QuadGridShape, b: QuadGridShape) -> None:
    if a.geometry != b.geometry:
        raise ShapeMismatch("shapes are on different grids")
