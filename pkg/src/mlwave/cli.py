"""Command-line entry point: ``mlwave {train,fit,track,transform,synth,eval}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure. Diagnostics go to standard error; results only to the files named
on the command line.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from . import wavelet
from .errors import DataError, IncompleteGrid, IoFailure, NumericalError
from .evalkit import (
    Occlusion,
    SyntheticPopulationSpec,
    corrupt_scan,
    distance_to_data,
    make_population,
)
from .fitting import FitConfig, fit, track
from .model import load_model, save_model
from .optim import OptimizerOptions
from .training import TrainingSet, train

log = logging.getLogger("mlwave")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# flag name -> FitConfig field
FIT_FLAGS = {
    "rho_s": "rho_S",
    "smoothing_boundary": "smoothing_boundary",
    "rho_l": "rho_L",
    "tau": "tau",
    "lambda_init": "lambda_init",
    "lambda_surface": "lambda_surface",
    "rho_t": "rho_T",
    "init_iterations": "init_iterations",
    "surface_passes": "surface_passes",
    "polish_rounds": "polish_rounds",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", metavar="JSON", help="JSON file of fit settings; flags override it")
    g.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    v = g.add_mutually_exclusive_group()
    v.add_argument("-v", "--verbose", action="store_true", help="log progress")
    v.add_argument("-q", "--quiet", action="store_true", help="log errors only")
    return p


def _fit_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fit settings (override --config)")
    g.add_argument("--rho-s", type=float, help="smoothing weight, 0 or 100 (default 100)")
    g.add_argument("--smoothing-boundary", choices=("truncated", "reflect"),
                   help="umbrella stencil at the grid boundary (default truncated)")
    g.add_argument("--rho-l", type=float, help="landmark weight (default 1)")
    g.add_argument("--tau", type=float, help="correspondence distance threshold in mm (default 10)")
    g.add_argument("--lambda-init", type=float, help="weight box during initialization (default 1)")
    g.add_argument("--lambda-surface", type=float, help="weight box during surface fitting (default 0.5)")
    g.add_argument("--rho-t", type=float, help="temporal weight for tracking (default 1)")
    g.add_argument("--init-iterations", type=int, help="initialization iterations per level (default 3)")
    g.add_argument("--surface-passes", type=int, help="surface passes per level (default 3)")
    g.add_argument("--polish-rounds", type=int, help="exact polishing rounds after the passes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="mlwave", description="Wavelet-domain multilinear face models: training, fitting and evaluation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("train", parents=[common], help="train a model from a manifest of grid OBJ files")
    s.add_argument("--input", required=True, metavar="MANIFEST", help="lines 'identity_id expression_id path'")
    s.add_argument("--m2", type=int, default=3, help="identity modes kept (default 3)")
    s.add_argument("--m3", type=int, default=3, help="expression modes kept (default 3)")
    s.add_argument("--landmark-indices", metavar="FILE", help="template landmark vertex indices, one per line")
    s.add_argument("--out", required=True, metavar="MODEL", help="output model file (.mwm)")

    s = sub.add_parser("fit", parents=[common], help="fit a model to an oriented point cloud")
    s.add_argument("--model", required=True)
    s.add_argument("--scan", required=True, metavar="PLY")
    s.add_argument("--landmarks", metavar="FILE", help="lines 'model_index x y z'")
    s.add_argument("--out", required=True, metavar="OBJ", help="fitted surface in the scan frame")
    s.add_argument("--report", metavar="CSV", help="distance-to-data report")
    _fit_options(s)

    s = sub.add_parser("track", parents=[common], help="track a sequence of scans")
    s.add_argument("--model", required=True)
    s.add_argument("--frames", required=True, metavar="MANIFEST", help="lines 'scan.ply [landmarks.txt]'")
    s.add_argument("--landmarks", metavar="FILE", help="landmarks of the first frame")
    s.add_argument("--out-dir", required=True, help="directory for frame_NNN.obj and track.csv")
    _fit_options(s)

    s = sub.add_parser("transform", parents=[common], help="write the wavelet coefficients of a grid OBJ as CSV")
    s.add_argument("--input", required=True, metavar="OBJ")
    s.add_argument("--out", required=True, metavar="CSV", help="CSV path, or - for standard output")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic population and held-out scans")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--rows", type=int, default=33)
    s.add_argument("--cols", type=int, default=33)
    s.add_argument("--d2", type=int, default=10, help="identities (default 10)")
    s.add_argument("--d3", type=int, default=5, help="expressions (default 5)")
    s.add_argument("--held-out", type=int, default=1, help="held-out scans to write (default 1)")
    s.add_argument("--noise", type=float, default=0.0, help="scan noise sigma in mm")
    s.add_argument("--density", type=int, default=2, help="scan samples per grid edge")
    s.add_argument("--occlusion", type=float, default=0.0, help="fraction of scan points removed by a sphere")
    s.add_argument("--frames", type=int, default=0, help="also write a tracking sequence of this many frames")

    s = sub.add_parser("eval", parents=[common], help="distance-to-data report of a fitted OBJ against a scan")
    s.add_argument("--fitted", required=True, metavar="OBJ")
    s.add_argument("--scan", required=True, metavar="PLY")
    s.add_argument("--mask", metavar="FILE", help="vertex indices to exclude, one per line")
    s.add_argument("--out", required=True, metavar="CSV", help="CSV path, or - for standard output")
    return p


def fit_config(args) -> FitConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(mio.read_text(args.config))
        except json.JSONDecodeError as exc:
            raise IoFailure(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise IoFailure(f"{args.config}: expected a JSON object")
        values.update(loaded)
    for flag, name in FIT_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    names = {f.name for f in dataclasses.fields(FitConfig)} - {"optimizer", "initial_transform"}
    unknown = set(values) - names - {"optimizer"}
    if unknown:
        raise DataError(f"unknown fit settings: {sorted(unknown)}")
    opt = values.pop("optimizer", {})
    try:
        optimizer = OptimizerOptions(**opt)
    except TypeError as exc:
        raise DataError(f"bad optimizer settings: {exc}") from exc
    return FitConfig(optimizer=optimizer, **values)


def _header(command: str, config: dict) -> str:
    return f"# mlwave {command}\n# config: {json.dumps(config, sort_keys=True)}\n"


def _csv(rows) -> str:
    buf = _io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v))


def load_training_set(manifest) -> TrainingSet:
    ids, exprs, table = mio.read_training_manifest(manifest)
    rows = []
    for i in ids:
        row = []
        for e in exprs:
            if (i, e) not in table:
                raise IncompleteGrid(f"manifest has no shape for identity {i}, expression {e}")
            row.append(mio.read_obj(table[(i, e)]))
        rows.append(row)
    return TrainingSet(rows)


def cmd_train(args) -> int:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    ts = load_training_set(args.input)
    lm = mio.read_indices(args.landmark_indices) if args.landmark_indices else ()
    model = train(ts, args.m2, args.m3, landmark_indices=lm, threads=args.threads)
    save_model(model, args.out)
    log.info("wrote %s (%d coefficients, m2=%d, m3=%d)", args.out, model.n, model.m2, model.m3)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = fit_config(args)
    model = load_model(args.model)
    scan = mio.read_scan(args.scan, args.landmarks)
    if scan.landmarks is not None:
        scan.landmarks.check_range(model.n)
    result = fit(model, scan, cfg)
    aligned = result.aligned_shape()
    mio.write_obj(aligned, args.out)
    if args.report:
        report = distance_to_data(aligned, scan)
        final = result.energy_trace[-1].energies[-1] if result.energy_trace else float("nan")
        t = result.transform
        extra = [["fit", "status", ";".join(result.status)], ["fit", "final_energy", _fmt(final)]]
        extra.append(["fit", "scale", _fmt(t.scale)])
        extra += [["fit", f"rotation_{i}{j}", _fmt(t.rotation[i, j])] for i in range(3) for j in range(3)]
        extra += [["fit", f"translation_{a}", _fmt(v)] for a, v in zip("xyz", t.translation)]
        text = report.to_csv(cfg.as_dict()) + _csv(extra)
        mio.write_text(args.report, text)
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = fit_config(args)
    model = load_model(args.model)
    entries = mio.read_frame_manifest(args.frames)
    if not entries:
        raise DataError(f"{args.frames}: no frames listed")
    frames = []
    for t, (path, lm_path) in enumerate(entries):
        if t == 0 and args.landmarks:
            lm_path = Path(args.landmarks)
        frames.append(mio.read_scan(path, lm_path))
    if frames[0].landmarks is None:
        raise DataError("the first frame needs landmarks (--landmarks or a second manifest column)")
    results = track(model, frames, cfg)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    rows = [["frame", "obj", "energy", "mean_distance_mm", "median_distance_mm", "status"]]
    for t, (res, scan) in enumerate(zip(results, frames)):
        name = f"frame_{t:03d}.obj"
        aligned = res.aligned_shape()
        mio.write_obj(aligned, out / name)
        rep = distance_to_data(aligned, scan)
        energy = res.energy_trace[-1].energies[-1] if res.energy_trace else float("nan")
        rows.append([t, name, _fmt(energy), _fmt(rep.summary["mean_mm"]), _fmt(rep.summary["median_mm"]),
                     ";".join(res.status)])
    mio.write_text(out / "track.csv", _header("track", cfg.as_dict()) + _csv(rows))
    return EXIT_OK


def cmd_transform(args) -> int:
    shape = mio.read_obj(args.input)
    coeffs = wavelet.forward(shape)
    layout = coeffs.layout
    rows = [["k", "level", "kind", "sx", "sy", "sz"]]
    for k in range(coeffs.n):
        rows.append([k, int(layout.level[k]), wavelet.KIND_NAMES[layout.kind[k]]] + [_fmt(v) for v in coeffs.coeffs[k]])
    mio.write_text(args.out, _csv(rows))
    return EXIT_OK


def _occlusion_center(shape) -> tuple:
    # the left cheek, raised off the surface so the sphere cuts a cap
    v = shape.vertices
    target = np.array([-0.23, -0.03]) * (v[:, 0].max() - v[:, 0].min())
    i = int(np.argmin(np.sum((v[:, :2] - target) ** 2, axis=1)))
    return tuple(float(c) for c in v[i])


def cmd_synth(args) -> int:
    if args.held_out < 0 or args.frames < 0 or args.density < 1 or not 0 <= args.occlusion < 1:
        raise UsageError("--held-out and --frames must be >= 0, --density >= 1, --occlusion in [0, 1)")
    spec = SyntheticPopulationSpec(seed=args.seed, rows=args.rows, cols=args.cols, d2=args.d2, d3=args.d3,
                                   noise_sigma=args.noise, sample_density=args.density)
    pop = make_population(spec)
    out = Path(args.out_dir)
    try:
        (out / "train").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    entries = []
    for i, a in enumerate(pop.id_amps):
        for e, b in enumerate(pop.expr_amps):
            name = f"train/id{i:02d}_expr{e:02d}.obj"
            mio.write_obj(pop.shape(a, b), out / name)
            entries.append((f"id{i:02d}", f"expr{e:02d}", name))
    mio.write_training_manifest(entries, out / "manifest.txt")
    lm_idx = pop.landmark_indices()
    mio.write_indices(lm_idx, out / "landmark_indices.txt")
    mio.write_text(out / "population.json", spec.to_json() + "\n")
    rng = np.random.default_rng(args.seed + 1)

    def scan_of(shape, seed):
        occ = Occlusion(_occlusion_center(shape), fraction=args.occlusion) if args.occlusion > 0 else None
        return corrupt_scan(shape, args.noise, occ, seed=seed, density=args.density, landmark_indices=lm_idx)

    for j in range(args.held_out):
        alpha = rng.dirichlet(np.full(args.d2, 5.0))
        beta = rng.dirichlet(np.full(args.d3, 5.0))
        truth = pop.shape(alpha @ pop.id_amps, beta @ pop.expr_amps)
        scan = scan_of(truth, args.seed + 100 + j)
        mio.write_obj(truth, out / f"heldout{j:02d}_truth.obj")
        mio.write_ply(scan, out / f"heldout{j:02d}_scan.ply")
        mio.write_landmarks(scan.landmarks, out / f"heldout{j:02d}_landmarks.txt")
    if args.frames:
        alpha = rng.dirichlet(np.full(args.d2, 5.0))
        start, end = pop.expr_amps[0], rng.dirichlet(np.full(args.d3, 5.0)) @ pop.expr_amps
        lines = []
        for t, s in enumerate(np.linspace(0.0, 1.0, args.frames)):
            truth = pop.shape(alpha @ pop.id_amps, (1 - s) * start + s * end)
            scan = scan_of(truth, args.seed + 1000 + t)
            mio.write_obj(truth, out / f"frame{t:03d}_truth.obj")
            mio.write_ply(scan, out / f"frame{t:03d}_scan.ply")
            mio.write_landmarks(scan.landmarks, out / f"frame{t:03d}_landmarks.txt")
            lines.append(f"frame{t:03d}_scan.ply frame{t:03d}_landmarks.txt\n")
        mio.write_text(out / "frames.txt", "".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    fitted = mio.read_obj(args.fitted)
    scan = mio.read_scan(args.scan, None)
    mask = mio.read_indices(args.mask) if args.mask else None
    if mask is not None and len(mask) and mask.max() >= fitted.n_vertices:
        raise DataError(f"mask index {mask.max()} out of range for {fitted.n_vertices} vertices")
    report = distance_to_data(fitted, scan, mask)
    mio.write_text(args.out, report.to_csv({"fitted": args.fitted, "scan": args.scan, "mask": args.mask}))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "fit": cmd_fit,
    "track": cmd_track,
    "transform": cmd_transform,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.INFO if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mlwave: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mlwave: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"mlwave: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BrokenPipeError:
        # the reader of standard output went away; nothing left to report
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
