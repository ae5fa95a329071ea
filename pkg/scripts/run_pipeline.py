#!/usr/bin/env python3
"""Synthesize, train, fit and evaluate through the ``mlwave`` command line.

Writes everything under ``--out-dir`` and prints the distance-to-data summary
of each held-out fit. Example::

    python3 scripts/run_pipeline.py --out-dir /tmp/mlwave-run --noise 0.5 --density 8
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from mlwave.cli import main as mlwave


def run(argv: list[str]) -> None:
    print("$ mlwave " + " ".join(argv), flush=True)
    code = mlwave(argv)
    if code != 0:
        sys.exit(code)


def summary(report: Path) -> dict:
    rows = csv.reader(line for line in report.read_text().splitlines() if not line.startswith("#"))
    return {key: value for kind, key, value in rows if kind == "summary"}


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=33)
    p.add_argument("--held-out", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0, help="scan noise sigma in mm")
    p.add_argument("--density", type=int, default=2, help="scan samples per grid edge")
    p.add_argument("--occlusion", type=float, default=0.0, help="fraction of scan points removed")
    p.add_argument("--rho-s", type=float, default=100.0)
    p.add_argument("--smoothing-boundary", choices=("truncated", "reflect"), default="truncated")
    args = p.parse_args()

    out = Path(args.out_dir)
    data = out / "data"
    run(["synth", "--out-dir", str(data), "--rows", str(args.rows), "--cols", str(args.rows),
         "--seed", str(args.seed), "--held-out", str(args.held_out), "--noise", str(args.noise),
         "--density", str(args.density), "--occlusion", str(args.occlusion)])
    model = out / "model.mwm"
    run(["train", "--input", str(data / "manifest.txt"), "--landmark-indices", str(data / "landmark_indices.txt"),
         "--out", str(model)])
    for j in range(args.held_out):
        scan, lm = data / f"heldout{j:02d}_scan.ply", data / f"heldout{j:02d}_landmarks.txt"
        fitted, report = out / f"fit{j:02d}.obj", out / f"fit{j:02d}.csv"
        run(["fit", "--model", str(model), "--scan", str(scan), "--landmarks", str(lm), "--rho-s", str(args.rho_s),
             "--smoothing-boundary", args.smoothing_boundary,
             "--out", str(fitted), "--report", str(report)])
        ev = out / f"eval{j:02d}.csv"
        run(["eval", "--fitted", str(fitted), "--scan", str(scan), "--out", str(ev)])
        s = summary(ev)
        print(f"held-out {j}: median {float(s['median_mm']):.3f} mm, mean {float(s['mean_mm']):.3f} mm, "
              f"below 1 mm {float(s['fraction_below_1mm']):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
