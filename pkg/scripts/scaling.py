#!/usr/bin/env python3
"""Time training against the sample count and fitting against the vertex count.

Prints best-of-N training times for d2 in {10, 20, 40} (d3 = 5), fit times on
17x17, 33x33 and 65x65 grids, and the resulting ratios and log-log slope.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mlwave.evalkit import SyntheticPopulationSpec, corrupt_scan, make_population, representable_blend
from mlwave.fitting import fit
from mlwave.training import train, train_with_factors


def best_of(n: int, f) -> float:
    out = []
    for _ in range(n):
        t = time.perf_counter()
        f()
        out.append(time.perf_counter() - t)
    return min(out)


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--grids", type=int, nargs="+", default=[17, 33, 65])
    args = p.parse_args()

    times = []
    for d2 in (10, 20, 40):
        ts = make_population(SyntheticPopulationSpec(d2=d2, d3=5)).training_set()
        times.append(best_of(args.repeats, lambda: train(ts, 3, 3)))
        print(f"train d2={d2:2d} d3=5 ({d2 * 5:3d} samples): {times[-1]:.3f} s")
    print("ratios per doubling: " + ", ".join(f"{b / a:.2f}" for a, b in zip(times, times[1:])))

    counts, fit_times = [], []
    for rows in args.grids:
        pop = make_population(SyntheticPopulationSpec(rows=rows, cols=rows))
        model, factors = train_with_factors(pop.training_set(), 3, 3, pop.landmark_indices())
        gt, _ = representable_blend(pop, model, factors, np.random.default_rng(7))
        scan = corrupt_scan(gt, noise_sigma=0.5, seed=7, landmark_indices=model.landmark_indices)
        fit_times.append(best_of(1, lambda: fit(model, scan)))
        counts.append(model.n)
        print(f"fit {rows}x{rows} ({model.n} vertices): {fit_times[-1]:.2f} s")
    slope = np.polyfit(np.log(counts), np.log(fit_times), 1)[0]
    print(f"fit log-log slope: {slope:.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
