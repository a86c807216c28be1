"""Time the compiled and numpy sweep backends on the same problems.

Run ``python3 benchmarks/bench_kernels.py [--repeat R]``. Prints one row
per (model, grid size, kernel) with the best-of-R wall time per backend,
the speed-up and the largest absolute difference between the outputs.
"""

import argparse
import time

import numpy as np

from mbvi import kernels
from mbvi.closure import MomentPair
from mbvi.models import double_well_model, gbm_model, linear_model, lotka_volterra
from mbvi.ode import TimeGrid
from mbvi.variational import ControlPath, ControlSpec, MomentSystem


def problems():
    # name, model, x0, horizon, scale of the random controls
    yield "linear-2d", linear_model(2, [[0.5, 0.1], [0.0, 0.8]], [1.0, 2.0], 0.3), [1.2, 1.8], 5.0, 1e-3
    yield "double-well", double_well_model(4.0, 1.0), [-1.0], 8.0, 1e-3
    yield "lotka-volterra", lotka_volterra(), [71.0, 79.0], 50.0, 1e-6
    yield "gbm-4d", gbm_model(1e-4 * np.ones(4), 0.01 * np.eye(4)), np.ones(4), 360.0, 1e-3


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--steps", type=int, nargs="*", default=[100, 400])
    args = ap.parse_args(argv)
    if "compiled" not in kernels.available():
        print("compiled backend not built; only the numpy backend is available")
        return 1
    print(f"{'model':16s} {'N':>5s} {'kernel':9s} {'python s':>10s} {'compiled s':>11s} {'speed-up':>9s} {'max diff':>9s}")
    rng = np.random.default_rng(0)
    for name, model, x0, T, scale in problems():
        spec = ControlSpec.for_model(model)
        sys_ = MomentSystem(model, spec)
        for N in args.steps:
            grid = TimeGrid(0.0, T, N)
            u = ControlPath(grid, scale * rng.standard_normal((N, spec.n_controls)), spec.n)
            A, l = sys_.interval_matrices(u.u)
            phi0 = MomentPair.point_mass(x0).phi
            res = {}
            for b in ("python", "compiled"):
                res[b] = best_of(lambda: kernels.forward_sweep(sys_.basis, A, phi0, grid.dt, True, b), args.repeat)
            tp, (phi, stages, _, _) = res["python"]
            tc, (phi_c, _, _, _) = res["compiled"]
            diff = np.max(np.abs(phi - phi_c))
            print(f"{name:16s} {N:5d} {'forward':9s} {tp:10.4f} {tc:11.4f} {tp / tc:9.1f} {diff:9.1e}")
            jumps = {N: rng.standard_normal(phi.shape[1])}
            back = {}
            for b in ("python", "compiled"):
                back[b] = best_of(
                    lambda: kernels.backward_sweep(sys_.basis, A, l, phi, stages, grid.dt, jumps, b), args.repeat)
            tp, (eta_p, _) = back["python"]
            tc, (eta_c, _) = back["compiled"]
            diff = np.max(np.abs(eta_p - eta_c))
            print(f"{name:16s} {N:5d} {'backward':9s} {tp:10.4f} {tc:11.4f} {tp / tc:9.1f} {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
