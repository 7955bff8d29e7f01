"""Compare the numba kernels with their pure-Python/numpy fallbacks.

Runs one agent-update step and the three lattice feature kernels on grids
taken from a nominal simulation, checks that both paths agree, and prints
the median wall time of each. Usage::

    python3 benchmarks/bench_kernels.py [--grid 100] [--repeats 5]
"""
import argparse
import time

import numpy as np

from tmecontrol import _featkernels as fk
from tmecontrol import _simkernel, sim


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def step_inputs(grid_size, seed=0):
    p = sim.check_parameters(sim.nominal_parameters())
    rng = np.random.default_rng(seed)
    grid = sim.initial_grid(grid_size, rng)
    ys, xs = np.nonzero(grid >= 0)
    perm = rng.permutation(len(ys))
    u = rng.random((len(ys), _simkernel.N_UNIFORMS))
    return grid, ys[perm].astype(np.int64), xs[perm].astype(np.int64), u, p


def bench_step(grid_size, repeats):
    grid, oy, ox, u, p = step_inputs(grid_size)
    stamp = np.full(grid.shape, -1, dtype=np.int32)

    def run(kernel):
        g, s = grid.copy(), stamp.copy()
        kernel(g, s, oy, ox, u, p, 1)
        return g

    if not np.array_equal(run(_simkernel.step_numba), run(_simkernel.step_python)):
        raise AssertionError("step kernels disagree")
    return (median_time(lambda: run(_simkernel.step_numba), repeats),
            median_time(lambda: run(_simkernel.step_python), repeats))


def bench_features(grid_size, repeats):
    traj = sim.simulate(sim.nominal_parameters(), 0, 100, grid_size=grid_size)
    grid = traj[-1].to_grid()
    rows = []
    for name in ("contacts", "components", "tumor_t_distance"):
        fast = getattr(fk, f"{name}_numba")
        slow = getattr(fk, f"_{name}_numpy")
        if not np.array_equal(np.asarray(fast(grid)), np.asarray(slow(grid))):
            raise AssertionError(f"{name} kernels disagree")
        rows.append((name, median_time(lambda: fast(grid), repeats), median_time(lambda: slow(grid), repeats)))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--grid", type=int, default=100)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    rows = [("agent step", *bench_step(args.grid, args.repeats))]
    rows += bench_features(args.grid, args.repeats)
    print(f"grid {args.grid}x{args.grid}, median of {args.repeats} runs (after JIT warm-up)")
    print(f"{'kernel':<18}{'numba [ms]':>12}{'fallback [ms]':>15}{'speed-up':>10}")
    for name, a, b in rows:
        print(f"{name:<18}{a * 1e3:>12.3f}{b * 1e3:>15.3f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
