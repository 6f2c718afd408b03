"""Time the numba kernels against their numpy fallbacks, and one end-to-end
relaxed simulation under each backend.

    python3 benchmarks/bench_kernels.py [--particles 10000] [--repeat 5]

The end-to-end rows run a child interpreter per backend because the backend
is fixed at import time by MFRELAX_BACKEND.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mfrelax import _kernels as kn

E2E = """
import time
from mfrelax import LqParams, LqRiccatiOracle, SimConfig, TimeGrid, make_lq_meanfield, simulate_relaxed
p = LqParams(); spec = make_lq_meanfield(p); g = TimeGrid(1.0, 200)
mu = LqRiccatiOracle(p, g).mixture(spec.action_grid)
cfg = SimConfig({n}, g, seed=1)
simulate_relaxed(spec, mu, SimConfig(100, g, seed=1))
t = time.perf_counter(); simulate_relaxed(spec, mu, cfg); print(time.perf_counter() - t)
"""


def best_of(fn, repeat):
    fn()      # warm-up, includes JIT compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def cases(n):
    r = np.random.default_rng(0)
    n_act = 41
    p = np.arange(n)
    a = r.integers(0, n_act, n)
    rows = np.repeat(p, 2)
    cols = np.clip(np.repeat(a, 2) + np.tile([0, 1], n), 0, n_act - 1)
    w = np.tile([0.3, 0.7], n)
    drift, diff, z = r.normal(size=(3, rows.size))
    x = r.normal(size=n)
    alpha = r.dirichlet(np.ones(4), size=n)
    bins = r.integers(0, 64, n)
    table = r.normal(size=(n, n_act))
    return {
        "counter_normals": lambda m: m.counter_normals(1, 2, p, a),
        "counter_normals_dense": lambda m: m.counter_normals_dense(1, 2, p, 4),
        "pair_step": lambda m: m.pair_step(x, rows, w, drift, diff, z, 0.005, 0.07),
        "chatter_indices": lambda m: m.chatter_indices(alpha, 64, 17),
        "bin_argmax": lambda m: m.bin_argmax(bins, table, 64),
    }


class Backend:
    def __init__(self, suffix):
        for name in ("counter_normals", "counter_normals_dense", "pair_step", "chatter_indices", "bin_argmax"):
            setattr(self, name, getattr(kn, f"{name}_{suffix}"))


def end_to_end(n):
    out = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, MFRELAX_BACKEND=backend)
        r = subprocess.run([sys.executable, "-c", E2E.format(n=n)], env=env, capture_output=True, text=True,
                           check=True)
        out[backend] = float(r.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    if not kn.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    np_b, nb_b = Backend("np"), Backend("nb")
    print(f"particles = {args.particles}, best of {args.repeat}")
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(args.particles).items():
        t_np = best_of(lambda: fn(np_b), args.repeat) * 1e3
        t_nb = best_of(lambda: fn(nb_b), args.repeat) * 1e3
        print(f"{name:24s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")
    if not args.skip_e2e:
        e = end_to_end(args.particles)
        print(f"{'simulate_relaxed K=200':24s} {e['numpy'] * 1e3:10.1f} {e['numba'] * 1e3:10.1f} "
              f"{e['numpy'] / e['numba']:8.2f}")


if __name__ == "__main__":
    main()
