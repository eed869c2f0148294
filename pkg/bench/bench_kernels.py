"""Time the compiled and NumPy Bellman kernels on the stabilization grid.

Usage: python bench/bench_kernels.py [--states 201 401 801] [--repeat 3]
"""
import argparse
import time

import numpy as np

from ctdqn import _kernels_py
from ctdqn.dp_oracle import build_grid_mdp
from ctdqn.sde_env import make_stabilization_env

try:
    from ctdqn import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--states", type=int, nargs="+", default=[201, 401, 801])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--tol", type=float, default=1e-8)
    args = ap.parse_args()

    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled extension not built; timing the NumPy fallback only")

    model, actions = make_stabilization_env()
    print(f"{'states':>7} {'backend':>8} {'sweeps':>7} {'seconds':>10} {'speedup':>8}")
    for n in args.states:
        g = build_grid_mdp(model, actions, n, 0.1)
        q0 = np.zeros((g.n_states, g.n_actions))
        times, results = {}, {}
        for name, k in backends.items():
            times[name], results[name] = best_of(
                lambda k=k: k.value_iteration(g.indptr, g.indices, g.probs, g.rewards, g.gamma_eff, q0, args.tol, 100_000),
                args.repeat,
            )
        for name in backends:
            speedup = times["python"] / times[name]
            print(f"{n:>7} {name:>8} {len(results[name][1]):>7} {times[name]:>10.4f} {speedup:>7.1f}x")
        if "cython" in results:
            diff = np.max(np.abs(results["cython"][0] - results["python"][0]))
            print(f"{'':>7} max |Q_cython - Q_python| = {diff:.2e}")


if __name__ == "__main__":
    main()
