"""Time the compiled and pure-Python Krylov kernels on the same problems.

    python benchmarks/bench_kernels.py [--repeat 5] [--dims 20,100,500]

Two workloads per dimension: the raw kernels on a dense symmetric matrix
(matvec cost is a BLAS call, so the loop overhead dominates at small d),
and ten DINGO iterations on a small softmax problem with each backend
made the active one.
"""
import argparse
import time

import numpy as np

from dingo import kernels
from dingo.comms import ClusterEnv
from dingo.optimizer import DingoConfig, dingo_run
from dingo.problems import build_problem, partition


def _best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def kernel_cases(d, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.geomspace(1.0, 1e-3, d) * rng.choice([-1.0, 1.0], d)
    H = (Q * eig) @ Q.T
    H = 0.5 * (H + H.T)
    A = H @ H + 1e-2 * np.eye(d)
    b = rng.standard_normal(d)
    mv_h = lambda v: H @ v
    mv_a = lambda v: A @ v
    cap = min(d, 50)
    return {
        "cg": lambda k: k.cg(mv_a, b, cap, 1e-12),
        "minres_qlp": lambda k: k.minres_qlp(mv_h, b, cap, 1e-12),
        "lsmr": lambda k: k.lsmr(mv_h, mv_h, b, 1e-2, cap, 1e-12),
    }


def run_dingo(backend_name):
    # the solver wrappers resolve the active backend on every call
    saved = kernels.backend
    kernels.backend = kernels.get_backend(backend_name)
    try:
        data, obj = build_problem("synthetic-softmax:n=1000,p=20,C=5", seed=0)
        env = ClusterEnv(obj, partition(data.n, 4, 0, data), threads=1)
        dingo_run(env, DingoConfig(max_iters=10), np.zeros(obj.dim))
    finally:
        kernels.backend = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dims", default="20,100,500")
    args = ap.parse_args(argv)
    names = kernels.available_backends()
    if "cython" not in names:
        print("compiled backend not built; only the python fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'workload':<22}" + "".join(f"{n:>12}" for n in names) + "     speedup")
    for d in (int(x) for x in args.dims.split(",")):
        for label, fn in kernel_cases(d, rng).items():
            t = [_best_of(lambda: fn(kernels.get_backend(n)), args.repeat) for n in names]
            ratio = f"{t[0] / t[-1]:10.2f}x" if len(t) > 1 else ""
            print(f"{label + f' d={d}':<22}" + "".join(f"{x * 1e3:10.2f}ms" for x in t) + ratio)
    t = [_best_of(lambda: run_dingo(n), max(1, args.repeat // 2)) for n in names]
    ratio = f"{t[0] / t[-1]:10.2f}x" if len(t) > 1 else ""
    print(f"{'dingo softmax d=80':<22}" + "".join(f"{x * 1e3:10.2f}ms" for x in t) + ratio)


if __name__ == "__main__":
    main()
