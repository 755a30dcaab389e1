"""Compare the compiled EM kernel with the numpy fallback.

Times one E-step pass at several cohort sizes and a full multistart fit of
the preset's five-group model under each backend.

    python3 benchmarks/bench_em.py [--repeat 20] [--sizes 1205,10000,50000]
"""
from __future__ import annotations

import argparse
import time
from unittest import mock

import numpy as np

from trajmix import _kernels
from trajmix.gbtm import InitStrategy, ModelSpec, em, fit
from trajmix.simulate import eden_preset, eligible, generate_cohort


def _inputs(n, K=5, T=3, seed=0):
    rng = np.random.default_rng(seed)
    m = (rng.random((n, T)) < 0.8).astype(float)
    y = np.where(m > 0, rng.normal(11.0, 0.8, (n, T)), 0.0)
    mu = np.ascontiguousarray(rng.normal(11.0, 0.8, (K, T)))
    sigma = np.full(K, 0.5)
    log_pi = np.log(np.full(K, 1.0 / K))
    return y, m, mu, sigma, log_pi


def _best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sizes", default="1205,10000,50000")
    ap.add_argument("--fit-seed", type=int, default=1)
    args = ap.parse_args(argv)

    print(f"active backend: {_kernels.BACKEND}")
    if _kernels.BACKEND != "cython":
        print("compiled kernel unavailable; only the fallback can be timed")
    print(f"{'N':>8} {'cython (ms)':>12} {'python (ms)':>12} {'speedup':>8}  max|dW|")
    for n in (int(s) for s in args.sizes.split(",")):
        x = _inputs(n)
        t_py = _best_of(lambda: _kernels.fallback.em_pass(*x), args.repeat)
        if _kernels.BACKEND == "cython":
            t_c = _best_of(lambda: _kernels.em_pass(*x), args.repeat)
            diff = np.max(np.abs(_kernels.em_pass(*x)[1] - _kernels.fallback.em_pass(*x)[1]))
            print(f"{n:>8} {1e3 * t_c:12.3f} {1e3 * t_py:12.3f} {t_py / t_c:8.1f}  {diff:.1e}")
        else:
            print(f"{n:>8} {'-':>12} {1e3 * t_py:12.3f} {'-':>8}")

    sim = eligible(generate_cohort(eden_preset(seed=args.fit_seed)))
    spec = ModelSpec.uniform(5, 2, sim.cohort.grid)
    init = InitStrategy(starts=20, seed=args.fit_seed)
    results = {}
    backends = ["python"] + (["cython"] if _kernels.BACKEND == "cython" else [])
    for name in backends:
        kernel = _kernels.fallback.em_pass if name == "python" else _kernels.em_pass
        with mock.patch.object(em._kernels, "em_pass", kernel):
            t0 = time.perf_counter()
            model = fit(spec, sim.cohort, init)
            results[name] = (time.perf_counter() - t0, model.loglik)
    print("\nfull fit, K=5 quadratic, 20 starts, N=%d" % sim.cohort.n_subjects)
    for name, (t, ll) in results.items():
        print(f"  {name:>7}: {t:7.2f} s  loglik {ll:.6f}")
    if len(results) == 2:
        print(f"  speedup {results['python'][0] / results['cython'][0]:.1f}x, "
              f"|dloglik| {abs(results['python'][1] - results['cython'][1]):.1e}")


if __name__ == "__main__":
    main()
