"""Benchmark the compiled accumulation kernels against the NumPy fallback.

Times the two hot kernels (score/curvature accumulation and risk-set means)
on synthetic inputs of increasing size, plus one end-to-end model fit per
backend, and prints a table with per-call times and speedups.

Usage:
    python3 benchmarks/bench_backends.py [--sizes 2000,10000,50000] [--repeat 5]

The fallback is always available; if the package was installed without a C
compiler the script reports that and times the fallback alone.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from vesieve._core import kernels_py

try:
    from vesieve._core import ckernels
except ImportError:
    ckernels = None


def kernel_inputs(seed, n, p=4, event_frac=0.25):
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.normal(size=(n, p))
    risk_w = rng.uniform(0.2, 2.0, size=n)
    beta = rng.normal(scale=0.4, size=p)
    n_ev = max(1, int(event_frac * n))
    ev_pos = np.sort(rng.choice(n, size=n_ev, replace=False)).astype(np.int64)
    cuts = np.maximum(ev_pos + 1, rng.integers(1, n + 1, size=n_ev))
    cuts = np.sort(cuts).astype(np.int64)
    ev_mass = rng.uniform(0.1, 2.0, size=n_ev)
    return z, risk_w, beta, ev_pos, cuts, ev_mass


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_kernels(sizes, repeat):
    rows = []
    for n in sizes:
        z, risk_w, beta, ev_pos, cuts, ev_mass = kernel_inputs(0, n)
        for label, fn in (
            (
                "score_curvature",
                lambda mod: mod.score_curvature(z, risk_w, beta, ev_pos, cuts, ev_mass),
            ),
            ("risk_means", lambda mod: mod.risk_means(z, risk_w, beta, cuts)),
        ):
            t_py = best_of(lambda: fn(kernels_py), repeat)
            t_c = best_of(lambda: fn(ckernels), repeat) if ckernels else None
            rows.append((label, n, t_py, t_c))
    return rows


def bench_fit(repeat):
    """End-to-end augmented fit on a generated trial, one run per backend."""
    script = (
        "import time\n"
        "from vesieve import fit_model, generate_trial, scenario\n"
        "ds = generate_trial(scenario('M3', n=4000), seed=3)\n"
        "from vesieve import fit_completeness  # warm imports\n"
        "best = float('inf')\n"
        f"for _ in range({repeat}):\n"
        "    start = time.perf_counter()\n"
        "    fit_model(ds, 'aipw')\n"
        "    best = min(best, time.perf_counter() - start)\n"
        "print(best)\n"
    )
    out = []
    for backend in ("python", "c") if ckernels else ("python",):
        env = dict(os.environ, VESIEVE_BACKEND=backend)
        res = subprocess.run(
            [sys.executable, "-c", script], env=env, capture_output=True, text=True
        )
        if res.returncode != 0:
            raise RuntimeError(res.stderr)
        out.append((backend, float(res.stdout.strip())))
    return out


def fmt(seconds):
    return f"{seconds * 1e3:9.3f} ms"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="2000,10000,50000")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]

    if ckernels is None:
        print("compiled kernels not built; timing the NumPy fallback only\n")

    print(f"{'kernel':<16} {'n':>7} {'numpy':>12} {'compiled':>12} {'speedup':>8}")
    for label, n, t_py, t_c in bench_kernels(sizes, args.repeat):
        compiled = fmt(t_c) if t_c is not None else "        n/a"
        speedup = f"{t_py / t_c:7.2f}x" if t_c else "     n/a"
        print(f"{label:<16} {n:>7} {fmt(t_py):>12} {compiled:>12} {speedup:>8}")

    print("\nend-to-end augmented fit (n=4000 trial, fresh process per backend):")
    for backend, t in bench_fit(args.repeat):
        print(f"  {backend:<8} {fmt(t)}")


if __name__ == "__main__":
    main()
