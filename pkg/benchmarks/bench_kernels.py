"""Benchmark the kernel-matching weight kernels under both backends.

Times ``kw_weight_sums`` and ``kw_jacobian_dense`` for the backend selected
by ``PSEUDOWEIGHT_BACKEND``.  With ``--compare`` the script reruns itself in
subprocesses with each backend forced, so both are measured in a fresh
process with its own compiled state.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def make_instance(n_c, n_s, k, seed):
    rng = np.random.default_rng(seed)
    qc = rng.normal(size=n_c)
    qs = rng.normal(size=n_s)
    Xc = np.column_stack([np.ones(n_c), rng.normal(size=(n_c, k - 1))])
    Xs = np.column_stack([np.ones(n_s), rng.normal(size=(n_s, k - 1))])
    omega = rng.uniform(1, 100, n_s)
    return qc, qs, Xc, Xs, omega


def bench(fn, repeats):
    fn()  # warm-up (includes any compilation)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_current(args):
    from pseudoweight import kernels

    qc, qs, Xc, Xs, omega = make_instance(args.n_c, args.n_s, args.k, args.seed)
    h = 0.9 * qc.std() * (args.n_c + args.n_s) ** -0.2
    results = {"backend": kernels.active_backend(), "kernel": args.kernel,
               "n_c": args.n_c, "n_s": args.n_s}
    results["weights_s"] = bench(
        lambda: kernels.kw_weight_sums(qc, qs, omega, args.kernel, h), args.repeats)
    results["jacobian_s"] = bench(
        lambda: kernels.kw_jacobian_dense(qc, qs, Xc, Xs, omega, args.kernel, h),
        args.repeats)
    return results


def run_compare(args):
    rows = []
    base = [sys.executable, os.path.abspath(__file__),
            "--n-c", str(args.n_c), "--n-s", str(args.n_s), "--k", str(args.k),
            "--kernel", args.kernel, "--repeats", str(args.repeats),
            "--seed", str(args.seed), "--json"]
    for backend in ("numpy", "numba"):
        env = dict(os.environ, PSEUDOWEIGHT_BACKEND=backend)
        out = subprocess.run(base, env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(f"{backend}: failed ({out.stderr.strip().splitlines()[-1]})")
            continue
        rows.append(json.loads(out.stdout))
    for r in rows:
        print(f"{r['backend']:>6}: weights {r['weights_s'] * 1e3:8.2f} ms   "
              f"jacobian {r['jacobian_s'] * 1e3:8.2f} ms")
    if len(rows) == 2:
        print(f"speedup (numpy/numba): weights {rows[0]['weights_s'] / rows[1]['weights_s']:.1f}x   "
              f"jacobian {rows[0]['jacobian_s'] / rows[1]['jacobian_s']:.1f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-c", type=int, default=2400, help="cohort size")
    parser.add_argument("--n-s", type=int, default=2000, help="survey size")
    parser.add_argument("--k", type=int, default=4, help="covariate columns")
    parser.add_argument("--kernel", default="triangular",
                        choices=["epanechnikov", "triangular", "gaussian"])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--compare", action="store_true",
                        help="benchmark both backends in subprocesses")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    args = parser.parse_args()
    if args.compare:
        run_compare(args)
        return
    results = run_current(args)
    if args.json:
        print(json.dumps(results))
    else:
        print(f"{results['backend']}: weights {results['weights_s'] * 1e3:.2f} ms   "
              f"jacobian {results['jacobian_s'] * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
