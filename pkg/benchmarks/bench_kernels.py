"""Time the hot kernels under the numba and the pure-numpy backends.

Each backend runs in its own interpreter because the switch is read at
import time.  Usage::

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, sys, time
import numpy as np
from dwcbilevel import _jit, kernels, datagen as dg
from dwcbilevel.applications import build_elastic_net, build_sgl, KernelSvm
from dwcbilevel.dwc import DwcParams, run_ipdwca

repeat = int(sys.argv[1])
en = build_elastic_net(dg.gen_elastic_net(dg.GenSpec("elastic-net", seed=0)))
sgl = build_sgl(dg.gen_sgl(dg.GenSpec("sgl", seed=0)))
svm = KernelSvm(dg.gen_svm(dg.GenSpec("svm", seed=0)))
rng = np.random.default_rng(0)
P = rng.normal(size=(400, 2))

cases = {
    "sqdist 400x400": lambda: kernels.sqdist(P, P),
    "elastic-net lower solve": lambda: en.lower.solve_lower(np.array([5.0, 5.0])),
    "sgl lower solve": lambda: sgl.lower.solve_lower(np.full(11, 20.0)),
    "svm smo solve": lambda: svm.solve_lower(np.array([1.0, 1.0])),
    "elastic-net ipdwca 10 iters": lambda: run_ipdwca(
        en, DwcParams(gamma=0.5 / en.rho_f, epsilon=1e-6, tol=1e-12, max_iters=10),
        np.array([10.0, 10.0])),
}
out = {"backend": _jit.backend()}
for name, fn in cases.items():
    t0 = time.perf_counter()
    fn()  # first call includes compilation or cache loading
    first = time.perf_counter() - t0
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out[name] = (first, best)
print(json.dumps(out))
"""


def run(flag, repeat):
    env = dict(os.environ, DWCBILEVEL_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", WORKLOAD, str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast, slow = run("1", args.repeat), run("0", args.repeat)
    print(f"{'workload':32s} {'numba first':>12s} {'numba best':>11s} {'numpy best':>11s} "
          f"{'speedup':>8s}")
    for name in fast:
        if name == "backend":
            continue
        f_first, f_best = fast[name]
        _, s_best = slow[name]
        print(f"{name:32s} {f_first:12.4f} {f_best:11.4f} {s_best:11.4f} "
              f"{s_best / max(f_best, 1e-12):8.1f}x")


if __name__ == "__main__":
    main()
