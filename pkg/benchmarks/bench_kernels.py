"""Time the hot kernels under the numba and numpy backends.

The backend is fixed at import time by JACOBISUP_NUMBA, so each backend runs
in its own worker process.  Timings are the best of several repeats after a
warm-up call (which absorbs JIT compilation); results are compared across
backends so a speedup never hides a numerical change.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _cases():
    from jacobisup.jacobi import JacobiPoint, PoincareSpec, gram_orthobasis, poincare_eval
    from jacobisup.numkernel import bessel_j_array, kloosterman_many

    cs = np.arange(1, 3001)
    xs = np.linspace(0.01, 9.0, 20000)
    gb = gram_orthobasis(12, 1)
    rng = np.random.default_rng(0)
    n = 4000
    us, vs = rng.uniform(-0.5, 0.5, n), rng.uniform(0.9, 3.0, n)
    px, py = rng.uniform(0, 1, n), rng.uniform(0, 1, n) * vs
    spec = PoincareSpec(12, 1, 1, 0)
    pt = JacobiPoint(0.1, 1.2, 0.2, 0.1)
    return {
        "kloosterman_many c<=3000": lambda: kloosterman_many(3, 5, cs),
        "bessel_j_array nu=23, 2e4 pts": lambda: bessel_j_array(23.0, xs),
        "jacobi mass k=12, 4000 pts": lambda: gb.mass(us, vs, px, py),
        "poincare_eval k=12": lambda: np.array([poincare_eval(spec, pt).to_complex()]),
    }


def worker(repeat: int) -> dict:
    from jacobisup._accel import backend_name

    out = {"backend": backend_name(), "cases": {}}
    for name, fn in _cases().items():
        ref = np.asarray(fn())  # warm-up and reference values
        best = float("inf")
        for _ in range(repeat):
            t = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t)
        out["cases"][name] = {"seconds": best, "values": ref.astype(complex).tolist()}
    return out


def _run(flag: str, repeat: int) -> dict:
    env = {**os.environ, "JACOBISUP_NUMBA": flag}
    proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None, help="write the raw timings here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.repeat), default=lambda z: [z.real, z.imag]))
        return
    fast, slow = _run("1", args.repeat), _run("0", args.repeat)
    print(f"{'kernel':34s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, a in fast["cases"].items():
        b = slow["cases"][name]
        va = np.array([complex(*z) for z in a["values"]])
        vb = np.array([complex(*z) for z in b["values"]])
        diff = float(np.max(np.abs(va - vb)))
        print(f"{name:34s} {a['seconds']:10.4f} {b['seconds']:10.4f} {b['seconds'] / a['seconds']:8.1f} {diff:11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": fast, "numpy": slow}, fh, indent=1)


if __name__ == "__main__":
    main()
