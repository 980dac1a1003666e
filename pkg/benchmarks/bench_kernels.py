"""Time the hot kernels under both backends.

Each backend runs in its own interpreter because ``GEO_EXEC_NUMBA`` is read
at import time. Usage::

    python3 benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, timeit
import numpy as np
from geo_exec import kernels
from geo_exec._accel import backend

n, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
x = rng.normal(size=n)
seg = kernels.segment_starts([390] * (n // 390) + ([n % 390] if n % 390 else []))
contrib = np.where(rng.random(n) < 0.5, 0.0, x)
rew, val = rng.normal(size=n), rng.normal(size=n + 1)
done = np.zeros(n, dtype=bool)
done[389::390] = True
cases = {
    "exp_filter": lambda: kernels.exp_filter(x, 0.9, seg),
    "lag_matrix(L=30)": lambda: kernels.lag_matrix(x, 30, seg),
    "impact_accumulate": lambda: kernels.impact_accumulate(contrib, 1, 6.0),
    "gae": lambda: kernels.gae(rew, val, done, 0.99, 0.95),
}
out = {}
for name, fn in cases.items():
    fn()  # compile / warm caches
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps({"backend": backend(), "times": out}))
"""


def run(flag, n, repeat):
    env = dict(os.environ, GEO_EXEC_NUMBA=flag)
    r = subprocess.run([sys.executable, "-c", CHILD, str(n), str(repeat)], env=env, capture_output=True, text=True, check=True)
    return json.loads(r.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    np_, nb = run("0", args.n, args.repeat), run("1", args.n, args.repeat)
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<20}{np_['backend']:>12}{nb['backend']:>12}{'speedup':>10}")
    for k in np_["times"]:
        a, b = np_["times"][k], nb["times"][k]
        print(f"{k:<20}{a * 1e3:>10.2f}ms{b * 1e3:>10.2f}ms{a / b:>9.1f}x")


if __name__ == "__main__":
    main()
