"""Benchmark the dead-time acceptance scan: compiled kernel vs fallback.

Runs the same workload twice in subprocesses, once as imported normally
(numba when available) and once with QKDSIM_PURE_NUMPY=1, checks that the
outputs agree bit-for-bit, and prints a timing table. The scan is serial
by construction, so this is the package's worst case for interpreted
execution and the best case for compilation.

Usage: python3 benchmarks/bench_deadtime.py [--slots N] [--repeats R]
"""
import argparse
import json
import os
import subprocess
import sys

_WORKER = r"""
import json, sys, time
import numpy as np
from qkdsim.kernels import USE_NUMBA, dead_time_scan

n_slots, repeats = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(7)
slots = np.cumsum(rng.integers(1, 60, n_slots)).astype(np.int64)
blocked, start = np.int64(41), np.int64(0)

accept, until = dead_time_scan(slots, blocked, start)   # warm-up + compile
times = []
for _ in range(repeats):
    t0 = time.perf_counter()
    accept, until = dead_time_scan(slots, blocked, start)
    times.append(time.perf_counter() - t0)
print(json.dumps({
    "numba": bool(USE_NUMBA),
    "best_s": min(times),
    "accepted": int(accept.sum()),
    "blocked_until": int(until),
    "checksum": int(np.flatnonzero(accept).sum()),
}))
"""


def run(pure_numpy, n_slots, repeats):
    env = dict(os.environ)
    if pure_numpy:
        env["QKDSIM_PURE_NUMPY"] = "1"
    else:
        env.pop("QKDSIM_PURE_NUMPY", None)
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, str(n_slots), str(repeats)],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--slots", type=int, default=5_000_000,
                    help="candidate clicks per scan (default 5e6)")
    ap.add_argument("--repeats", type=int, default=5,
                    help="timed repetitions, best taken (default 5)")
    args = ap.parse_args()

    fast = run(False, args.slots, args.repeats)
    slow = run(True, args.slots, args.repeats)

    for key in ("accepted", "blocked_until", "checksum"):
        if fast[key] != slow[key]:
            print(f"MISMATCH on {key}: {fast[key]} vs {slow[key]}")
            return 1

    label_fast = "numba njit" if fast["numba"] else "numpy (numba unavailable)"
    print(f"dead_time_scan over {args.slots:,} candidate slots, "
          f"best of {args.repeats}:")
    print(f"  {label_fast:<26} {fast['best_s'] * 1e3:10.2f} ms")
    print(f"  {'pure numpy fallback':<26} {slow['best_s'] * 1e3:10.2f} ms")
    if fast["numba"]:
        print(f"  speedup                    {slow['best_s'] / fast['best_s']:10.1f}x")
    print(f"  outputs identical: accepted={fast['accepted']:,}, "
          f"checksum={fast['checksum']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
