"""Compare the compiled and pure-numpy glimpse-extraction kernels.

Runs the same workload twice in subprocesses, once with SACCADE_NUMBA=1 and
once with SACCADE_NUMBA=0, because the kernel implementation is chosen at
import time. Prints a timing table and the speedup.

Usage: python3 benchmarks/kernel_benchmark.py [--images N] [--repeats R]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, os, sys, time
import numpy as np
from saccade import kernels
from saccade.rng import substream

images_n, repeats = int(sys.argv[1]), int(sys.argv[2])
rng = substream(0, "benchmark")
canvas, retina, batch = 60, 14, 160
images = rng.random((images_n, canvas, canvas))
img_idx = rng.integers(images_n, size=batch)
top = rng.uniform(0, canvas - 20, size=batch)
left = rng.uniform(0, canvas - 20, size=batch)
win = rng.choice([20.0, 40.0, 60.0], size=batch)

def run_extract():
    return kernels.extract_batch(images, img_idx, top, left, win, retina)

def run_single():
    out = np.empty((retina, retina))
    for i in range(64):
        out = kernels.resample_window(images[i % images_n], top[i % batch],
                                      left[i % batch], win[i % batch], retina)
    return out

results = {"numba": kernels.NUMBA_ENABLED}
for name, fn, unit in [("extract_batch", run_extract, batch),
                       ("resample_window", run_single, 64)]:
    fn()  # warm-up (includes jit compilation when enabled)
    best = min(
        (lambda t0=time.perf_counter(): (fn(), time.perf_counter() - t0)[1])()
        for _ in range(repeats))
    results[name] = {"best_seconds": best, "per_patch_us": best / unit * 1e6}
print(json.dumps(results))
"""


def run_variant(numba_flag: str, images: int, repeats: int) -> dict:
    env = dict(os.environ, SACCADE_NUMBA=numba_flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(images),
                          str(repeats)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--images", type=int, default=256)
    p.add_argument("--repeats", type=int, default=30)
    args = p.parse_args()

    fast = run_variant("1", args.images, args.repeats)
    slow = run_variant("0", args.images, args.repeats)
    if not fast["numba"]:
        print("note: numba unavailable; both variants ran the numpy path")

    print(f"{'kernel':<16} {'numba (us/patch)':>17} {'numpy (us/patch)':>17} "
          f"{'speedup':>8}")
    for name in ("extract_batch", "resample_window"):
        f, s = fast[name]["per_patch_us"], slow[name]["per_patch_us"]
        print(f"{name:<16} {f:>17.2f} {s:>17.2f} {s / f:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
