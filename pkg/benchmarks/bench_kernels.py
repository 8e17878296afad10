"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 20]

Also times one full 256 px registration under each backend, by re-running
this interpreter with SAMMPA_DISABLE_NUMBA set.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from sammpa import _kernels


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def inputs(size, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    px = xx + rng.normal(0, 3, (size, size))
    py = yy + rng.normal(0, 3, (size, size))
    ux, uy = rng.normal(size=(2, size // 8 + 3, size // 8 + 3))
    seg = np.where(np.hypot(yy - size / 2, xx - size / 2) < size / 3, 0.8, 0.2)
    return img, px, py, ux, uy, seg


REGISTER_SNIPPET = """
import time, numpy as np
from sammpa.core import ImageTensor
from sammpa.register import register, RegistrationConfig
yy, xx = np.mgrid[0:256, 0:256]
a = np.exp(-((xx - 128) ** 2 + (yy - 128) ** 2) / 800.0).astype(np.float32)
b = np.exp(-((xx - 134) ** 2 + (yy - 124) ** 2) / 1000.0).astype(np.float32)
register(ImageTensor(a[:64, :64]), ImageTensor(b[:64, :64]), RegistrationConfig())
t0 = time.perf_counter()
register(ImageTensor(a), ImageTensor(b), RegistrationConfig())
print(time.perf_counter() - t0)
"""


def time_register(disable):
    env = dict(os.environ)
    if disable:
        env["SAMMPA_DISABLE_NUMBA"] = "1"
    else:
        env.pop("SAMMPA_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, "-c", REGISTER_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-register", action="store_true")
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    img, px, py, ux, uy, seg = inputs(args.size)
    c = args.size // 2
    cases = {
        "bilinear_sample": lambda k: k.bilinear_sample(img, px, py),
        "bilinear_sample_grad": lambda k: k.bilinear_sample_grad(img, px, py),
        "bending_energy": lambda k: k.bending_energy(ux, uy),
        "region_grow": lambda k: k.region_grow(seg, c, c, 0.1),
    }
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases.items():
        t_np = best_of(lambda: call(_kernels.numpy_impl), args.repeat)
        t_nb = best_of(lambda: call(_kernels.numba_impl), args.repeat)
        print(f"{name:<22}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")
    if not args.skip_register:
        t_np, t_nb = time_register(True), time_register(False)
        print(f"{'register 256 px':<22}{t_np * 1e3:>10.1f}{t_nb * 1e3:>10.1f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
