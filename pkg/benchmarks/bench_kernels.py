"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Times each kernel on shapes taken from a base-16, length-256 U-Net with
batch 10, then one full training step (forward + backward) per backend.
"""

import argparse
import json
import timeit

import numpy as np

from tsdm import kernels
from tsdm.schedule import linear_beta_schedule
from tsdm.unet1d import UNetConfig, init_params, loss_and_gradients


def kernel_cases(rng):
    x = rng.standard_normal((10, 32, 256)).astype(np.float32)
    w3 = rng.standard_normal((32, 32, 3)).astype(np.float32)
    w4 = rng.standard_normal((32, 32, 4)).astype(np.float32)
    b = np.zeros(32, dtype=np.float32)
    y, cols = kernels.conv1d_forward(x, w3, b, 1, 1)
    _, cols_d = kernels.conv1d_forward(x, w4, b, 2, 1)
    yd = np.ones((10, 32, 128), dtype=np.float32)
    g = np.ones(32, dtype=np.float32)
    _, xhat, rstd = kernels.group_norm_forward(x, g, b, 8, 1e-5)
    return {
        "im2col k3": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im k3": lambda: kernels.col2im(cols, x.shape, 3, 1, 1),
        "conv fwd k3": lambda: kernels.conv1d_forward(x, w3, b, 1, 1),
        "conv bwd k3": lambda: kernels.conv1d_backward(y, cols, x.shape, w3, 1, 1),
        "conv fwd k4 s2": lambda: kernels.conv1d_forward(x, w4, b, 2, 1),
        "conv bwd k4 s2": lambda: kernels.conv1d_backward(yd, cols_d, x.shape, w4, 2, 1),
        "groupnorm fwd": lambda: kernels.group_norm_forward(x, g, b, 8, 1e-5),
        "groupnorm bwd": lambda: kernels.group_norm_backward(x, xhat, rstd, g, 8),
    }


def train_step_case(rng):
    cfg = UNetConfig(length=256, base_channels=16)
    params = init_params(cfg, 0)
    sched = linear_beta_schedule(200, 1.5e-3, 0.3)
    x0 = rng.standard_normal((10, 256))
    t = rng.integers(1, 201, 10)
    eps = rng.standard_normal((10, 256))
    return lambda: loss_and_gradients(params, cfg, x0, t, eps, sched)


def best_ms(fn, repeat):
    fn()
    runs = timeit.repeat(fn, number=1, repeat=repeat)
    return 1e3 * min(runs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        row = {k: best_ms(fn, args.repeat) for k, fn in kernel_cases(rng).items()}
        row["unet train step"] = best_ms(train_step_case(rng), max(3, args.repeat // 5))
        results[name] = row
    names = list(results[backends[0]])
    header = f"{'case':<18}" + "".join(f"{b:>12}" for b in backends)
    if "cython" in results:
        header += f"{'speedup':>10}"
    print(header + "   (best of runs, ms)")
    for case in names:
        line = f"{case:<18}" + "".join(f"{results[b][case]:>12.3f}" for b in backends)
        if "cython" in results:
            line += f"{results['python'][case] / results['cython'][case]:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
