"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--small]

Each kernel is called once per backend before timing so compilation is not
counted.  Reported numbers are the best of ``--repeat`` runs.
"""

import argparse
import time

import numpy as np

from ctseg import _accel, kernels


def best_time(fn, repeat):
    fn()  # warm-up (jit compile, caches)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(small):
    rng = np.random.default_rng(0)
    n, h, w = (2, 96, 72) if small else (8, 296, 216)
    x = rng.standard_normal((n, 16, h, w)).astype(np.float32)
    wt = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    mean, var = kernels.channel_stats(x)
    invstd = (1.0 / np.sqrt(var + 1e-5)).astype(np.float32)
    scale, shift = kernels.bn_scale_shift(mean, invstd, np.ones(16, np.float32), np.zeros(16, np.float32), np.float32)
    vol = rng.random((128, 128, 24) if small else (512, 512, 48)) < 0.45
    ref, pred = vol, np.roll(vol, 1, axis=0)
    dom = np.ones_like(vol)
    img = rng.standard_normal((256, 256) if small else (512, 512))
    return {
        "conv2d d=2": lambda: kernels.conv2d(x, wt, 2),
        "conv2d grad weight d=2": lambda: kernels.conv2d_grad_weight(x, g, 3, 3, 2),
        "channel_stats": lambda: kernels.channel_stats(x),
        "affine_relu": lambda: kernels.affine_relu(x, scale, shift),
        "bn_relu_backward": lambda: kernels.bn_relu_backward(g, x, scale, shift, mean, invstd),
        "label6": lambda: kernels.label6(vol),
        "confusion_counts": lambda: kernels.confusion_counts(ref, pred, dom),
        "bilinear_resize": lambda: kernels.bilinear_resize(img, 296, 216),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--small", action="store_true", help="smaller inputs for a quick check")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    previous = _accel.use_numba()
    try:
        for name, fn in cases(args.small).items():
            _accel.set_numba(True)
            t_nb = best_time(fn, args.repeat)
            _accel.set_numba(False)
            t_np = best_time(fn, args.repeat)
            print(f"{name:<26}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")
    finally:
        _accel.set_numba(previous)


if __name__ == "__main__":
    main()
