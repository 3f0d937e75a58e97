"""Timing harness for the convolution kernels and the end-to-end model.

Compares the numba loop kernels against the numpy im2col fallback on the
three shapes the residual encoder actually runs (224 input, widths
16/32/64), then times one full forward/backward training step.

    python3 benchmarks/bench_kernels.py --batch 8 --repeats 5

The first numba call triggers JIT compilation; it is excluded by a warmup
pass.  Numbers are medians over --repeats runs on whatever core the OS
gives us, so treat them as indicative, not rigorous.
"""
import argparse
import statistics
import time

import numpy as np

from pgc import backend as B
from pgc.model import ModelConfig, backward_batch, forward_batch, init_params

# (padded input side, in channels, out channels) per residual block at 224
BLOCK_SHAPES = [(226, 3, 16), (114, 16, 32), (58, 32, 64)]


def _median_time(fn, repeats):
    fn()                                    # warmup / JIT
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_kernels(batch, repeats):
    rng = np.random.default_rng(0)
    rows = []
    for side, ci, co in BLOCK_SHAPES:
        xpad = rng.standard_normal((batch, side, side, ci))
        w = rng.standard_normal((3, 3, ci, co))
        out = B.conv3x3s2_forward(xpad, w)
        dout = rng.standard_normal(out.shape)
        ops = {
            "forward": lambda: B.conv3x3s2_forward(xpad, w),
            "grad_in": lambda: B.conv3x3s2_backward_dx(dout, w, xpad.shape),
            "grad_w": lambda: B.conv3x3s2_backward_dw(xpad, dout),
        }
        for op_name, fn in ops.items():
            timings = {}
            for name in ("numba", "numpy"):
                B.set_backend(name)
                timings[name] = _median_time(fn, repeats)
            rows.append((f"{ci}->{co} @{side - 2}", op_name,
                         timings["numba"], timings["numpy"]))
    return rows


def bench_model(batch, repeats):
    cfg = ModelConfig()
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    x = rng.integers(0, 256, (batch, cfg.crop, cfg.crop, 3)).astype(np.float64)
    y = rng.integers(0, 2, batch).astype(np.float64)

    def step():
        fwd = forward_batch(x, params, cfg, mode="train", want_caches=True)
        dy = (1.0 / (1.0 + np.exp(-fwd.y_pred)) - y) / batch
        backward_batch(dy, fwd, params, cfg)

    rows = []
    for name in ("numba", "numpy"):
        B.set_backend(name)
        rows.append((name, _median_time(step, repeats)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--skip-model", action="store_true",
                    help="only time the raw kernels")
    args = ap.parse_args()

    print(f"batch={args.batch} repeats={args.repeats} (median seconds)\n")
    print(f"{'layer':<14}{'op':<10}{'numba':>10}{'numpy':>10}{'speedup':>9}")
    for layer, op, tn, tp in bench_kernels(args.batch, args.repeats):
        print(f"{layer:<14}{op:<10}{tn:>10.4f}{tp:>10.4f}{tp / tn:>8.1f}x")

    if not args.skip_model:
        print(f"\nfull train step (forward + backward, {args.batch}x224x224):")
        for name, t in bench_model(args.batch, args.repeats):
            print(f"  {name:<8}{t:.3f}s")


if __name__ == "__main__":
    main()
