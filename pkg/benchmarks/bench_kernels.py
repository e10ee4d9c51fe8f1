#!/usr/bin/env python3
"""Benchmark the compiled conv kernels against the NumPy fallback.

Times the patch gather (im2col), the gradient scatter (col2im_add) and a
full conv2d forward+backward at shapes representative of the residual
mapper, and checks that both backends agree bitwise.

Run from the repo root:  python3 benchmarks/bench_kernels.py
"""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from specmap import kernels  # noqa: E402
from specmap.kernels import pure  # noqa: E402

try:
    from specmap.kernels import _fast
except ImportError:
    _fast = None

# (label, batch, in_ch, out_ch, H, W, stride): the four mapper blocks at the
# default desk-scale profile, batch of two ~45-frame utterances
SHAPES = [
    ("block1 down 1->16  11x257 s2", 90, 1, 16, 11, 257, 2),
    ("block1 conv 16->16  6x129 s1", 90, 16, 16, 6, 129, 1),
    ("block2 conv 16->16  3x65  s1", 90, 16, 16, 3, 65, 1),
    ("block3 conv 32->32  2x33  s1", 90, 32, 32, 2, 33, 1),
]


def timeit(fn, reps=10):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1000.0


def geometry(h, w, k, s):
    oh, ow = -(-h // s), -(-w // s)
    ph = max((oh - 1) * s + k - h, 0)
    pw = max((ow - 1) * s + k - w, 0)
    return oh, ow, ph, pw


def bench_kernels():
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.backend_name()}")
    if _fast is None:
        print("compiled extension not built; showing the fallback only\n")
    header = f"{'shape':34s} {'op':10s} {'pure ms':>9s} {'fast ms':>9s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, b, c, f, h, w, s in SHAPES:
        oh, ow, ph, pw = geometry(h, w, 3, s)
        xpad = rng.standard_normal((b, c, h + ph, w + pw))
        n = b * oh * ow
        out = np.empty((c * 9, n))
        dcols = rng.standard_normal((c * 9, n))

        t_pure = timeit(lambda: pure.im2col(xpad, 3, 3, s, s, oh, ow, out))
        if _fast is not None:
            t_fast = timeit(lambda: _fast.im2col(xpad, 3, 3, s, s, oh, ow, out))
            ref = np.empty_like(out)
            pure.im2col(xpad, 3, 3, s, s, oh, ow, ref)
            _fast.im2col(xpad, 3, 3, s, s, oh, ow, out)
            assert np.array_equal(ref, out), "backend mismatch in im2col"
            print(f"{label:34s} {'im2col':10s} {t_pure:9.2f} {t_fast:9.2f} {t_pure / t_fast:7.1f}x")
        else:
            print(f"{label:34s} {'im2col':10s} {t_pure:9.2f} {'-':>9s} {'-':>8s}")

        t_pure = timeit(lambda: pure.col2im_add(dcols, b, c, h + ph, w + pw, 3, 3, s, s, oh, ow))
        if _fast is not None:
            t_fast = timeit(lambda: _fast.col2im_add(dcols, b, c, h + ph, w + pw, 3, 3, s, s, oh, ow))
            ga = pure.col2im_add(dcols, b, c, h + ph, w + pw, 3, 3, s, s, oh, ow)
            gb = _fast.col2im_add(dcols, b, c, h + ph, w + pw, 3, 3, s, s, oh, ow)
            assert np.array_equal(ga, gb), "backend mismatch in col2im_add"
            print(f"{label:34s} {'col2im':10s} {t_pure:9.2f} {t_fast:9.2f} {t_pure / t_fast:7.1f}x")
        else:
            print(f"{label:34s} {'col2im':10s} {t_pure:9.2f} {'-':>9s} {'-':>8s}")


def bench_conv_end_to_end():
    """Full conv2d forward+backward under each backend, via the env switch."""
    import subprocess

    code = r"""
import time, numpy as np
from specmap import kernels, ops
from specmap.tensor import Tape, Tensor, backward
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((90, 16, 6, 129)), requires_grad=True)
k = Tensor(rng.standard_normal((16, 16, 3, 3)), requires_grad=True)
def step():
    x.grad = k.grad = None
    with Tape() as tape:
        loss = ops.mse(ops.conv2d(x, k, stride=(1, 1), padding="same"), Tensor(np.zeros((90, 16, 6, 129))))
    backward(tape, loss)
step()
t0 = time.perf_counter(); reps = 10
for _ in range(reps):
    step()
print(f"{kernels.backend_name()}: {(time.perf_counter() - t0) / reps * 1000:.2f} ms per fwd+bwd")
"""
    env_base = {"PYTHONPATH": str(Path(__file__).resolve().parent.parent / "src")}
    print("\nconv2d 16ch 6x129 batch 90, forward+backward:")
    for pure_flag in ("0", "1"):
        out = subprocess.run([sys.executable, "-c", code],
                             env={**env_base, "SPECMAP_PURE": pure_flag},
                             capture_output=True, text=True)
        print(" ", out.stdout.strip() or out.stderr.strip())


if __name__ == "__main__":
    bench_kernels()
    bench_conv_end_to_end()
