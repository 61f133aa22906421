"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py            # kernel table
    python3 benchmarks/bench_kernels.py --step 64  # plus one CAMP-I step per backend

The step benchmark runs in subprocesses because the backend is fixed at
import time by CAMP_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from camp import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(size, rng):
    x = rng.standard_normal((4, size, size, 64)).astype(np.float32)
    xpad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = rng.standard_normal((4, size, size, 3, 3, 32)).astype(np.float32)
    g = rng.standard_normal((4, size // 2, size // 2, 64)).astype(np.float32)
    _, idx = K.np_maxpool2x2_forward(x)
    return {
        "im2col 3x3": (lambda: K.np_im2col(xpad, 3, 1, size, size), lambda: K.nb_im2col(xpad, 3, 1, size, size)),
        "col2im 3x3": (lambda: K.np_col2im(cols, size + 2, size + 2, 1),
                       lambda: K.nb_col2im(cols, size + 2, size + 2, 1)),
        "maxpool fwd": (lambda: K.np_maxpool2x2_forward(x), lambda: K.nb_maxpool2x2_forward(x)),
        "maxpool bwd": (lambda: K.np_maxpool2x2_backward(g, idx), lambda: K.nb_maxpool2x2_backward(g, idx)),
        "leaky fwd": (lambda: K.np_leaky_relu_forward(x, 0.01), lambda: K.nb_leaky_relu_forward(x, 0.01)),
        "leaky bwd": (lambda: K.np_leaky_relu_backward(x, x, 0.01), lambda: K.nb_leaky_relu_backward(x, x, 0.01)),
    }


STEP_SCRIPT = """
import time, numpy as np
from camp import _kernels
from camp.models import build_camp1
from camp import losses
from camp.tensor import Tape
size = {size}
m = build_camp1(seed=0, size=size).train()
x = np.random.default_rng(0).random((4, size, size, 1)).astype(np.float32)
def step():
    m.zero_grad()
    with Tape() as t:
        loss = losses.dice_loss(m.forward(x), x)
    t.backward(loss)
step()
ts = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
print(_kernels.BACKEND, min(ts))
"""


def model_step(size, repeat):
    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ, CAMP_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(size=size, repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        rows.append((backend, float(secs)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64, help="spatial size of the kernel inputs")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", type=int, default=0, metavar="SIZE",
                    help="also time a CAMP-I training step (batch 4) at this image size")
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        sys.exit("numba unavailable (or CAMP_DISABLE_NUMBA set); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, (np_fn, nb_fn) in kernel_cases(args.size, rng).items():
        a, b = np_fn(), nb_fn()
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        t_np, t_nb = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:<14}{t_np * 1e3:10.2f}{t_nb * 1e3:10.2f}{t_np / t_nb:9.2f}  {same}")
    if args.step:
        print(f"\nCAMP-I forward+backward, batch 4 at {args.step}x{args.step}:")
        for backend, secs in model_step(args.step, args.repeat):
            print(f"  {backend:<6} {secs * 1e3:9.1f} ms")


if __name__ == "__main__":
    main()
