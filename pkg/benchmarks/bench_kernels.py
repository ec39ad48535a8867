"""Compare the compiled kernels against the numpy fallback.

Times each hot kernel at shapes taken from a 192x192 training step, then a
full forward/backward/update step under each backend (run in a subprocess so
the backend is chosen at import).

    python benchmarks/bench_kernels.py [--repeat 20] [--no-step]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from carnet import _npkernels

try:
    from carnet import _ckernels
except ImportError:
    _ckernels = None

STEP_SNIPPET = """
import time, numpy as np
from threadpoolctl import threadpool_limits
from carnet.kernels import BACKEND
from carnet.model import CarNet, CarNetConfig, init_params
from carnet.tensor import Rng
from carnet.training import Adam, TrainConfig
m = CarNet(CarNetConfig(input_size=(192, 192)))
init_params(m, Rng(7))
opt = Adam(m, TrainConfig().adam())
r = np.random.default_rng(0)
x = r.random((2, 3, 192, 192), dtype=np.float32)
y = (r.random((2, 1, 192, 192)) < 0.03).astype(np.float32)
def step():
    p = m.forward(x)
    m.zero_grad()
    m.backward_logits(((p - y) / p.size).astype(np.float32))
    opt.step()
with threadpool_limits(1):
    step()
    t = time.perf_counter()
    for _ in range({n}):
        step()
print(BACKEND, (time.perf_counter() - t) / {n})
"""


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(r):
    x = r.standard_normal((2, 64, 48, 48)).astype(np.float32)
    cols = np.ascontiguousarray(_npkernels.im2col(x, 3, 3, 1, 1, 1, 1))
    xp = r.standard_normal((2, 16, 96, 96)).astype(np.float32)
    _, idx = _npkernels.maxpool2_forward(xp)
    gp = r.standard_normal((2, 16, 48, 48)).astype(np.float32)
    gamma, beta = np.ones(64), np.zeros(64)
    _, xhat, _, _, inv = _npkernels.bn_train_forward(x, gamma, beta, 1e-5)
    n = 4_900_000
    p, g = r.standard_normal(n).astype(np.float32), r.standard_normal(n).astype(np.float32)
    m, v = np.zeros(n, np.float32), np.zeros(n, np.float32)
    return {
        "im2col 3x3 (2,64,48,48)": lambda k: k.im2col(x, 3, 3, 1, 1, 1, 1),
        "col2im 3x3 (2,64,48,48)": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1, 1, 1),
        "maxpool fwd (2,16,96,96)": lambda k: k.maxpool2_forward(xp),
        "maxpool bwd (2,16,96,96)": lambda k: k.maxpool2_backward(gp, idx, xp.shape),
        "bn train fwd (2,64,48,48)": lambda k: k.bn_train_forward(x, gamma, beta, 1e-5),
        "bn train bwd (2,64,48,48)": lambda k: k.bn_train_backward(x, xhat, gamma, inv),
        "adam step (4.9M params)": lambda k: k.adam_update(p, g, m, v, 3e-4, 0.9, 0.999, 1e-8, 1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step comparison")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    r = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(r).items():
        t_np = timeit(lambda: fn(_npkernels), args.repeat) * 1e3
        if _ckernels is None:
            print(f"{name:28s} {t_np:10.2f} {'-':>10s} {'-':>8s}")
            continue
        t_c = timeit(lambda: fn(_ckernels), args.repeat) * 1e3
        print(f"{name:28s} {t_np:10.2f} {t_c:10.2f} {t_np / t_c:7.1f}x")
    if args.no_step:
        return 0
    print("\nfull training step, batch 2 @ 192x192, CarNet (7,6,2):")
    for backend in ("python", "cython"):
        if backend == "cython" and _ckernels is None:
            continue
        env = dict(os.environ, CARNET_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:7s} {float(out[1]) * 1e3:8.1f} ms/step")
    return 0


if __name__ == "__main__":
    sys.exit(main())
