"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeats N]

Times im2col / col2im at the generator's layer shapes and one full student
training step with each backend swapped in.
"""

import argparse
import time

import numpy as np

from reko import _pykernels, kernels
from reko.models import Adam, Generator, GeneratorSpec
from reko.tensor import Tensor, abs_, mean, sub

try:
    from reko import _ckernels
except ImportError:
    _ckernels = None

# (name, input shape, k, stride, pad): first encoder conv, bottleneck res conv, last decoder scatter
SHAPES = [
    ("enc0 64x64 k4 s2", (16, 3, 64, 64), 4, 2, 1),
    ("res 8x8 k3 s1", (16, 128, 8, 8), 3, 1, 1),
    ("dec 64x64 k4 s2", (16, 8, 64, 64), 4, 2, 1),
]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def use(backend):
    mod = _ckernels if backend == "cython" else _pykernels
    kernels._im2col, kernels._col2im = mod.im2col, mod.col2im


def train_step(model, opt, x, y):
    out = model(Tensor(x))
    loss = mean(abs_(sub(out, y)))
    opt.zero_grad()
    loss.backward()
    opt.step()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = ["numpy"] + (["cython"] if _ckernels is not None else [])
    rng = np.random.default_rng(0)
    rows = []
    for name, shape, k, s, p in SHAPES:
        x = rng.standard_normal(shape)
        cols = _pykernels.im2col(x, k, s, p)
        for op, fn in (("im2col", lambda m: m.im2col(x, k, s, p)), ("col2im", lambda m: m.col2im(cols, shape, k, s, p))):
            row = [f"{op} {name}"]
            for b in backends:
                mod = _ckernels if b == "cython" else _pykernels
                row.append(best_of(lambda: fn(mod), args.repeats))
            rows.append(row)
    x = rng.uniform(-1, 1, (16, 3, 64, 64))
    y = rng.uniform(-1, 1, (16, 3, 64, 64))
    row = ["student train step (batch 16)"]
    for b in backends:
        use(b)
        model = Generator(GeneratorSpec(base_width=8), seed=0)
        opt = Adam(model.parameters())
        row.append(best_of(lambda: train_step(model, opt, x, y), args.repeats))
    rows.append(row)
    use(kernels.BACKEND)

    head = f"{'case':36s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else "")
    print(head)
    print("-" * len(head))
    for r in rows:
        line = f"{r[0]:36s}" + "".join(f"{t * 1e3:10.2f}ms" for t in r[1:])
        if len(r) == 3:
            line += f"{r[1] / r[2]:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
