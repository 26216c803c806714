"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Times im2col/col2im on slice-sized and volume-sized inputs, then one
forward+backward pass of a conv layer with each backend swapped in.
"""
import argparse
import timeit

import numpy as np

from slice25d import kernels
from slice25d.layers import Conv2d, Conv3d
from slice25d.tensor import Tensor, backward

CASES = [
    # name, input shape, kernel, stride
    ("2d slices 48x32x16x16", (48, 32, 16, 16), (3, 3), (1, 1)),
    ("2d stem 64x1x16x16 s2", (64, 1, 16, 16), (3, 3), (2, 2)),
    ("3d 8x16x16x16x16", (8, 16, 16, 16, 16), (3, 3, 3), (1, 1, 1)),
    ("3d 64x1x16x16x16 s2", (64, 1, 16, 16, 16), (3, 3, 3), (2, 2, 2)),
]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_lowering(impl, shape, k, s, repeat):
    x = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    if len(k) == 2:
        fwd = lambda: impl.im2col2d(x, *k, *s)
        cols = fwd()
        bwd = lambda: impl.col2im2d(cols, *shape, *k, *s)
    else:
        fwd = lambda: impl.im2col3d(x, *k, *s)
        cols = fwd()
        bwd = lambda: impl.col2im3d(cols, *shape, *k, *s)
    return best(fwd, repeat), best(bwd, repeat)


def bench_layer(name, shape, k, s, repeat):
    rng = np.random.default_rng(0)
    layer = (Conv2d if len(k) == 2 else Conv3d)(shape[1], 16, k[0], s[0], k[0] // 2, rng=rng)
    x = Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)

    def step():
        backward(layer(x).sum())

    return best(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    backends = {"cython": compiled, "python": kernels.get_backend("python")}

    print(f"{'case':28s} {'op':10s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}")
    active = kernels._impl
    try:
        for name, shape, k, s in CASES:
            low = {b: bench_lowering(impl, shape, k, s, args.repeat) for b, impl in backends.items()}
            layer = {}
            for b, impl in backends.items():
                kernels._impl = impl
                layer[b] = bench_layer(name, shape, k, s, args.repeat)
            rows = [("im2col", low["cython"][0], low["python"][0]),
                    ("col2im", low["cython"][1], low["python"][1]),
                    ("conv f+b", layer["cython"], layer["python"])]
            for op, c, p in rows:
                print(f"{name:28s} {op:10s} {c * 1e3:10.2f} {p * 1e3:10.2f} {p / c:7.2f}x")
    finally:
        kernels._impl = active


if __name__ == "__main__":
    main()
