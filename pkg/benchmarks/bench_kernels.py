"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow toy-vgg on 32x32 inputs with a training batch of 16.
"""
import argparse
import timeit

import numpy as np

from obalex import _pykernels

try:
    from obalex import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x1 = rng.normal(size=(16, 1, 32, 32))
    w1 = rng.normal(size=(4, 1, 3, 3))
    x4 = rng.normal(size=(16, 4, 32, 32))
    w4 = rng.normal(size=(8, 4, 3, 3))
    d4 = rng.normal(size=(16, 8, 32, 32))
    pool_in = rng.normal(size=(16, 8, 32, 32))
    xd = rng.normal(size=(16, 256))
    wd = rng.normal(size=(32, 256))
    dd = rng.normal(size=(16, 32))
    yield "conv fwd 1->4", lambda k: k.conv2d_forward(x1, w1, np.zeros(4), 1, 1)
    yield "conv fwd 4->8", lambda k: k.conv2d_forward(x4, w4, np.zeros(8), 1, 1)
    yield "conv bwd 4->8", lambda k: k.conv2d_backward(x4, w4, d4, 1, 1)
    yield "maxpool fwd", lambda k: k.maxpool_forward(pool_in, 2, 2)
    yield "dense fwd", lambda k: k.dense_forward(xd, wd, np.zeros(32))
    yield "dense bwd", lambda k: k.dense_backward(xd, wd, dd)


def best_ms(fn, repeat):
    fn()  # warm up
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = [("python", _pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name, _ in backends) + ("     speedup" if _ckernels else ""))
    for label, call in cases(np.random.default_rng(0)):
        times = [best_ms(lambda k=k: call(k), args.repeat) for _, k in backends]
        row = f"{label:<16}" + "".join(f"{t:>10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.2f}x"
        print(row)
    if _ckernels is None:
        print("compiled kernels not built; only the fallback was timed")


if __name__ == "__main__":
    main()
