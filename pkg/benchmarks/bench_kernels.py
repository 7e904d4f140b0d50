"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time for each backend.
"""
import argparse
import sys
import timeit

import numpy as np

from condnoise.kernels import available_backends


def cases(rng):
    plane = rng.random((1024, 1024))
    x = rng.random((8, 64, 32, 32))
    w = rng.random((64, 3, 3))
    g = rng.random(x.shape)
    return {
        "patch_moments 1024^2 O=16": lambda k: k.patch_moments(plane, 16),
        "patch_moments 1024^2 O=8": lambda k: k.patch_moments(plane, 8),
        "depthwise3x3 8x64x32x32": lambda k: k.depthwise3x3(x, w),
        "depthwise3x3_backward": lambda k: k.depthwise3x3_backward(g, x, w),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is timed", file=sys.stderr)
    names = sorted(backends)
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat)) for n in names]
        row = f"{label:32s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(names) == 2:
            row += f"{times[names.index('python')] / times[names.index('cython')]:11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
