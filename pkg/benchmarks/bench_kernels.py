"""Compiled kernels versus the numpy fallback.

    python benchmarks/bench_kernels.py [--groups 20000] [--repeat 5]

Both backends are imported directly, so the ``MXTRAIN_PURE_PYTHON`` switch
does not matter here.  Outputs are checked for bit equality before timing.
"""

import argparse
import time

import numpy as np

from mxtrain import _kernels_py
from mxtrain.formats import E2M1
from mxtrain.kernels import RULE_MICROSCALING, RULE_TRUNCATION_FREE

try:
    from mxtrain import _kernels as _compiled
except ImportError:
    _compiled = None


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def _cases(groups, uniforms, ema):
    g, c, e = E2M1.grid, E2M1.code_of_index, E2M1.e_max
    return {
        "scale (truncation-free)": lambda k: k.scale_exponents(groups, E2M1.q_pos, e, RULE_TRUNCATION_FREE),
        "quantize nearest": lambda k: k.quantize_groups(groups, g, c, e, RULE_TRUNCATION_FREE),
        "quantize stochastic": lambda k: k.quantize_groups(groups, g, c, e, RULE_TRUNCATION_FREE, uniforms),
        "quantize microscaling": lambda k: k.quantize_groups(groups, g, c, e, RULE_MICROSCALING),
        "quantize ema": lambda k: k.quantize_groups_ema(groups, ema, g, c, e),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")

    rng = np.random.default_rng(0)
    groups = rng.normal(size=(args.groups, 32)) * 2.0 ** rng.integers(-8, 8, size=(args.groups, 1))
    uniforms = rng.random(groups.shape)
    ema = groups + rng.normal(scale=0.01, size=groups.shape)
    n = groups.size

    print(f"{n} elements, best of {args.repeat}")
    print(f"{'kernel':<24}{'cython ns/el':>14}{'numpy ns/el':>14}{'speedup':>10}")
    for name, fn in _cases(groups, uniforms, ema).items():
        a, b = fn(_compiled), fn(_kernels_py)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_array_equal(x, y)
        tc = _best(lambda: fn(_compiled), args.repeat)
        tp = _best(lambda: fn(_kernels_py), args.repeat)
        print(f"{name:<24}{tc / n * 1e9:>14.1f}{tp / n * 1e9:>14.1f}{tp / tc:>9.1f}x")

    codes, exps = _compiled.quantize_groups(groups, E2M1.grid, E2M1.code_of_index, E2M1.e_max, RULE_TRUNCATION_FREE)
    tc = _best(lambda: _compiled.dequantize_groups(codes, exps, E2M1.decode_table), args.repeat)
    tp = _best(lambda: _kernels_py.dequantize_groups(codes, exps, E2M1.decode_table), args.repeat)
    print(f"{'dequantize':<24}{tc / n * 1e9:>14.1f}{tp / n * 1e9:>14.1f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
