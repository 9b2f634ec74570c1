"""Layout compositor timing: numba kernel vs numpy fallback vs pure python.

    python benchmarks/bench_layout.py --size 64 --objects 8 --repeat 20

The numba path is JIT-compiled once before timing.  Results are checked for
exact agreement before any number is printed.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from mocgan import kernels


def random_scene(n_obj: int, dim: int, rng: np.random.Generator):
    lo = rng.uniform(0, 0.7, (n_obj, 2))
    hi = lo + rng.uniform(0.05, 0.3, (n_obj, 2))
    boxes = np.concatenate([lo, np.minimum(hi, 1.0)], 1)
    pairs = np.array([(i, k) for i in range(n_obj) for k in range(n_obj) if i != k], dtype=np.int64)
    v_o = rng.standard_normal((n_obj, dim)).astype(np.float32)
    v_r = rng.standard_normal((len(pairs), dim)).astype(np.float32)
    return v_o, v_r, boxes.astype(np.float32), pairs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--objects", type=int, default=8)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--python", action="store_true", help="also time the uninstrumented python loops (slow)")
    args = ap.parse_args(argv)

    scene = random_scene(args.objects, args.dim, np.random.default_rng(0))
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else []) + (["python"] if args.python else [])
    ref = kernels.compose_layout(*scene, args.size, args.size, backend="numpy")
    for b in backends:
        out = kernels.compose_layout(*scene, args.size, args.size, backend=b)  # warm-up / JIT
        assert np.array_equal(out, ref), f"{b} disagrees with numpy"

    print(f"{args.objects} objects, {len(scene[3])} phrases, {args.dim}-d, {args.size}x{args.size}")
    for b in backends:
        n = 1 if b == "python" else args.repeat
        t = min(timeit.repeat(lambda: kernels.compose_layout(*scene, args.size, args.size, backend=b),
                              number=n, repeat=3)) / n
        print(f"  {b:7s} {t * 1e3:9.3f} ms")
    if not kernels.HAVE_NUMBA:
        print("  numba unavailable (or MOCGAN_DISABLE_NUMBA set)")


if __name__ == "__main__":
    main()
