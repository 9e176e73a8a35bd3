"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on inputs sized like the fast training profile; the table
shows the best of N runs per backend and checks both give the same answer.
"""

import argparse
import timeit

import numpy as np

from handdiff import _pykernels, kernels
from handdiff import synthetic as syn

try:
    from handdiff import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    cloud = rng.normal(size=(1024, 3))
    queries = rng.normal(size=(21 * 32, 3))
    model = syn.HandModel()
    s, e, r = model.capsules(syn.sample_pose(model, rng).skeleton)
    pts = rng.normal(size=(2000, 3)) * 40 + [0, 0, 500]
    idx = rng.integers(0, 64, size=4096)
    src = rng.normal(size=(4096, 32))
    pool = rng.normal(size=(21 * 32, 32, 64))
    _, arg = _pykernels.max_pool_mid(pool)
    grad = rng.normal(size=(21 * 32, 64))
    return {
        "knn 672x1024 k=16": lambda k: k.knn(queries, cloud, 16),
        "fps 1024->512": lambda k: k.farthest_point_sample(cloud, 512, 0),
        "render 128x128": lambda k: k.render_capsules(s, e, r, 240.0, 240.0, 64.0, 64.0, 128, 128),
        "splat 2000 pts": lambda k: k.splat_points(pts, 240.0, 240.0, 64.0, 64.0, 128, 128),
        "scatter_add 4096x32": lambda k: k.scatter_add_rows(np.zeros((64, 32)), idx, src),
        "max_pool 672x32x64": lambda k: k.max_pool_mid(pool),
        "max_pool backward": lambda k: k.max_pool_mid_backward(grad, arg, 32),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return
    print(f"{'kernel':<22}{'cython ms':>11}{'numpy ms':>11}{'speedup':>9}  match")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for label, impl in (("c", _ckernels), ("py", _pykernels)):
            times[label] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) * 1e3
        ok = same(fn(_ckernels), fn(_pykernels))
        print(f"{name:<22}{times['c']:>11.2f}{times['py']:>11.2f}{times['py'] / times['c']:>8.1f}x  {ok}")
    print(f"active backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
