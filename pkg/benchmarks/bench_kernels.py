"""Time the compiled kernels against the numpy fallback and check they agree.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from contrail import _kernels_py
from contrail.kernels import compiled_backend


def zbuffer_case(rng, n_points=20000, n_pix=128 * 128):
    pix = rng.integers(0, n_pix, n_points)
    depth = rng.random(n_points)
    depth[::7] = 0.5  # force some depth ties
    return (pix, depth, n_pix)


def lattice_case(rng, views=5, size=128, points=24 ** 3):
    heat = rng.random((views, size, size))
    rows = rng.uniform(-2, size + 2, (views, points))
    cols = rng.uniform(-2, size + 2, (views, points))
    return (heat, rows, cols)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    if compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    cases = {"zbuffer_winners": zbuffer_case(rng), "lattice_scores": lattice_case(rng)}
    print(f"{'kernel':<18}{'python ms':>12}{'compiled ms':>13}{'speedup':>9}  agree")
    for name, inputs in cases.items():
        py_fn = getattr(_kernels_py, name)
        c_fn = getattr(compiled_backend, name)
        ref, out = py_fn(*inputs), c_fn(*inputs)
        agree = np.array_equal(ref, out) if ref.dtype.kind == "i" else np.allclose(ref, out, rtol=0, atol=1e-12)
        t_py = min(timeit.repeat(lambda: py_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: c_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_py:>12.3f}{t_c:>13.3f}{t_py / t_c:>8.1f}x  {agree}")


if __name__ == "__main__":
    main()
