"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are called explicitly through ``use_numba`` so one process
covers both; ``ADAPROM_NUMBA`` only changes the default. The first numba
call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from adaprom import _accel
from adaprom.fem import BEAM_MATERIAL, rectangle_torsion_constant
from adaprom.kernels import element_frames, element_matrices, sbr_batch
from adaprom.sbr import PolynomialBasis, design_matrix


def element_case(n_elements):
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(n_elements, 3))
    L, R = element_frames(x1, x1 + rng.normal(size=(n_elements, 3)))
    b = h = 1e-3
    args = (BEAM_MATERIAL.youngs_modulus, BEAM_MATERIAL.shear_modulus, BEAM_MATERIAL.density,
            b * h, b * h ** 3 / 12, h * b ** 3 / 12, rectangle_torsion_constant(b, h))
    return lambda use: element_matrices(L, R, *args, use_numba=use)


def sbr_case(n_targets, n_samples):
    # a reduced order of about 40 gives ~2500 upper-triangle entries per operator
    rng = np.random.default_rng(1)
    X = design_matrix(rng.uniform(size=(n_samples, 2)), PolynomialBasis(2, 4))
    beta = rng.normal(size=(n_targets, X.shape[1])) * (rng.uniform(size=(n_targets, 15)) < 0.4)
    T = beta @ X.T + 1e-3 * rng.normal(size=(n_targets, n_samples))
    return lambda use: sbr_batch(X, T, use_numba=use)


def run(repeat):
    cases = [("element matrices, 1800 elements", element_case(1800)),
             ("element matrices, 20000 elements", element_case(20000)),
             ("SBR batch, 2500 targets x 20 samples", sbr_case(2500, 20)),
             ("SBR batch, 300 targets x 40 samples", sbr_case(300, 40))]
    print(f"{'kernel':40s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>8s}")
    for name, fn in cases:
        fn(True)  # compile or load from cache
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=repeat)) * 1e3
        print(f"{name:40s} {t_np:12.2f} {t_nb:12.2f} {t_np / t_nb:8.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    run(args.repeat)


if __name__ == "__main__":
    main()
