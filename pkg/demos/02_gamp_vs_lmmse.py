"""
GAMP with a fixed Gaussian prior is LMMSE
==========================================

With frozen prior variances and noise level the GAMP fixed point is the
linear MMSE estimate. On a mildly conditioned matrix the two agree to
machine precision; at a larger singular-value spread the undamped iteration
runs away and damping brings it back.
"""

import numpy as np

from leo_gfra.gamp import GampDivergence, lmmse, run_fixed_prior

rng = np.random.default_rng(0)


def crandn(*shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def conditioned(rows, cols, cond):
    U, _ = np.linalg.qr(crandn(rows, rows))
    V, _ = np.linalg.qr(crandn(cols, rows))
    return (U * np.geomspace(1.0, 1.0 / cond, rows)) @ V.conj().T


rows, cols, sigma2 = 12, 40, 0.01
theta = rng.uniform(0.5, 2.0, cols)
y = crandn(rows, 1)

for cond in (1.5, 3.0, 10.0):
    X = conditioned(rows, cols, cond)
    ref = lmmse(X, y[:, 0], theta, sigma2)
    for damping in (0.0, 0.3):
        try:
            h, _, diag = run_fixed_prior(X, y, theta[:, None], sigma2, T=500, damping=damping,
                                         restart_damping=damping)
            err = np.linalg.norm(h[:, 0] - ref) / np.linalg.norm(ref)
            print(f"spread {cond:5.1f}  damping {damping:.1f}: relative error {err:.1e}")
        except GampDivergence as e:
            print(f"spread {cond:5.1f}  damping {damping:.1f}: diverged at iteration {e.iteration}")
