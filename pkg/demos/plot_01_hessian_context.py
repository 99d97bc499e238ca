"""
Hessian context from calibration activations
============================================

The quantizer only sees a layer through ``H = X X^T``.  We build it from
random activations, damp it, and look at the pieces the sweep consumes.
"""
import numpy as np

from gptvq import build_hessian, prepare_context

rng = np.random.default_rng(0)
X = rng.standard_normal((64, 2048)) + 0.5 * rng.standard_normal((1, 2048))
X[7] = 0  # a dead input channel

ctx = prepare_context(build_hessian(X), damp_frac=0.01)
print("damping lambda       :", round(ctx.damp_lambda, 3))
print("dead columns         :", np.flatnonzero(ctx.dead))

# U is the upper Cholesky factor of H^-1, so U^T U recovers the inverse
Hinv = ctx.chol_upper.T @ ctx.chol_upper
print("max |U^T U - H^-1|   :", np.abs(Hinv - np.linalg.inv(ctx.hessian)).max())

# EM weights each coordinate by 1 / [H^-1]_jj
print("inverse-diag weights :", np.round(1 / ctx.inv_diag[:6], 1))
