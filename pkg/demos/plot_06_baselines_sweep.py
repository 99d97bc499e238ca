"""
Uniform vs vector quantization at matched overhead
==================================================

At 3 index bits per weight and 0.25 bits of overhead, compare uniform RTN
against 1D, 2D and 4D codebooks on AR(1)-correlated Gaussian weights.
A smaller matrix keeps this quick; the acceptance gate uses 1024x1024.
"""
from gptvq import ar1_synthetic, gptq_uniform, prepare_context, rtn_quantize, run_sweep, sqnr_db

W = ar1_synthetic(512, 1024, rho=0.5, seed=0)
report = run_sweep(W, None, target_overhead_bpv=0.25, index_bits=3, em_iters=30)
print(report.to_csv())

# with a real Hessian, GPTQ's error feedback beats plain rounding on the proxy loss
import numpy as np

rng = np.random.default_rng(0)
X = rng.standard_normal((1024, 4096)) + rng.standard_normal((1, 4096))
ctx = prepare_context(X @ X.T)
for name, Q in [("rtn", rtn_quantize(W, 4, 128)), ("gptq", gptq_uniform(W, ctx, 4, 128))]:
    D = (W - Q).astype(np.float64)
    print(f"{name:5s} sqnr {sqnr_db(W, Q):6.2f} dB  proxy {np.einsum('ij,jk,ik->', D, ctx.hessian, D):12.1f}")
