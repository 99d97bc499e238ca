"""
Codebook post-processing
========================

After the sweep, codebooks can be refined against the Hessian loss,
compressed with a low-rank factorization (d=1), or stored in INT4.
"""
import numpy as np

from gptvq import (
    VQConfig,
    blockwise_normalize,
    codebook_update,
    int4_pipeline,
    prepare_context,
    quantize_layer,
    svd_compress_codebooks,
)

rng = np.random.default_rng(3)
W = rng.standard_normal((64, 256)).astype(np.float32)
X = rng.standard_normal((256, 2048)) + rng.standard_normal((1, 2048))
ctx = prepare_context(X @ X.T)

ql = quantize_layer(W, ctx, VQConfig(d=2, bits_per_index=6, group_size=4096))
up = codebook_update(W, ctx, ql, steps=25)
print(f"codebook update   {ql.loss:9.1f} -> {up.loss:9.1f}")

q4 = int4_pipeline(W, ctx, VQConfig(d=2, bits_per_index=6, group_size=4096, codebook_bits=4))
print(f"INT4 codebooks    {q4.loss:9.1f}  (INT8 {ql.loss:.1f})")

q1 = quantize_layer(W, ctx, VQConfig(d=1, bits_per_index=4, group_size=256))
for r in (16, 8, 4):
    s = svd_compress_codebooks(W, ctx, q1, rank=r, gd_steps=30)
    print(f"SVD rank {r:2d}       {s.loss:9.1f}  (full codebooks {q1.loss:.1f})")

# blockwise normalization: every 16-wide block gets a 4-bit log-domain scale
heavy = W * rng.lognormal(0, 1.5, W.shape).astype(np.float32)
scaled, ss = blockwise_normalize(heavy, 16)
print("normalized block max range:", np.abs(scaled).reshape(64, -1, 16).max(-1).min().round(3),
      "to", np.abs(scaled).reshape(64, -1, 16).max(-1).max().round(3))
