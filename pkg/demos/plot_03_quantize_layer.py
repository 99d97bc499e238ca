"""
Quantizing one layer with error feedback
========================================

``quantize_layer`` sweeps the columns, assigns each d-dimensional vector to
its codebook and pushes the rounding error onto not-yet-quantized columns.
Compare against assigning the same codebooks with no feedback.
"""
import numpy as np

from gptvq import VQConfig, bits_per_value, prepare_context, proxy_loss, quantize_layer

rng = np.random.default_rng(2)
W = rng.standard_normal((128, 512)).astype(np.float32)
X = rng.standard_normal((512, 4096)) + rng.standard_normal((1, 4096))
ctx = prepare_context(X @ X.T)

for d, bits in [(1, 3), (2, 6)]:
    cfg = VQConfig(d=d, bits_per_index=bits, group_size=8192 if d == 2 else 1024)
    ql = quantize_layer(W, ctx, cfg)

    # nearest-centroid assignment with the very same codebooks
    nearest = np.empty_like(W)
    gr, gc = cfg.group_rows, cfg.group_cols
    for t in range(ql.bands):
        for g in range(ql.group_columns):
            rs, cs = slice(t * gr, (t + 1) * gr), slice(g * gc, (g + 1) * gc)
            vals = ql.codebooks[t][g].values()
            vecs = W[rs, cs].reshape(-1, d)
            idx = ((vecs[:, None] - vals[None]) ** 2).sum(-1).argmin(1)
            nearest[rs, cs] = vals[idx].reshape(W[rs, cs].shape)
    print(f"d={d} bpv={bits_per_value(cfg):.4f}  loss with feedback {ql.loss:10.1f}"
          f"  without {proxy_loss(W, nearest, ctx):10.1f}")
