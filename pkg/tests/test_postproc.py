import numpy as np
import pytest

from gptvq import postproc
from gptvq.codebook import Codebook, Storage
from gptvq.engine import QuantizedLayer, VQConfig, proxy_loss, quantize_layer
from gptvq.errors import ConfigShapeMismatch, ShapeMismatch, UnsupportedDimensionality
from gptvq.numerics import HessianContext, prepare_context
from gptvq.postproc import (
    blockwise_normalize,
    codebook_update,
    denormalize,
    int4_pipeline,
    quantize_codebook,
    svd_compress_codebooks,
)
from gptvq.scales import apply_log_scale
from oracles import normal_equations_codebook, random_spd


def small_layer(rng, rows=4, cols=8, k_bits=1, bands=1):
    """Hand-built d=1 layer with random assignments and real codebooks."""
    k = 1 << k_bits
    cfg = VQConfig(d=1, bits_per_index=k_bits, group_size=rows * cols // bands, group_cols=cols,
                   codebook_bits=32)
    idx = rng.integers(0, k, (rows, cols))
    cbs = [[Codebook(rng.standard_normal((k, 1)).astype(np.float32))] for _ in range(bands)]
    return QuantizedLayer((rows, cols), cfg, cbs, idx)


def test_update_identity_single_cluster_is_mean():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((4, 8))
    ql = small_layer(rng)
    ql.indices[:] = 0
    out = codebook_update(W, np.eye(8), ql, steps=10)
    assert out.codebooks[0][0].centroids[0, 0] == pytest.approx(W.mean(), rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_update_matches_normal_equations(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((4, 8))
    H = random_spd(8, rng)
    ql = small_layer(rng)
    out = codebook_update(W, H, ql, steps=100)
    hist = out.extras["codebook_update_history"]
    assert np.all(np.diff(hist) <= 0)
    _, best = normal_equations_codebook(W, H, postproc._entry_map(ql), 2)
    assert out.loss <= best * (1 + 1e-3) + 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_update_joint_over_bands(seed):
    rng = np.random.default_rng(10 + seed)
    W = rng.standard_normal((4, 8))
    H = random_spd(8, rng)
    ql = small_layer(rng, k_bits=2, bands=2)
    out = codebook_update(W, H, ql, steps=200)
    _, best = normal_equations_codebook(W, H, postproc._entry_map(ql), 2 * 4)
    assert out.loss <= best * (1 + 1e-3) + 1e-12


@pytest.mark.parametrize("bits", [32, 8, 4])
def test_update_never_hurts_engine_layers(bits):
    rng = np.random.default_rng(bits)
    W = rng.standard_normal((16, 128)).astype(np.float32)
    ctx = prepare_context(random_spd(128, rng))
    cfg = VQConfig(d=2, bits_per_index=4, group_size=1024, group_cols=64, codebook_bits=bits,
                   int4_scale_group=64)
    ql = quantize_layer(W, ctx, cfg)
    out = codebook_update(W, ctx, ql, steps=30)
    assert out.loss <= ql.loss * (1 + 1e-12)
    assert all(cb.storage is cfg.storage for row in out.codebooks for cb in row)
    assert out.loss == pytest.approx(proxy_loss(W, out.reconstruct(), ctx), rel=1e-9)


def test_update_shape_checks():
    rng = np.random.default_rng(1)
    ql = small_layer(rng)
    with pytest.raises(ShapeMismatch):
        codebook_update(np.zeros((4, 9)), np.eye(8), ql)
    with pytest.raises(ShapeMismatch):
        codebook_update(np.zeros((4, 8)), np.eye(9), ql)


def test_quantize_codebook_reexport():
    q = quantize_codebook(Codebook(np.array([[-1.27], [1.27]])), 8)
    assert q.centroids[:, 0].tolist() == [-127, 127]


def test_int4_requires_four_bits():
    with pytest.raises(ConfigShapeMismatch):
        int4_pipeline(np.zeros((4, 64)), HessianContext.identity(64), VQConfig(d=1, group_size=256, group_cols=64))


def _grid_check(ql):
    Q = ql.reconstruct()
    S = ql.expanded_scales()
    codes = np.rint(Q.astype(np.float64) / S)
    assert codes.min() >= -8 and codes.max() <= 7
    assert np.array_equal(codes.astype(np.float32) * S, Q)


@pytest.mark.parametrize("sg", [128, 32, 0])
def test_int4_on_grid(sg):
    rng = np.random.default_rng(sg)
    W = rng.standard_normal((16, 256)).astype(np.float32)
    ctx = prepare_context(random_spd(256, rng))
    cfg = VQConfig(d=2, bits_per_index=5, group_size=2048, codebook_bits=4, int4_scale_group=sg)
    ql = int4_pipeline(W, ctx, cfg)
    assert all(cb.storage is Storage.INT4 and cb.scale == 1.0 for row in ql.codebooks for cb in row)
    _grid_check(ql)


def test_int4_representable_exact():
    rng = np.random.default_rng(5)
    codes = np.tile(np.arange(-8, 8), (8, 8))
    W = (rng.permuted(codes, axis=1) * 0.25).astype(np.float32)
    cfg = VQConfig(d=1, bits_per_index=4, group_size=1024, group_cols=128, codebook_bits=4, int4_scale_group=0)
    ql = int4_pipeline(W, HessianContext.identity(128, 0.01), cfg)
    np.testing.assert_array_equal(ql.reconstruct(), W)


def test_int4_close_to_int8():
    ratios = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((32, 256)).astype(np.float32)
        ctx = prepare_context(random_spd(256, rng))
        base = dict(d=2, bits_per_index=6, group_size=4096)
        l8 = quantize_layer(W, ctx, VQConfig(codebook_bits=8, **base)).loss
        l4 = int4_pipeline(W, ctx, VQConfig(codebook_bits=4, **base)).loss
        ratios.append(l4 / l8)
    assert np.median(ratios) <= 1.3


def test_svd_full_rank_exact():
    rng = np.random.default_rng(6)
    W = rng.standard_normal((32, 256)).astype(np.float32)
    ctx = prepare_context(random_spd(256, rng))
    cfg = VQConfig(d=1, bits_per_index=4, group_size=256, codebook_bits=32)
    ql = quantize_layer(W, ctx, cfg)
    out = svd_compress_codebooks(W, ctx, ql, rank=16, gd_steps=0, quantize_factors=False)
    before = np.sort(np.stack([cb.values()[:, 0] for row in ql.codebooks for cb in row]), axis=1)
    after = np.stack([cb.values()[:, 0] for row in out.codebooks for cb in row])
    np.testing.assert_allclose(after, before, atol=1e-5)
    assert out.loss == pytest.approx(ql.loss, rel=1e-5)


def test_svd_sorting_preserves_reconstruction():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((16, 128)).astype(np.float32)
    cfg = VQConfig(d=1, bits_per_index=3, group_size=128, codebook_bits=32)
    ql = quantize_layer(W, HessianContext.identity(128, 0.01), cfg)
    out = svd_compress_codebooks(W, np.eye(128), ql, rank=8, gd_steps=0, quantize_factors=False)
    for row in out.codebooks:
        for cb in row:
            assert np.all(np.diff(cb.values()[:, 0]) >= 0)
    np.testing.assert_allclose(out.reconstruct(), ql.reconstruct(), atol=1e-5)


@pytest.mark.parametrize("quantize", [False, True])
def test_svd_rank_one_exact(quantize):
    rng = np.random.default_rng(8)
    base = np.sort(rng.standard_normal(8))
    mult = rng.uniform(0.5, 2.0, 4)
    cfg = VQConfig(d=1, bits_per_index=3, group_size=64, group_cols=64, codebook_bits=32)
    cbs = [[Codebook((m * base)[:, None].astype(np.float32))] for m in mult]
    idx = rng.integers(0, 8, (4, 64))
    ql = QuantizedLayer((4, 64), cfg, cbs, idx)
    W = ql.reconstruct()
    out = svd_compress_codebooks(W, np.eye(64), ql, rank=1, gd_steps=0, quantize_factors=quantize)
    np.testing.assert_allclose(out.reconstruct(), W, rtol=1e-5, atol=1e-6)


def test_svd_half_rank_gd_improves():
    rng = np.random.default_rng(9)
    W = rng.standard_normal((32, 256)).astype(np.float32)
    ctx = prepare_context(random_spd(256, rng))
    cfg = VQConfig(d=1, bits_per_index=4, group_size=256, codebook_bits=8)
    ql = quantize_layer(W, ctx, cfg)
    out = svd_compress_codebooks(W, ctx, ql, rank=8, gd_steps=50)
    hist = out.extras["svd"]["history"]
    assert hist[-1] <= hist[0]
    assert np.all(np.diff(hist) <= 0)
    assert out.extras["svd"]["U_codes"].dtype == np.int8
    assert all(cb.storage is Storage.INT8 for row in out.codebooks for cb in row)


def test_svd_rejects_vectors():
    rng = np.random.default_rng(10)
    W = rng.standard_normal((8, 64)).astype(np.float32)
    cfg = VQConfig(d=2, bits_per_index=3, group_size=512, group_cols=64)
    ql = quantize_layer(W, HessianContext.identity(64, 0.01), cfg)
    with pytest.raises(UnsupportedDimensionality):
        svd_compress_codebooks(W, np.eye(64), ql, rank=2)


def test_log_scale_example():
    out = apply_log_scale(np.array([0.5, -2.0, 1.0]), 1, 1.0, 0.0)
    np.testing.assert_allclose(out, [0.25, -1.0, 0.5])


def test_blockwise_constant_maxabs():
    rng = np.random.default_rng(11)
    W = rng.choice([-3.0, 3.0], (4, 64)) * rng.uniform(0.1, 1, (4, 64))
    W[:, ::16] = 3.0
    scaled, ss = blockwise_normalize(W, 16)
    assert np.unique(ss.codes).size == 1
    assert ss.step.min() == np.float32(1e-8)
    np.testing.assert_allclose(scaled * 3.0, W, rtol=1e-6)


@pytest.mark.parametrize("block", [16, 32, 64])
def test_blockwise_roundtrip(block):
    rng = np.random.default_rng(block)
    W = rng.standard_normal((8, 256)) * rng.lognormal(0, 2, (8, 256))
    scaled, ss = blockwise_normalize(W, block, 4, 128)
    assert ss.codes.min() >= 0 and ss.codes.max() <= 15 and np.all(ss.scales > 0)
    np.testing.assert_allclose(denormalize(scaled, ss, 4, 128), W, rtol=1e-6)
    maxabs = np.abs(scaled).reshape(8, -1, block).max(-1)
    # quantized log scales put every block maximum within one log step of 1
    assert np.all(np.abs(np.log2(maxabs)) <= ss.step.max() / 2 + 1e-6)


def test_blockwise_zero_block_passthrough():
    W = np.ones((2, 32))
    W[0, :16] = 0
    scaled, ss = blockwise_normalize(W, 16)
    assert ss.codes[0, 0] == 0
    np.testing.assert_array_equal(scaled[0, :16], 0)
    with pytest.raises(ShapeMismatch):
        blockwise_normalize(np.ones((2, 40)), 16)


def test_blockwise_engine_roundtrip():
    rng = np.random.default_rng(12)
    W = (rng.standard_normal((16, 128)) * rng.lognormal(0, 1, (16, 1))).astype(np.float32)
    ctx = prepare_context(random_spd(128, rng))
    cfg = VQConfig(d=2, bits_per_index=4, group_size=1024, group_cols=64, scale_block=16)
    ql = quantize_layer(W, ctx, cfg)
    assert ql.scales.encoding == "log4"
    plain = quantize_layer(W, ctx, VQConfig(d=2, bits_per_index=4, group_size=1024, group_cols=64))
    assert ql.loss < plain.loss


def test_svd_factor_refit_after_rounding():
    rng = np.random.default_rng(13)
    W = rng.standard_normal((32, 256)).astype(np.float32)
    ctx = prepare_context(random_spd(256, rng))
    ql = quantize_layer(W, ctx, VQConfig(d=1, bits_per_index=4, group_size=256, codebook_bits=32))
    out = svd_compress_codebooks(W, ctx, ql, rank=16, gd_steps=20)
    hist = out.extras["svd"]["requant_history"]
    assert np.all(np.diff(hist) <= 0) and hist[-1] < hist[0]
    # the final loss is the refit objective, since real32 codebooks are not requantized
    assert out.loss == pytest.approx(hist[-1], rel=1e-6)
