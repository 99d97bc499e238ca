import math

import numpy as np
import pytest
from scipy import integrate, stats

from gptvq.baselines import (
    CSV_HEADER,
    SweepMethod,
    ar1_synthetic,
    gptq_uniform,
    rtn_quantize,
    run_sweep,
    sqnr_db,
    sweep_group_shape,
    sweep_group_size,
)
from gptvq.errors import BadBits, InfeasibleOverhead, ZeroSignal
from gptvq.numerics import HessianContext, prepare_context
from oracles import brute_force_best, gptq_reference, proxy, random_spd, uniform_grid


def test_rtn_rounding_case():
    W = np.array([[0.34, 0.7, 0.0, -0.2]], dtype=np.float32)  # maxabs 0.7 -> s = 0.1 at 4 bits
    Q = rtn_quantize(W, 4, 4)
    assert Q[0, 0] == pytest.approx(0.3, abs=1e-6)


def test_rtn_grid_fixed_point():
    grid = uniform_grid(1.4, 3)[1:]  # drop -8s so the row maxabs is exactly 7s
    W = np.tile(grid, (2, 1))
    np.testing.assert_array_equal(rtn_quantize(W, 3, 7), W)


def test_rtn_error_bound_and_zero_group():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((8, 128)).astype(np.float32)
    W[0, :64] = 0
    Q = rtn_quantize(W, 4, 64)
    s = np.abs(W.reshape(8, 2, 64)).max(-1) / 7
    err = np.abs(Q - W).reshape(8, 2, 64)
    clamped = (W.reshape(8, 2, 64) < -8 * s[..., None])
    assert np.all(err[~clamped] <= (s[..., None] / 2 * (1 + 1e-6)).repeat(64, -1)[~clamped])
    assert not Q[0, :64].any()


def test_rtn_bad_bits():
    with pytest.raises(BadBits):
        rtn_quantize(np.ones((1, 4)), 1, 4)


def test_gptq_identity_equals_rtn():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((16, 256)).astype(np.float32)
    Q = gptq_uniform(W, HessianContext.identity(256, 0.01), 4, 64)
    assert Q.tobytes() == rtn_quantize(W, 4, 64).tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_gptq_matches_reference(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((8, 64)).astype(np.float32)
    H = random_spd(64, rng)
    ctx = prepare_context(H)
    Q = gptq_uniform(W, ctx, 3, 16, block_size=32)
    ref = gptq_reference(W, H, lambda r: uniform_grid(float(np.abs(r).max()), 3), group_size=16)
    assert proxy(W, Q, ctx.hessian) == pytest.approx(proxy(W, ref, ctx.hessian), rel=1e-6)


def test_gptq_beats_rtn_mostly():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(50 + seed)
        W = rng.standard_normal((8, 64)).astype(np.float32)
        ctx = prepare_context(random_spd(64, rng))
        wins += proxy(W, gptq_uniform(W, ctx, 3, 64), ctx.hessian) <= proxy(W, rtn_quantize(W, 3, 64), ctx.hessian)
    assert wins >= 19


def test_gptq_near_brute_force():
    ratios = []
    for seed in range(9):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((2, 4)).astype(np.float32)
        ctx = prepare_context(random_spd(4, rng))
        Q = gptq_uniform(W, ctx, 2, 4, block_size=4)
        grids = [uniform_grid(float(np.abs(W[r]).max()), 2) for r in range(2)]
        best = brute_force_best(W, ctx.hessian, grids)
        ratios.append(proxy(W, Q, ctx.hessian) / best)
    assert np.median(ratios) <= 1.10


def test_sqnr_cases():
    W = np.random.default_rng(2).standard_normal((4, 4))
    assert sqnr_db(W, W) == math.inf
    assert sqnr_db(W, np.zeros_like(W)) == pytest.approx(0.0)
    assert sqnr_db(3 * W, 3 * (W + 0.1)) == pytest.approx(sqnr_db(W, W + 0.1), abs=1e-9)
    with pytest.raises(ZeroSignal):
        sqnr_db(np.zeros((2, 2)), np.ones((2, 2)))


def test_sqnr_gaussian_3bit_quadrature():
    # maxabs of 4096-sample groups sits near 3.4-3.6 sigma; use the realized scale
    rng = np.random.default_rng(3)
    x = rng.standard_normal((256, 4096))
    Q = rtn_quantize(x.astype(np.float32), 3, 4096)
    measured = sqnr_db(x, Q)
    s = np.median(np.abs(x).max(1)) / 3
    grid = np.arange(-4, 4) * s
    edges = np.concatenate([[-np.inf], (grid[1:] + grid[:-1]) / 2, [np.inf]])
    noise = sum(integrate.quad(lambda t, g=g: (t - g) ** 2 * stats.norm.pdf(t), lo, hi)[0]
                for g, lo, hi in zip(grid, edges[:-1], edges[1:]))
    assert abs(measured - 10 * np.log10(1 / noise)) <= 1.0


def test_ar1_statistics():
    W = ar1_synthetic(512, 512, 0.5, seed=4)
    assert W.dtype == np.float32
    assert np.var(W) == pytest.approx(1.0, rel=0.02)
    corr = np.mean(W[:, 1:] * W[:, :-1])
    assert corr == pytest.approx(0.5, abs=0.02)


def test_sweep_group_sizes():
    assert sweep_group_size(1, 3, 0.25) == 256
    assert sweep_group_size(2, 3, 0.25) == 4096
    assert sweep_group_size(4, 3, 0.25) == 524288
    assert sweep_group_shape(4096, 2, 1024, 1024) == (16, 256)
    assert sweep_group_shape(524288, 4, 1024, 1024) == (1024, 512)
    with pytest.raises(InfeasibleOverhead):
        sweep_group_size(1, 3, 0.3)
    with pytest.raises(InfeasibleOverhead):
        sweep_group_shape(524288, 4, 64, 64)


def test_sweep_small(tmp_path):
    W = ar1_synthetic(256, 2048, 0.5, seed=5)
    path = tmp_path / "s.csv"
    rep = run_sweep(W, None, 0.25, 3, em_iters=20, csv_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 5
    assert [r.method for r in rep.rows] == list(SweepMethod)
    for r in rep.rows:
        assert abs(r.overhead_bpv - 0.25) <= 0.01
    by = rep.by_method()
    assert by[SweepMethod.UNIFORM_RTN].sqnr_db < by[SweepMethod.NONUNIFORM_1D].sqnr_db < by[SweepMethod.VQ_2D].sqnr_db


def test_sweep_infeasible():
    with pytest.raises(InfeasibleOverhead):
        run_sweep(ar1_synthetic(16, 256, 0.5), None, 0.25, 3)
