"""Uniform baselines (RTN, GPTQ), SQNR, and the dimensionality sweep at matched overhead."""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .codebook import Codebook, assign_batch, fit_codebooks, quantize_codebook
from .engine import VQConfig, em_weights, proxy_loss, quantize_layer
from .errors import BadBits, InfeasibleOverhead, ShapeMismatch, ZeroSignal
from .numerics import HessianContext, as_tensor

# a 16-bit scale per uniform group, so the overhead is 16 / group_size
UNIFORM_SCALE_BITS = 16
SWEEP_DIMS = (1, 2, 4)


def _check_bits(bits: int) -> None:
    if bits < 2:
        raise BadBits(f"uniform quantization needs at least 2 bits, got {bits}")


def uniform_grid(maxabs: float, bits: int) -> np.ndarray:
    """Symmetric grid ``{-2^(b-1) .. 2^(b-1)-1} * s`` with ``s = maxabs / (2^(b-1)-1)``, float32.

    A zero group uses ``s = 1`` so zeros pass through.
    """
    qmax = (1 << (bits - 1)) - 1
    s = np.float32(maxabs / qmax) if maxabs > 0 else np.float32(1.0)
    return np.arange(-(1 << (bits - 1)), qmax + 1).astype(np.float32) * s


def rtn_quantize(W: np.ndarray, bits: int, group_size: int) -> np.ndarray:
    """Round-to-nearest on groups of ``group_size`` consecutive row entries.

    Rounding picks the nearest grid value; an exact midpoint goes to the
    lower value, the same rule the sweep engine applies.
    """
    _check_bits(bits)
    W = as_tensor(W)
    rows, cols = W.shape
    if group_size <= 0 or cols % group_size:
        raise ShapeMismatch(f"group_size={group_size} does not divide {cols} columns")
    ng = cols // group_size
    tiles = W.reshape(rows * ng, group_size).astype(np.float64)
    grids = np.stack([uniform_grid(m, bits) for m in np.abs(tiles).max(axis=1)])
    idx, _ = assign_batch(tiles[..., None], np.ones(tiles.shape + (1,)), grids[..., None].astype(np.float64))
    return np.take_along_axis(grids, idx, axis=1).reshape(rows, cols)


def gptq_uniform(
    W: np.ndarray,
    ctx: HessianContext,
    bits: int,
    group_size: int,
    block_size: int = 128,
    return_layer: bool = False,
):
    """GPTQ: the d=1 sweep against a frozen uniform grid per group.

    Each group's scale is taken from the error-corrected weights at the
    moment the sweep reaches it.
    """
    _check_bits(bits)
    cfg = VQConfig(d=1, bits_per_index=bits, group_size=group_size, group_cols=group_size,
                   block_size=block_size, codebook_bits=32)

    def frozen_grid(tile, band, gcol):
        return Codebook(uniform_grid(float(np.abs(tile).max(initial=0.0)), bits)[:, None])

    ql = quantize_layer(W, ctx, cfg, codebook_fn=frozen_grid)
    return ql if return_layer else ql.reconstruct()


def sqnr_db(W: np.ndarray, W_hat: np.ndarray) -> float:
    """``10 log10(mean(W^2) / mean((W - W_hat)^2))``; ``inf`` for an exact reconstruction."""
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape:
        raise ShapeMismatch(f"shapes differ: {W.shape} vs {W_hat.shape}")
    signal = np.mean(W * W)
    if signal == 0:
        raise ZeroSignal("reference tensor is all zero")
    noise = np.mean((W - W_hat) ** 2)
    if noise == 0:
        return math.inf
    return float(10.0 * np.log10(signal / noise))


def ar1_synthetic(rows: int, cols: int, rho: float = 0.5, seed: int = 0) -> np.ndarray:
    """Gaussian rows with unit variance and AR(1) correlation ``rho`` along columns."""
    if not -1 < rho < 1:
        raise ValueError("rho must lie in (-1, 1)")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((rows, cols))
    out = np.empty((rows, cols))
    out[:, 0] = eps[:, 0]
    innov = math.sqrt(1.0 - rho * rho)
    for j in range(1, cols):
        out[:, j] = rho * out[:, j - 1] + innov * eps[:, j]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

class SweepMethod(str, enum.Enum):
    UNIFORM_RTN = "UniformRTN"
    NONUNIFORM_1D = "NonUniform1D"
    VQ_2D = "VQ2D"
    VQ_4D = "VQ4D"


_VQ_METHODS = {1: SweepMethod.NONUNIFORM_1D, 2: SweepMethod.VQ_2D, 4: SweepMethod.VQ_4D}
CSV_HEADER = "method,bpv,overhead_bpv,sqnr_db,proxy_loss"


@dataclass
class SweepRow:
    method: SweepMethod
    bpv: float
    overhead_bpv: float
    sqnr_db: float
    proxy_loss: float
    group_size: int = 0
    group_shape: tuple[int, int] = (0, 0)


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)

    def by_method(self) -> dict[SweepMethod, SweepRow]:
        return {r.method: r for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            vals = [r.bpv, r.overhead_bpv, r.sqnr_db, r.proxy_loss]
            buf.write(",".join([r.method.value] + [f"{v:.6g}" for v in vals]) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def sweep_group_size(d: int, index_bits: int, target_overhead_bpv: float, codebook_bits: int = 8) -> int:
    """Group size ``l`` solving ``k d b_c / l = target`` for ``k = 2^(d * index_bits)``."""
    k = 1 << (d * index_bits)
    target = Fraction(target_overhead_bpv).limit_denominator(1 << 20)
    if target <= 0:
        raise InfeasibleOverhead("overhead target must be positive")
    l = Fraction(k * d * codebook_bits) / target
    if l.denominator != 1:
        raise InfeasibleOverhead(f"no integer group size gives {target_overhead_bpv} bpv overhead for d={d}")
    return int(l)


def sweep_group_shape(l: int, d: int, rows: int, cols: int) -> tuple[int, int]:
    """Tile ``(group_rows, group_cols)`` of ``l`` weights; columns widen past 256 only when needed."""
    gc = min(256, l)
    while gc <= min(l, cols):
        gr = l // gc
        if l % gc == 0 and cols % gc == 0 and gc % d == 0 and gr <= rows and rows % gr == 0:
            return gr, gc
        gc *= 2
    raise InfeasibleOverhead(f"a {rows}x{cols} matrix cannot be tiled into groups of {l}")


def _vq_representational(W, D, d, k, gr, gc, codebook_bits, em_iters, seed_method):
    """Per-group EM and nearest assignment without error feedback."""
    rows, cols = W.shape
    bands, gcols = rows // gr, cols // gc
    tiles = W.astype(np.float64).reshape(bands, gr, gcols, gc).transpose(0, 2, 1, 3)
    pts = tiles.reshape(bands * gcols, gr * gc // d, d)
    wts = np.broadcast_to(D.reshape(1, gcols, 1, gc // d, d), (bands, gcols, gr, gc // d, d))
    wts = wts.reshape(pts.shape)
    c, _, _ = fit_codebooks(pts, wts, k, em_iters, seed_method)
    if codebook_bits != 32:
        c = np.stack([quantize_codebook(Codebook(cg), codebook_bits).values() for cg in c]).astype(np.float64)
    idx, _ = assign_batch(pts, wts, c)
    q = np.take_along_axis(c, idx[..., None], axis=1)
    return q.reshape(bands, gcols, gr, gc).transpose(0, 2, 1, 3).reshape(rows, cols)


def run_sweep(
    W: np.ndarray,
    ctx: HessianContext | None = None,
    target_overhead_bpv: float = 0.25,
    index_bits: int = 3,
    codebook_bits: int = 8,
    em_iters: int = 100,
    seed_method: str = "mahalanobis",
    csv_path=None,
) -> SweepReport:
    """Uniform RTN vs 1D / 2D / 4D codebooks at equal index bits and codebook overhead.

    The identity Hessian is used when ``ctx`` is None; proxy losses are
    always measured against ``ctx.hessian``.
    """
    _check_bits(index_bits)
    W = as_tensor(W)
    rows, cols = W.shape
    if ctx is None:
        ctx = HessianContext.identity(cols)
    if ctx.dim != cols:
        raise ShapeMismatch(f"Hessian is {ctx.dim}x{ctx.dim} but W has {cols} columns")
    D = em_weights(ctx)

    report = SweepReport()
    g = Fraction(UNIFORM_SCALE_BITS) / Fraction(target_overhead_bpv).limit_denominator(1 << 20)
    if g.denominator != 1 or cols % int(g):
        raise InfeasibleOverhead(f"no uniform group size gives {target_overhead_bpv} bpv of scale overhead")
    g = int(g)
    W_hat = rtn_quantize(W, index_bits, g)
    over = UNIFORM_SCALE_BITS / g
    report.rows.append(SweepRow(SweepMethod.UNIFORM_RTN, index_bits + over, over, sqnr_db(W, W_hat),
                                proxy_loss(W, W_hat, ctx), g, (1, g)))

    for d in SWEEP_DIMS:
        k = 1 << (d * index_bits)
        l = sweep_group_size(d, index_bits, target_overhead_bpv, codebook_bits)
        if l > rows * cols or l // d < k:
            raise InfeasibleOverhead(f"d={d} needs groups of {l} weights, larger than the layer allows")
        gr, gc = sweep_group_shape(l, d, rows, cols)
        W_hat = _vq_representational(W, D[:cols], d, k, gr, gc, codebook_bits, em_iters, seed_method)
        over = k * d * codebook_bits / l
        report.rows.append(SweepRow(_VQ_METHODS[d], index_bits + over, over, sqnr_db(W, W_hat),
                                    proxy_loss(W, W_hat, ctx), l, (gr, gc)))
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
