"""Per-block scale sets: log-domain 4-bit normalization scales and INT4 codebook scales.

A ``ScaleSet`` describes an elementwise float32 multiplier for a weight
matrix.  Scales are attached to consecutive sub-rows of ``granularity``
columns; ``granularity == 0`` means one scale per GPTVQ group tile.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

LOG4_LEVELS = 16
MIN_LOG_STEP = 1e-8
SHRINK_GRID = np.linspace(0.30, 1.00, 64)


@dataclass
class ScaleSet:
    granularity: int
    scales: np.ndarray
    encoding: str = "real"
    codes: np.ndarray | None = None
    step: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32)
        if not np.all(self.scales > 0):
            raise ValueError("scales must be strictly positive")
        if self.encoding not in ("real", "log4"):
            raise ValueError(f"unknown scale encoding {self.encoding!r}")
        if self.encoding == "log4":
            if self.codes is None or self.step is None or self.offset is None:
                raise ValueError("log4 scale sets need codes, step and offset")
            if self.codes.min(initial=0) < 0 or self.codes.max(initial=0) >= LOG4_LEVELS:
                raise ValueError("log4 codes must lie in [0, 15]")

    def expand(self, shape: tuple[int, int], group_rows: int, group_cols: int) -> np.ndarray:
        """Dense (rows, cols) float32 multiplier."""
        rows, cols = shape
        if self.granularity == 0:
            full = np.repeat(np.repeat(self.scales, group_rows, axis=0), group_cols, axis=1)
        else:
            full = np.repeat(self.scales, self.granularity, axis=1)
        if full.shape != (rows, cols):
            raise ShapeMismatch(f"scale set expands to {full.shape}, expected {(rows, cols)}")
        return full


def log4_scale_values(codes: np.ndarray, step, offset) -> np.ndarray:
    """``2 ** (step * code + offset)`` as float32; step/offset broadcast against codes."""
    a = np.asarray(step, dtype=np.float32).astype(np.float64)
    z = np.asarray(offset, dtype=np.float32).astype(np.float64)
    return np.exp2(a * np.asarray(codes, dtype=np.float64) + z).astype(np.float32)


def log4_encode(maxabs: np.ndarray):
    """Quantize positive block maxima to 4-bit codes in log2 space.

    Returns ``(codes, step, offset)``.  ``offset`` is the smallest log2 scale so
    code 0 maps to it; zero blocks get code 0.  With no non-zero block the
    offset is 0 (unit scale).
    """
    maxabs = np.asarray(maxabs, dtype=np.float64)
    live = maxabs > 0
    if not live.any():
        return np.zeros(maxabs.shape, dtype=np.uint8), np.float32(MIN_LOG_STEP), np.float32(0.0)
    logs = np.log2(np.where(live, maxabs, 1.0))
    lo = logs[live].min()
    hi = logs[live].max()
    step = np.float32(max((hi - lo) / (LOG4_LEVELS - 1), MIN_LOG_STEP))
    offset = np.float32(lo)
    codes = np.rint((logs - float(offset)) / float(step))
    codes = np.clip(np.where(live, codes, 0), 0, LOG4_LEVELS - 1).astype(np.uint8)
    return codes, step, offset


def apply_log_scale(block: np.ndarray, code: int, step: float, offset: float) -> np.ndarray:
    """Normalize one block: ``w * 2 ** (-step * code - offset)``."""
    return np.asarray(block, dtype=np.float64) / log4_scale_values(code, step, offset).astype(np.float64)


def blockwise_normalize(W: np.ndarray, block: int, group_rows: int | None = None, group_cols: int | None = None):
    """Divide every ``block``-wide sub-row by its log-quantized max-abs scale.

    ``step`` and ``offset`` are shared per column-group tile
    (``group_rows x group_cols``, default: the whole matrix).  Returns
    ``(scaled, ScaleSet)``; ``denormalize`` inverts it exactly with the same
    quantized scales.
    """
    W = np.asarray(W, dtype=np.float64)
    rows, cols = W.shape
    if block <= 0:
        raise ValueError(f"invalid block size {block}")
    if cols % block:
        raise ShapeMismatch(f"{cols} columns are not divisible by block {block}")
    group_rows = rows if group_rows is None else group_rows
    group_cols = cols if group_cols is None else group_cols
    if rows % group_rows or cols % group_cols or group_cols % block:
        raise ShapeMismatch("group tiling incompatible with matrix / block size")
    nb = cols // block
    maxabs = np.abs(W).reshape(rows, nb, block).max(axis=2)
    bands, gcols = rows // group_rows, cols // group_cols
    per = group_cols // block
    codes = np.zeros((rows, nb), dtype=np.uint8)
    step = np.zeros((bands, gcols), dtype=np.float32)
    offset = np.zeros((bands, gcols), dtype=np.float32)
    for t in range(bands):
        for g in range(gcols):
            rs = slice(t * group_rows, (t + 1) * group_rows)
            cs = slice(g * per, (g + 1) * per)
            codes[rs, cs], step[t, g], offset[t, g] = log4_encode(maxabs[rs, cs])
    a_full = np.repeat(np.repeat(step, group_rows, axis=0), per, axis=1)
    z_full = np.repeat(np.repeat(offset, group_rows, axis=0), per, axis=1)
    scales = log4_scale_values(codes, a_full, z_full)
    ss = ScaleSet(block, scales, "log4", codes=codes, step=step, offset=offset)
    return W / ss.expand(W.shape, group_rows, group_cols), ss


def denormalize(scaled: np.ndarray, ss: ScaleSet, group_rows: int | None = None, group_cols: int | None = None) -> np.ndarray:
    scaled = np.asarray(scaled, dtype=np.float64)
    rows, cols = scaled.shape
    gr = rows if group_rows is None else group_rows
    gc = cols if group_cols is None else group_cols
    return scaled * ss.expand(scaled.shape, gr, gc)


def uniform_int_quant(w: np.ndarray, s, bits: int = 4) -> np.ndarray:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return np.clip(np.rint(w / s), lo, hi) * s


def search_int4_scales(W: np.ndarray, h: np.ndarray, group: int, bits: int = 4) -> np.ndarray:
    """Per ``group``-wide sub-row, the scale minimizing the h-weighted INT error.

    Candidates are ``p * s0`` for 64 shrink factors p in [0.30, 1.00], where
    ``s0 = max(max(w) / 7, -min(w) / 8)`` (4 bits) is the smallest scale that
    clips nothing; ties keep the smaller p.  All-zero sub-rows get scale 1.
    Returns float32 scales of shape (rows, cols // group); ``group == 0`` means a
    single scale for the whole of ``W``.
    """
    W = np.asarray(W, dtype=np.float64)
    rows, cols = W.shape
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (cols,))
    if group == 0:
        flat = W.reshape(1, 1, -1)
        hb = np.tile(h, rows).reshape(1, 1, -1)
    else:
        if cols % group:
            raise ShapeMismatch(f"{cols} columns not divisible by scale group {group}")
        flat = W.reshape(rows, cols // group, group)
        hb = h.reshape(1, cols // group, group)
    qmax = (1 << (bits - 1)) - 1
    # smallest scale that clips nothing on the asymmetric range [-qmax-1, qmax]
    base = np.maximum(flat.max(axis=-1) / qmax, -flat.min(axis=-1) / (qmax + 1))
    base = np.maximum(base, 0.0)
    best = np.full(base.shape, np.inf)
    out = np.ones(base.shape)
    for p in SHRINK_GRID:
        s = np.where(base > 0, p * base, 1.0)
        err = np.sum(hb * (flat - uniform_int_quant(flat, s[..., None], bits)) ** 2, axis=-1)
        better = err < best
        best = np.where(better, err, best)
        out = np.where(better, s, out)
    out = np.where(base > 0, out, 1.0).astype(np.float32)
    # float32 rounding must not produce a zero scale
    return np.maximum(out, np.finfo(np.float32).tiny)
