"""GPTVQ: greedy column sweep with vector quantization and Hessian error feedback.

Weights are tiled into groups of ``group_rows x group_cols``; each group owns a
codebook.  The sweep walks the columns left to right ``d`` at a time.  When it
enters the first column of a group range, the codebooks of every row band of
that range are fitted by weighted EM on the current (already error-corrected)
weights.  Quantization errors are fed back into the remaining columns of the
current block immediately and into everything right of the block once the
block is done.
"""
from __future__ import annotations

import dataclasses
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .codebook import SUPPORTED_DIMS, Codebook, SeedMethod, Storage, assign_batch, fit_codebooks, quantize_codebook
from .errors import ConfigShapeMismatch, NotPrepared, ShapeMismatch
from .numerics import HessianContext, as_tensor
from .scales import ScaleSet, blockwise_normalize, search_int4_scales

MAX_GROUP_COLS = 256


class Weighting(str, enum.Enum):
    INV_DIAG = "inv_diag"
    CHOL = "chol"


@dataclass
class VQConfig:
    d: int = 2
    bits_per_index: int = 6
    group_size: int = 8192
    group_cols: int | None = None
    block_size: int = 128
    codebook_bits: int = 8
    em_iters: int = 100
    seed_method: SeedMethod = SeedMethod.MAHALANOBIS
    rng_seed: int = 0
    scale_block: int | None = None
    # 0 selects one INT4 scale per GPTVQ group instead of per 128-wide sub-row
    int4_scale_group: int = 128
    weighting: Weighting = Weighting.INV_DIAG

    def __post_init__(self):
        self.seed_method = SeedMethod(self.seed_method)
        self.weighting = Weighting(self.weighting)
        if self.group_cols is None:
            self.group_cols = min(MAX_GROUP_COLS, self.group_size)

    @property
    def k(self) -> int:
        return 1 << self.bits_per_index

    @property
    def group_rows(self) -> int:
        return self.group_size // self.group_cols

    @property
    def storage(self) -> Storage:
        return Storage(self.codebook_bits)

    def validate(self, rows: int | None = None, cols: int | None = None, fitted: bool = True) -> None:
        """Raise ConfigShapeMismatch on inconsistent settings; ``fitted=False`` skips the EM point-count check."""
        d, l, gc, B = self.d, self.group_size, self.group_cols, self.block_size
        problems = []
        if d not in SUPPORTED_DIMS:
            problems.append(f"d={d} not in {SUPPORTED_DIMS}")
        if not 2 <= self.bits_per_index <= 8:
            problems.append(f"bits_per_index={self.bits_per_index} outside 2..8")
        if self.codebook_bits not in (32, 8, 4):
            problems.append(f"codebook_bits={self.codebook_bits} not in (32, 8, 4)")
        if gc <= 0 or gc > MAX_GROUP_COLS:
            problems.append(f"group_cols={gc} must be in 1..{MAX_GROUP_COLS}")
        elif l % gc:
            problems.append(f"group_size={l} not divisible by group_cols={gc}")
        if gc % d or B % d:
            problems.append("group_cols and block_size must be multiples of d")
        if gc > 0 and B > 0 and B % gc and gc % B:
            problems.append(f"block_size={B} and group_cols={gc} must nest")
        if fitted and l // d < self.k:
            problems.append(f"group of {l // d} vectors cannot support {self.k} centroids")
        if self.scale_block is not None:
            if self.scale_block not in (16, 32, 64):
                problems.append("scale_block must be 16, 32 or 64")
            elif gc % self.scale_block or self.scale_block % d:
                problems.append("scale_block must divide group_cols and be a multiple of d")
            if self.codebook_bits == 4:
                problems.append("blockwise normalization cannot be combined with INT4 codebooks")
        if self.codebook_bits == 4:
            sg = self.int4_scale_group
            if sg < 0 or (sg and (gc % sg or sg % d)):
                problems.append(f"int4_scale_group={sg} must divide group_cols and be a multiple of d")
        if rows is not None and cols is not None and not problems:
            if cols % gc:
                problems.append(f"{cols} columns not divisible by group_cols={gc}")
            if rows % self.group_rows:
                problems.append(f"{rows} rows not divisible by group_rows={self.group_rows}")
        if problems:
            raise ConfigShapeMismatch("; ".join(problems))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seed_method"] = self.seed_method.value
        out["weighting"] = self.weighting.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VQConfig":
        return cls(**data)


@dataclass
class QuantizedLayer:
    shape: tuple[int, int]
    config: VQConfig
    codebooks: list[list[Codebook]]
    indices: np.ndarray
    scales: ScaleSet | None = None
    loss: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def bands(self) -> int:
        return self.shape[0] // self.config.group_rows

    @property
    def group_columns(self) -> int:
        return self.shape[1] // self.config.group_cols

    @property
    def n_groups(self) -> int:
        return self.bands * self.group_columns

    def group_slices(self, band: int, gcol: int) -> tuple[slice, slice]:
        """Row slice and index-column slice of a group."""
        cfg = self.config
        per = cfg.group_cols // cfg.d
        return slice(band * cfg.group_rows, (band + 1) * cfg.group_rows), slice(gcol * per, (gcol + 1) * per)

    def group_indices(self, band: int, gcol: int) -> np.ndarray:
        rs, cs = self.group_slices(band, gcol)
        return self.indices[rs, cs].reshape(-1)

    def expanded_scales(self) -> np.ndarray | None:
        if self.scales is None:
            return None
        return self.scales.expand(self.shape, self.config.group_rows, self.config.group_cols)

    def reconstruct(self) -> np.ndarray:
        cfg = self.config
        rows, cols = self.shape
        Q = np.empty((rows, cols), dtype=np.float32)
        for t in range(self.bands):
            for g in range(self.group_columns):
                rs, cs = self.group_slices(t, g)
                vals = self.codebooks[t][g].values()
                tile = vals[self.indices[rs, cs]]
                Q[rs, g * cfg.group_cols:(g + 1) * cfg.group_cols] = tile.reshape(cfg.group_rows, cfg.group_cols)
        S = self.expanded_scales()
        return Q if S is None else Q * S


def reconstruct(ql: QuantizedLayer) -> np.ndarray:
    return ql.reconstruct()


def proxy_loss(W: np.ndarray, W_hat: np.ndarray, H) -> float:
    """``trace((W - W_hat) H (W - W_hat)^T)``; ``H`` may be a matrix or a HessianContext."""
    if isinstance(H, HessianContext):
        H = H.hessian
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if W.shape != W_hat.shape or H.shape != (W.shape[1], W.shape[1]):
        raise ShapeMismatch(f"incompatible shapes {W.shape}, {W_hat.shape}, {H.shape}")
    delta = W - W_hat
    return float(np.einsum("ij,ij->", delta @ H, delta))


def em_weights(ctx: HessianContext, weighting: Weighting | str = Weighting.INV_DIAG) -> np.ndarray:
    """Per-column EM/assignment weights: ``1 / [H^-1]_qq`` or ``1 / U_qq^2``."""
    if Weighting(weighting) is Weighting.INV_DIAG:
        return 1.0 / ctx.inv_diag
    return 1.0 / np.diag(ctx.chol_upper) ** 2


CodebookFn = Callable[[np.ndarray, int, int], Codebook]


def group_seed(rng_seed: int, band: int, gcol: int) -> int:
    return int(np.random.SeedSequence([rng_seed, band, gcol]).generate_state(1)[0])


def _finalize(centroids: np.ndarray, cfg: VQConfig) -> Codebook:
    if cfg.codebook_bits == 32:
        return Codebook(centroids.astype(np.float32))
    if cfg.codebook_bits == 8:
        return quantize_codebook(Codebook(centroids), 8)
    # INT4 pipeline: EM already ran on the INT4 scale, so only clip and round
    return Codebook(np.clip(np.rint(centroids), -8, 7), Storage.INT4, 1.0)


def quantize_layer(
    W: np.ndarray,
    ctx: HessianContext,
    cfg: VQConfig,
    codebook_fn: CodebookFn | None = None,
    workers: int = 1,
) -> QuantizedLayer:
    """Quantize ``W`` (rows x cols) against the prepared Hessian context.

    ``codebook_fn(residual_tile, band, gcol)`` replaces EM fitting with a
    caller-supplied codebook (used for frozen uniform grids).  ``workers``
    splits EM over row bands; results do not depend on it.
    """
    W = as_tensor(W)
    rows, cols = W.shape
    cfg.validate(rows, cols, fitted=codebook_fn is None)
    if not isinstance(ctx, HessianContext) or ctx.chol_upper is None:
        raise NotPrepared("quantize_layer needs a prepared HessianContext")
    if ctx.dim != cols:
        raise ConfigShapeMismatch(f"Hessian is {ctx.dim}x{ctx.dim} but W has {cols} columns")

    d, k, B = cfg.d, cfg.k, cfg.block_size
    gr, gc = cfg.group_rows, cfg.group_cols
    bands, gcols = rows // gr, cols // gc
    U = ctx.chol_upper
    U_diag = np.diag(U)
    D = em_weights(ctx, cfg.weighting)

    Wp = W.astype(np.float64)
    Wp[:, ctx.dead] = 0.0
    Q = np.zeros((rows, cols), dtype=np.float32)
    idx = np.zeros((rows, cols // d), dtype=np.int64)
    codebooks: list[list[Codebook | None]] = [[None] * gcols for _ in range(bands)]

    int4 = cfg.codebook_bits == 4 and codebook_fn is None
    norm = cfg.scale_block is not None and codebook_fn is None
    S = np.ones((rows, cols), dtype=np.float32) if (int4 or norm) else None
    if int4:
        sg = cfg.int4_scale_group
        int4_scales = np.ones((bands, gcols) if sg == 0 else (rows, cols // sg), dtype=np.float32)
    if norm:
        sb = cfg.scale_block
        log_codes = np.zeros((rows, cols // sb), dtype=np.uint8)
        log_step = np.zeros((bands, gcols), dtype=np.float32)
        log_offset = np.zeros((bands, gcols), dtype=np.float32)

    h_diag = np.diag(ctx.hessian)
    vals = None

    def init_group(g: int):
        c0, c1 = g * gc, (g + 1) * gc
        tile = Wp[:, c0:c1]
        if int4:
            if sg == 0:
                for t in range(bands):
                    rs = slice(t * gr, (t + 1) * gr)
                    int4_scales[t, g] = search_int4_scales(tile[rs], h_diag[c0:c1], 0)[0, 0]
                    S[rs, c0:c1] = int4_scales[t, g]
            else:
                blk = search_int4_scales(tile, h_diag[c0:c1], sg)
                int4_scales[:, c0 // sg:c1 // sg] = blk
                S[:, c0:c1] = np.repeat(blk, sg, axis=1)
        if norm:
            _, ss = blockwise_normalize(tile, sb, gr, gc)
            log_codes[:, c0 // sb:c1 // sb] = ss.codes
            log_step[:, g] = ss.step[:, 0]
            log_offset[:, g] = ss.offset[:, 0]
            S[:, c0:c1] = ss.scales.repeat(sb, axis=1)
        scaled = tile if S is None else tile / S[:, c0:c1]

        if codebook_fn is not None:
            for t in range(bands):
                codebooks[t][g] = codebook_fn(scaled[t * gr:(t + 1) * gr].copy(), t, g)
        else:
            pts = scaled.reshape(bands, gr, gc // d, d).reshape(bands, gr * (gc // d), d)
            wts = np.broadcast_to(np.tile(D[c0:c1].reshape(gc // d, d), (gr, 1)), pts.shape)
            seeds = [group_seed(cfg.rng_seed, t, g) for t in range(bands)]
            chunks = np.array_split(np.arange(bands), max(1, min(workers, bands)))

            def fit(sel):
                return fit_codebooks(pts[sel], wts[sel], k, cfg.em_iters, cfg.seed_method, [seeds[t] for t in sel])[0]

            if len(chunks) == 1:
                fitted = [fit(chunks[0])]
            else:
                with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                    fitted = list(pool.map(fit, chunks))
            centroids = np.concatenate(fitted)
            for t in range(bands):
                codebooks[t][g] = _finalize(centroids[t], cfg)
        for t in range(bands):
            if codebooks[t][g].k != k or codebooks[t][g].d != d:
                raise ConfigShapeMismatch("codebook shape does not match the configuration")
        return np.stack([codebooks[t][g].values() for t in range(bands)])

    for b0 in range(0, cols, B):
        b1 = min(b0 + B, cols)
        err_block = np.zeros((rows, b1 - b0))
        for j in range(b0, b1, d):
            if j % gc == 0:
                vals = init_group(j // gc)
            P = slice(j, j + d)
            x = Wp[:, P]
            if S is not None:
                x = x / S[:, P]
            ii, _ = assign_batch(
                x.reshape(bands, gr, d),
                np.broadcast_to(D[P], (bands, gr, d)),
                vals.astype(np.float64),
            )
            q = np.take_along_axis(vals, ii[..., None], axis=1).reshape(rows, d)
            if S is not None:
                q = q * S[:, P]
            Q[:, P] = q
            idx[:, j // d] = ii.reshape(rows)
            err = (Wp[:, P] - q) / U_diag[P]
            if j + d < b1:
                Wp[:, j + d:b1] -= err @ U[P, j + d:b1]
            err_block[:, j - b0:j - b0 + d] = err
        if b1 < cols:
            Wp[:, b1:] -= err_block @ U[b0:b1, b1:]

    scales = None
    if int4:
        scales = ScaleSet(cfg.int4_scale_group, int4_scales)
    elif norm:
        scales = ScaleSet(sb, S[:, ::sb].copy(), "log4", codes=log_codes, step=log_step, offset=log_offset)
    ql = QuantizedLayer((rows, cols), cfg, codebooks, idx, scales)
    ql.loss = proxy_loss(W, ql.reconstruct(), ctx)
    return ql
