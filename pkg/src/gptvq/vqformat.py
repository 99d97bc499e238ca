"""Bit-exact ``.gvq`` container, sub-byte index packing and LUT decode.

Layout (all integers little-endian)::

    header   magic "GVQ1" | version u16 | rows u32 | cols u32 | d u8
             | bits_per_index u8 | codebook_bits u8 | group_rows u32
             | group_cols u32 | flags u8 | scale_group u32
    groups   row-major over (band, group column), each:
             codebook   k*d float32                      (codebook_bits == 32)
                        scale float32 + k*d int8 codes   (codebook_bits 8 or 4)
             flags bit0 step f32 | offset f32 | 4-bit log-scale codes, packed
             flags bit1 float32 INT4 scales (one per scale group)
             indices    packed LSB-first, padded to a whole byte

``scale_group`` holds the blockwise-normalization block width when bit0 is
set, the INT4 scale-group width when bit1 is set (0: one scale per group).
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .codebook import Codebook, Storage
from .engine import QuantizedLayer, VQConfig
from .errors import CorruptHeader, IndexOutOfRange, NonCanonicalPadding, NotIntegerCodebook, ShortBuffer
from .scales import ScaleSet, log4_scale_values

MAGIC = b"GVQ1"
VERSION = 1
HEADER = struct.Struct("<4sHIIBBBIIBI")
FLAG_LOG_SCALES = 0x01
FLAG_INT4_SCALES = 0x02
HW_LUT_ENTRIES = 64


# ---------------------------------------------------------------------------
# index packing
# ---------------------------------------------------------------------------

def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_indices(idx, bits: int) -> bytes:
    """Pack indices LSB-first: index i occupies stream bits [i*bits, (i+1)*bits)."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in 1..16, got {bits}")
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << bits)):
        raise IndexOutOfRange(f"index outside [0, {1 << bits}) for {bits}-bit packing")
    if idx.size == 0:
        return b""
    bitmat = ((idx[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def unpack_indices(buf, count: int, bits: int, strict: bool = False) -> np.ndarray:
    """Inverse of ``pack_indices``; ``strict`` rejects non-zero pad bits."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in 1..16, got {bits}")
    need = packed_size(count, bits)
    raw = np.frombuffer(bytes(buf[:need]) if not isinstance(buf, np.ndarray) else buf[:need].tobytes(), dtype=np.uint8)
    if raw.size < need:
        raise ShortBuffer(f"{count} {bits}-bit indices need {need} bytes, got {raw.size}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    stream = np.unpackbits(raw, bitorder="little")
    used = count * bits
    if strict and stream[used:].any():
        raise NonCanonicalPadding("non-zero pad bits after the last index")
    fields = stream[:used].reshape(count, bits).astype(np.int64)
    return fields @ (np.int64(1) << np.arange(bits, dtype=np.int64))


# ---------------------------------------------------------------------------
# LUT decode
# ---------------------------------------------------------------------------

@dataclass
class DecodeLUT:
    tables: np.ndarray  # (d, k) int8, table p maps index -> code of coordinate p
    scale: float

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        """(n, d) float32 values; one table lookup per coordinate."""
        codes = np.stack([table[idx] for table in self.tables], axis=-1)
        return codes.astype(np.float32) * np.float32(self.scale)


def build_lut(cb: Codebook, hardware: bool = False) -> DecodeLUT:
    """Per-coordinate int8 tables for an integer-stored codebook.

    ``hardware=True`` enforces the 64-entry limit of 6-bit LUT instructions.
    """
    if not cb.is_integer:
        raise NotIntegerCodebook("LUT decode needs an INT8/INT4 codebook")
    if cb.k > 256 or (hardware and cb.k > HW_LUT_ENTRIES):
        raise ValueError(f"codebook with {cb.k} entries does not fit the LUT")
    return DecodeLUT(np.ascontiguousarray(cb.centroids.T.astype(np.int8)), cb.scale)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def bits_per_value_exact(cfg: VQConfig) -> Fraction:
    return Fraction(cfg.bits_per_index, cfg.d) + Fraction(cfg.k * cfg.d * cfg.codebook_bits, cfg.group_size)


def bits_per_value(cfg: VQConfig) -> float:
    """``log2(k)/d + k*d*b_c/l``; scale payloads are excluded."""
    return float(bits_per_value_exact(cfg))


def scale_overhead_bpv(cfg: VQConfig) -> float:
    """Scale payload cost per weight, counted as 16-bit INT4 scales / 4-bit log codes."""
    if cfg.codebook_bits == 4:
        per = cfg.int4_scale_group or cfg.group_size
        return 16 / per
    if cfg.scale_block is not None:
        return 4 / cfg.scale_block + 32 / cfg.group_size
    return 0.0


def _flags(cfg: VQConfig) -> int:
    flags = 0
    if cfg.scale_block is not None:
        flags |= FLAG_LOG_SCALES
    if cfg.codebook_bits == 4:
        flags |= FLAG_INT4_SCALES
    return flags


def _scale_field(cfg: VQConfig) -> int:
    if cfg.scale_block is not None:
        return cfg.scale_block
    if cfg.codebook_bits == 4:
        return cfg.int4_scale_group
    return 0


def _group_layout(d, bits, cb_bits, gr, gc, flags, scale_group):
    k = 1 << bits
    cb_bytes = 4 * k * d if cb_bits == 32 else 4 + k * d
    scale_bytes = 0
    if flags & FLAG_LOG_SCALES:
        scale_bytes = 8 + packed_size(gr * (gc // scale_group), 4)
    if flags & FLAG_INT4_SCALES:
        scale_bytes = 4 * (1 if scale_group == 0 else gr * (gc // scale_group))
    idx_bytes = packed_size(gr * gc // d, bits)
    return cb_bytes, scale_bytes, idx_bytes


def container_nbytes(cfg: VQConfig, rows: int, cols: int) -> int:
    """Exact serialized size of a layer with this configuration."""
    n_groups = (rows // cfg.group_rows) * (cols // cfg.group_cols)
    parts = _group_layout(cfg.d, cfg.bits_per_index, cfg.codebook_bits, cfg.group_rows,
                          cfg.group_cols, _flags(cfg), _scale_field(cfg))
    return HEADER.size + n_groups * sum(parts)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class GvqHeader:
    rows: int
    cols: int
    d: int
    bits_per_index: int
    codebook_bits: int
    group_rows: int
    group_cols: int
    flags: int
    scale_group: int
    version: int = VERSION

    @property
    def k(self) -> int:
        return 1 << self.bits_per_index

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.rows, self.cols, self.d, self.bits_per_index,
                           self.codebook_bits, self.group_rows, self.group_cols, self.flags, self.scale_group)


@dataclass
class GroupSection:
    codebook: Codebook
    indices: np.ndarray
    log_step: float | None = None
    log_offset: float | None = None
    log_codes: np.ndarray | None = None
    int4_scales: np.ndarray | None = None


@dataclass
class GvqContainer:
    header: GvqHeader
    groups: list[GroupSection]
    nbytes: int

    @property
    def bands(self) -> int:
        return self.header.rows // self.header.group_rows

    @property
    def group_columns(self) -> int:
        return self.header.cols // self.header.group_cols


def serialize(ql: QuantizedLayer) -> bytes:
    cfg = ql.config
    rows, cols = ql.shape
    flags, sfield = _flags(cfg), _scale_field(cfg)
    header = GvqHeader(rows, cols, cfg.d, cfg.bits_per_index, cfg.codebook_bits,
                       cfg.group_rows, cfg.group_cols, flags, sfield)
    out = [header.pack()]
    gr, gc = cfg.group_rows, cfg.group_cols
    ss = ql.scales
    for t in range(ql.bands):
        for g in range(ql.group_columns):
            cb = ql.codebooks[t][g]
            if cb.storage is not cfg.storage:
                raise ValueError(f"group ({t},{g}) codebook storage {cb.storage} != {cfg.storage}")
            if cfg.codebook_bits == 32:
                out.append(cb.centroids.astype("<f4").tobytes())
            else:
                out.append(struct.pack("<f", cb.scale))
                out.append(cb.centroids.astype(np.int8).tobytes())
            rs = slice(t * gr, (t + 1) * gr)
            if flags & FLAG_LOG_SCALES:
                per = gc // sfield
                out.append(struct.pack("<ff", float(ss.step[t, g]), float(ss.offset[t, g])))
                out.append(pack_indices(ss.codes[rs, g * per:(g + 1) * per].reshape(-1), 4))
            if flags & FLAG_INT4_SCALES:
                if sfield == 0:
                    vals = ss.scales[t:t + 1, g:g + 1]
                else:
                    per = gc // sfield
                    vals = ss.scales[rs, g * per:(g + 1) * per]
                out.append(np.ascontiguousarray(vals, dtype="<f4").tobytes())
            out.append(pack_indices(ql.group_indices(t, g), cfg.bits_per_index))
    return b"".join(out)


def _parse_header(buf: bytes) -> GvqHeader:
    if len(buf) < HEADER.size:
        raise ShortBuffer(f"container shorter than its {HEADER.size}-byte header")
    magic, version, rows, cols, d, bits, cb_bits, gr, gc, flags, sfield = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptHeader(f"unsupported version {version}")
    h = GvqHeader(rows, cols, d, bits, cb_bits, gr, gc, flags, sfield, version)
    bad = (
        d not in (1, 2, 4) or not 1 <= bits <= 16 or cb_bits not in (32, 8, 4)
        or gr == 0 or gc == 0 or rows % gr or cols % gc or gc % d
        or flags & ~(FLAG_LOG_SCALES | FLAG_INT4_SCALES)
        or (flags & FLAG_LOG_SCALES and flags & FLAG_INT4_SCALES)
        or bool(flags & FLAG_INT4_SCALES) != (cb_bits == 4)
        or (flags & FLAG_LOG_SCALES and (sfield == 0 or gc % sfield))
        or (flags & FLAG_INT4_SCALES and sfield and gc % sfield)
    )
    if bad:
        raise CorruptHeader(f"inconsistent header fields {h}")
    return h


def parse_container(buf: bytes, strict: bool = False) -> GvqContainer:
    buf = bytes(buf)
    h = _parse_header(buf)
    k, d = h.k, h.d
    gr, gc = h.group_rows, h.group_cols
    cb_bytes, scale_bytes, idx_bytes = _group_layout(d, h.bits_per_index, h.codebook_bits, gr, gc,
                                                     h.flags, h.scale_group)
    n_groups = (h.rows // gr) * (h.cols // gc)
    total = HEADER.size + n_groups * (cb_bytes + scale_bytes + idx_bytes)
    if len(buf) < total:
        raise ShortBuffer(f"container needs {total} bytes, got {len(buf)}")
    if len(buf) > total:
        raise CorruptHeader(f"{len(buf) - total} trailing bytes after the last group")
    storage = Storage(h.codebook_bits)
    pos = HEADER.size
    groups = []
    for _ in range(n_groups):
        if storage is Storage.REAL32:
            cb = Codebook(np.frombuffer(buf, "<f4", k * d, pos).reshape(k, d).astype(np.float32))
        else:
            (scale,) = struct.unpack_from("<f", buf, pos)
            codes = np.frombuffer(buf, np.int8, k * d, pos + 4).reshape(k, d)
            lo, hi = storage.code_range
            if codes.min() < lo or codes.max() > hi or not (np.isfinite(scale) and scale > 0):
                raise CorruptHeader("codebook codes or scale out of range")
            cb = Codebook(codes.copy(), storage, scale)
        pos += cb_bytes
        sec = GroupSection(cb, np.empty(0, dtype=np.int64))
        if h.flags & FLAG_LOG_SCALES:
            sec.log_step, sec.log_offset = struct.unpack_from("<ff", buf, pos)
            n_codes = gr * (gc // h.scale_group)
            sec.log_codes = unpack_indices(buf[pos + 8:pos + scale_bytes], n_codes, 4, strict).reshape(gr, -1)
        if h.flags & FLAG_INT4_SCALES:
            vals = np.frombuffer(buf, "<f4", scale_bytes // 4, pos).astype(np.float32)
            if not np.all(np.isfinite(vals) & (vals > 0)):
                raise CorruptHeader("non-positive INT4 scale")
            sec.int4_scales = vals.reshape(1, 1) if h.scale_group == 0 else vals.reshape(gr, -1)
        pos += scale_bytes
        sec.indices = unpack_indices(buf[pos:pos + idx_bytes], gr * gc // d, h.bits_per_index, strict)
        if sec.indices.size and sec.indices.max() >= k:
            raise CorruptHeader("index exceeds codebook size")
        pos += idx_bytes
        groups.append(sec)
    return GvqContainer(h, groups, total)


def decode_container(c, strict: bool = False) -> np.ndarray:
    """Dequantize a container (or its raw bytes) into a float32 (rows, cols) matrix."""
    if not isinstance(c, GvqContainer):
        c = parse_container(c, strict)
    h = c.header
    gr, gc, d = h.group_rows, h.group_cols, h.d
    out = np.empty((h.rows, h.cols), dtype=np.float32)
    for n, sec in enumerate(c.groups):
        t, g = divmod(n, c.group_columns)
        if sec.codebook.is_integer:
            vals = build_lut(sec.codebook).lookup(sec.indices)
        else:
            vals = sec.codebook.centroids[sec.indices]
        tile = vals.reshape(gr, gc)
        if sec.log_codes is not None:
            mult = log4_scale_values(sec.log_codes, sec.log_step, sec.log_offset)
            tile = tile * np.repeat(mult, h.scale_group, axis=1)
        elif sec.int4_scales is not None:
            if h.scale_group == 0:
                tile = tile * sec.int4_scales
            else:
                tile = tile * np.repeat(sec.int4_scales, h.scale_group, axis=1)
        out[t * gr:(t + 1) * gr, g * gc:(g + 1) * gc] = tile
    return out


def load_layer(c, strict: bool = False, config: VQConfig | None = None) -> QuantizedLayer:
    """Rebuild an in-memory QuantizedLayer from a container.

    The header does not record EM settings; pass ``config`` to carry them.
    """
    if not isinstance(c, GvqContainer):
        c = parse_container(c, strict)
    h = c.header
    cfg = VQConfig(
        d=h.d, bits_per_index=h.bits_per_index, group_size=h.group_rows * h.group_cols,
        group_cols=h.group_cols, codebook_bits=h.codebook_bits,
        scale_block=h.scale_group if h.flags & FLAG_LOG_SCALES else None,
        int4_scale_group=h.scale_group if h.flags & FLAG_INT4_SCALES else 128,
    ) if config is None else config
    bands, gcols = c.bands, c.group_columns
    per = h.group_cols // h.d
    idx = np.zeros((h.rows, h.cols // h.d), dtype=np.int64)
    codebooks = [[None] * gcols for _ in range(bands)]
    for n, sec in enumerate(c.groups):
        t, g = divmod(n, gcols)
        codebooks[t][g] = sec.codebook
        idx[t * h.group_rows:(t + 1) * h.group_rows, g * per:(g + 1) * per] = sec.indices.reshape(h.group_rows, per)
    scales = None
    if h.flags & FLAG_LOG_SCALES:
        sb = h.scale_group
        codes = np.zeros((h.rows, h.cols // sb), dtype=np.uint8)
        step = np.zeros((bands, gcols), dtype=np.float32)
        offset = np.zeros((bands, gcols), dtype=np.float32)
        per_s = h.group_cols // sb
        for n, sec in enumerate(c.groups):
            t, g = divmod(n, gcols)
            codes[t * h.group_rows:(t + 1) * h.group_rows, g * per_s:(g + 1) * per_s] = sec.log_codes
            step[t, g], offset[t, g] = sec.log_step, sec.log_offset
        a_full = np.repeat(np.repeat(step, h.group_rows, axis=0), per_s, axis=1)
        z_full = np.repeat(np.repeat(offset, h.group_rows, axis=0), per_s, axis=1)
        scales = ScaleSet(sb, log4_scale_values(codes, a_full, z_full), "log4", codes=codes, step=step, offset=offset)
    elif h.flags & FLAG_INT4_SCALES:
        if h.scale_group == 0:
            vals = np.array([[c.groups[t * gcols + g].int4_scales[0, 0] for g in range(gcols)] for t in range(bands)])
        else:
            per_s = h.group_cols // h.scale_group
            vals = np.zeros((h.rows, h.cols // h.scale_group), dtype=np.float32)
            for n, sec in enumerate(c.groups):
                t, g = divmod(n, gcols)
                vals[t * h.group_rows:(t + 1) * h.group_rows, g * per_s:(g + 1) * per_s] = sec.int4_scales
        scales = ScaleSet(h.scale_group, vals)
    return QuantizedLayer((h.rows, h.cols), cfg, codebooks, idx, scales)


def bench_decode(buf: bytes, repetitions: int) -> dict:
    """Time ``repetitions`` full decodes of a serialized container.

    ``bytes_in`` / ``elements_out`` are per decode and zero when nothing ran.
    """
    buf = bytes(buf)
    if repetitions <= 0:
        return {"bytes_in": 0, "elements_out": 0, "seconds": 0.0, "repetitions": 0}
    h = _parse_header(buf)
    start = time.perf_counter()
    for _ in range(repetitions):
        decode_container(buf)
    seconds = time.perf_counter() - start
    elements = h.rows * h.cols
    return {
        "bytes_in": len(buf),
        "elements_out": elements,
        "seconds": seconds,
        "repetitions": repetitions,
        "elements_per_second": elements * repetitions / seconds if seconds > 0 else math.inf,
    }
