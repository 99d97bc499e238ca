"""Post-sweep refinement: codebook gradient update, integer codebooks, SVD compression.

Both gradient procedures optimize the layer proxy loss
``tr((W - Q) H (W - Q)^T)`` with the assignment frozen.  ``Q`` is linear in the
codebook entries, so the objective is a convex quadratic in them and an exact
line search along any descent direction never increases it.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .codebook import Codebook, Storage, quantize_codebook
from .engine import QuantizedLayer, VQConfig, quantize_layer
from .errors import ConfigShapeMismatch, ShapeMismatch, UnsupportedDimensionality
from .numerics import HessianContext
from .scales import ScaleSet, blockwise_normalize, denormalize, search_int4_scales

__all__ = [
    "ScaleSet",
    "blockwise_normalize",
    "codebook_update",
    "denormalize",
    "int4_pipeline",
    "quantize_codebook",
    "search_int4_scales",
    "svd_compress_codebooks",
]


def int4_pipeline(W: np.ndarray, ctx: HessianContext, cfg: VQConfig, workers: int = 1) -> QuantizedLayer:
    """Scaled-EM INT4 codebooks.

    Per scale group a shrink-searched scale ``s_g`` is chosen, EM runs on the
    rows divided by ``s_g``, the centroids are rounded and clipped to
    [-8, 7], and the sweep assigns ``x / s_g`` against the integer codebook.
    ``cfg.int4_scale_group = 0`` ties the scale group to the GPTVQ group.
    """
    if cfg.codebook_bits != 4:
        raise ConfigShapeMismatch(f"int4_pipeline needs codebook_bits=4, got {cfg.codebook_bits}")
    return quantize_layer(W, ctx, cfg, workers=workers)


# ---------------------------------------------------------------------------
# shared quadratic machinery
# ---------------------------------------------------------------------------

def _hessian_matrix(H, cols: int) -> np.ndarray:
    if isinstance(H, HessianContext):
        H = H.hessian
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (cols, cols):
        raise ShapeMismatch(f"Hessian {H.shape} does not match {cols} columns")
    return H


def _entry_map(ql: QuantizedLayer) -> np.ndarray:
    """For every weight position, the flat index of the codebook entry that produces it.

    The flat parameter vector is the row-major concatenation of all group
    codebooks (band, group column, centroid, coordinate).
    """
    cfg = ql.config
    rows, cols = ql.shape
    d, k = cfg.d, cfg.k
    band = np.arange(rows) // cfg.group_rows
    gcol = np.arange(cols) // cfg.group_cols
    offset = (band[:, None] * ql.group_columns + gcol[None, :]) * (k * d)
    return offset + np.repeat(ql.indices, d, axis=1) * d + np.arange(cols) % d


def _flat_values(ql: QuantizedLayer) -> np.ndarray:
    return np.concatenate([cb.values().astype(np.float64).reshape(-1) for row in ql.codebooks for cb in row])


class _Quadratic:
    """``f(theta) = tr(D H D^T)`` with ``D = W - theta[emap] * S``."""

    def __init__(self, W, H, emap, S, n_params):
        self.W = np.asarray(W, dtype=np.float64)
        self.H = H
        self.emap = emap
        self.S = np.ones_like(self.W) if S is None else np.asarray(S, dtype=np.float64)
        self.n = n_params
        # Jacobi-style preconditioner: diagonal of the objective Hessian without
        # the cross terms between positions sharing an entry
        diag = np.bincount(emap.ravel(), (self.S ** 2 * np.diag(H)[None, :]).ravel(), n_params)
        self.precond = np.where(diag > 0, diag, 1.0)

    def materialize(self, theta):
        return theta[self.emap] * self.S

    def residual(self, theta):
        delta = self.W - self.materialize(theta)
        return delta, delta @ self.H

    def value(self, delta, dH) -> float:
        return float(np.einsum("ij,ij->", delta, dH))

    def grad(self, dH):
        return -2.0 * np.bincount(self.emap.ravel(), (dH * self.S).ravel(), self.n)

    def line_search(self, dH, dQ) -> float:
        """Step t minimizing ``f`` along ``Q -> Q + t dQ``; 0 when there is no descent."""
        curv = float(np.einsum("ij,ij->", dQ @ self.H, dQ))
        slope = -2.0 * float(np.einsum("ij,ij->", dH, dQ))
        if curv <= 0 or slope >= 0:
            return 0.0
        return -slope / (2.0 * curv)


def _descend(quad: _Quadratic, theta: np.ndarray, steps: int):
    """Preconditioned steepest descent with exact line search; returns (theta, history)."""
    delta, dH = quad.residual(theta)
    history = [quad.value(delta, dH)]
    for _ in range(steps):
        p = -quad.grad(dH) / quad.precond
        t = quad.line_search(dH, quad.materialize(p))
        if t == 0.0:
            break
        cand = theta + t * p
        delta_c, dH_c = quad.residual(cand)
        f = quad.value(delta_c, dH_c)
        if not f < history[-1]:
            break
        theta, delta, dH = cand, delta_c, dH_c
        history.append(f)
    return theta, np.array(history)


def _rebuild(values: np.ndarray, like: Codebook, cfg: VQConfig) -> Codebook:
    if cfg.codebook_bits == 32:
        return Codebook(values.astype(np.float32))
    if cfg.codebook_bits == 8:
        return quantize_codebook(Codebook(values), 8)
    return Codebook(np.clip(np.rint(values), -8, 7), Storage.INT4, 1.0)


def _with_codebooks(ql: QuantizedLayer, theta: np.ndarray, indices=None) -> QuantizedLayer:
    cfg = ql.config
    kd = cfg.k * cfg.d
    cbs = []
    for t, row in enumerate(ql.codebooks):
        new_row = []
        for g, cb in enumerate(row):
            n = t * ql.group_columns + g
            new_row.append(_rebuild(theta[n * kd:(n + 1) * kd].reshape(cfg.k, cfg.d), cb, cfg))
        cbs.append(new_row)
    return dataclasses.replace(ql, codebooks=cbs, indices=ql.indices if indices is None else indices,
                               extras=dict(ql.extras), loss=None)


def _check(W, ql):
    W = np.asarray(W)
    if W.shape != tuple(ql.shape):
        raise ShapeMismatch(f"W is {W.shape} but the layer is {ql.shape}")
    return W


def _proxy(W, ql, H) -> float:
    delta = np.asarray(W, dtype=np.float64) - ql.reconstruct().astype(np.float64)
    return float(np.einsum("ij,ij->", delta @ H, delta))


# ---------------------------------------------------------------------------
# codebook update
# ---------------------------------------------------------------------------

def codebook_update(W: np.ndarray, H, ql: QuantizedLayer, steps: int = 100) -> QuantizedLayer:
    """Refine every codebook entry jointly with the assignment frozen.

    The joint gradient couples groups that share columns through ``H``.
    ``extras["codebook_update_history"]`` records the objective of each
    accepted real-valued iterate; it is non-increasing.  Integer codebooks
    are requantized afterwards, and the refined layer is only returned when
    that does not lose the gain (otherwise the input layer is kept).
    """
    W = _check(W, ql)
    H = _hessian_matrix(H, ql.shape[1])
    theta0 = _flat_values(ql)
    quad = _Quadratic(W, H, _entry_map(ql), ql.expanded_scales(), theta0.size)
    theta, history = _descend(quad, theta0, steps)
    out = _with_codebooks(ql, theta)
    out.loss = _proxy(W, out, H)
    before = _proxy(W, ql, H)
    if out.loss > before:
        out = dataclasses.replace(ql, extras=dict(ql.extras), loss=before)
        out.extras["codebook_update_rejected"] = True
    out.extras["codebook_update_history"] = history
    return out


# ---------------------------------------------------------------------------
# SVD codebook compression
# ---------------------------------------------------------------------------

def _sort_codebooks(ql: QuantizedLayer):
    """Sort each 1-D codebook ascending and remap indices to match."""
    C = np.stack([cb.values().astype(np.float64)[:, 0] for row in ql.codebooks for cb in row])
    order = np.argsort(C, axis=1, kind="stable")
    C_sorted = np.take_along_axis(C, order, axis=1)
    inverse = np.argsort(order, axis=1, kind="stable")
    idx = ql.indices.copy()
    for t in range(ql.bands):
        for g in range(ql.group_columns):
            rs, cs = ql.group_slices(t, g)
            idx[rs, cs] = inverse[t * ql.group_columns + g][idx[rs, cs]]
    return C_sorted, idx


def _quantize_rows(U: np.ndarray):
    maxabs = np.abs(U).max(axis=1)
    scale = np.where(maxabs > 0, maxabs / 127.0, 1.0).astype(np.float32)
    codes = np.clip(np.rint(U / scale[:, None].astype(np.float64)), -127, 127).astype(np.int8)
    return codes, scale


def _factor_descent(quad, r_c, Uq, V, dH, history, steps, which_factors):
    """Alternating preconditioned, line-searched descent on ``C = Uq V^T``; appends to ``history``."""
    n_groups, k = r_c.shape
    for _ in range(steps):
        improved = False
        for which in which_factors:
            gC = quad.grad(dH).reshape(n_groups, k)
            if which == "U":
                step = -(gC @ V) / np.maximum(r_c @ (V ** 2), 1e-300)
                dC = step @ V.T
            else:
                step = -(gC.T @ Uq) / np.maximum(r_c.T @ (Uq ** 2), 1e-300)
                dC = Uq @ step.T
            t = quad.line_search(dH, quad.materialize(dC.ravel()))
            if t == 0.0:
                continue
            U_new, V_new = (Uq + t * step, V) if which == "U" else (Uq, V + t * step)
            delta_c, dH_c = quad.residual((U_new @ V_new.T).ravel())
            f = quad.value(delta_c, dH_c)
            if f < history[-1]:
                Uq, V, dH = U_new, V_new, dH_c
                history.append(f)
                improved = True
        if not improved:
            break
    return Uq, V, dH


def svd_compress_codebooks(
    W: np.ndarray,
    H,
    ql: QuantizedLayer,
    rank: int,
    gd_steps: int = 100,
    quantize_factors: bool = True,
) -> QuantizedLayer:
    """Rank-reduce the stacked 1-D codebooks ``C ~ U'' V'^T`` and refine the factors.

    ``U''`` (groups x rank) absorbs the singular values.  The factors are
    refined by alternating line-searched descent on the proxy loss
    (history in ``extras["svd"]["history"]``, entry 0 right after
    truncation), then ``U''`` is quantized to int8 with one scale per row
    and ``V'`` alone is refit to the rounded ``U''``.
    The materialized codebooks ``C-hat`` replace the originals.
    """
    if ql.config.d != 1:
        raise UnsupportedDimensionality(f"SVD codebook compression needs d=1, got d={ql.config.d}")
    W = _check(W, ql)
    H = _hessian_matrix(H, ql.shape[1])
    if rank < 1:
        raise ValueError("rank must be positive")
    C, idx = _sort_codebooks(ql)
    n_groups, k = C.shape
    rank = min(rank, n_groups, k)
    Uf, s, Vt = np.linalg.svd(C, full_matrices=False)
    Uq = Uf[:, :rank] * s[:rank]
    V = Vt[:rank].T.copy()

    sorted_ql = dataclasses.replace(ql, indices=idx)
    quad = _Quadratic(W, H, _entry_map(sorted_ql), ql.expanded_scales(), C.size)
    r_c = quad.precond.reshape(n_groups, k)

    delta, dH = quad.residual((Uq @ V.T).ravel())
    history = [quad.value(delta, dH)]
    Uq, V, dH = _factor_descent(quad, r_c, Uq, V, dH, history, gd_steps, ("U", "V"))

    info = {"rank": rank, "history": np.array(history)}
    if quantize_factors:
        codes, row_scale = _quantize_rows(Uq)
        Uq = codes.astype(np.float64) * row_scale[:, None].astype(np.float64)
        # V' stays real-valued, so it can absorb part of the rounding of U''
        delta, dH = quad.residual((Uq @ V.T).ravel())
        requant = [quad.value(delta, dH)]
        _, V, dH = _factor_descent(quad, r_c, Uq, V, dH, requant, gd_steps, ("V",))
        info.update(U_codes=codes, U_scale=row_scale, requant_history=np.array(requant))
    else:
        info["U"] = Uq.astype(np.float32)
    V = V.astype(np.float32)
    info["V"] = V
    C_hat = Uq @ V.astype(np.float64).T
    # factor storage: int8 U'' plus a 32-bit scale per row, real32 V'
    info["factor_bits"] = (n_groups * rank * 8 + n_groups * 32 if quantize_factors else n_groups * rank * 32) + k * rank * 32

    out = _with_codebooks(sorted_ql, C_hat.ravel(), idx)
    out.extras["svd"] = info
    out.loss = _proxy(W, out, H)
    return out
