"""Dense tensor I/O, Hessian accumulation and inverse-Cholesky preparation.

Tensors are plain 2-D ``numpy.float32`` arrays.  The ``.t2d`` file layout is::

    b"T2D0" | rows u32 LE | cols u32 LE | rows*cols float32 LE, row-major
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BadMagic, EmptyCalibration, NonFinite, NotPositiveDefinite, ShapeMismatch

T2D_MAGIC = b"T2D0"
_HEADER = struct.Struct("<4sII")

# samples per accumulation chunk; fixed so the reduction order never changes
_HESSIAN_CHUNK = 4096


def as_tensor(a) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float32 array, rejecting NaN/Inf."""
    t = np.ascontiguousarray(a, dtype=np.float32)
    if t.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NonFinite("tensor contains NaN or Inf")
    return t


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    rows, cols = t.shape
    return _HEADER.pack(T2D_MAGIC, rows, cols) + t.astype("<f4", copy=False).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ShapeMismatch(f"file too short for a header ({len(buf)} bytes)")
    magic, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != T2D_MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {T2D_MAGIC!r}")
    payload = len(buf) - _HEADER.size
    if payload != 4 * rows * cols:
        raise ShapeMismatch(f"header declares {rows}x{cols} but payload holds {payload} bytes")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise NonFinite("tensor file contains NaN or Inf")
    return data.astype(np.float32)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def save_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    data = tensor_to_bytes(t)
    with open(path, "wb") as f:
        f.write(data)


def build_hessian(X: np.ndarray) -> np.ndarray:
    """Return ``X @ X.T`` (float64) for calibration inputs of shape (c, N)."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeMismatch(f"calibration data must be 2-D, got {X.shape}")
    c, n = X.shape
    if n == 0:
        raise EmptyCalibration("calibration matrix has no samples")
    H = np.zeros((c, c), dtype=np.float64)
    for start in range(0, n, _HESSIAN_CHUNK):
        chunk = X[:, start:start + _HESSIAN_CHUNK].astype(np.float64)
        H += chunk @ chunk.T
    return (H + H.T) / 2


@dataclass(frozen=True)
class HessianContext:
    """Damped Hessian plus the factors the quantization sweep consumes.

    ``chol_upper`` is ``U = L.T`` with ``L`` the lower Cholesky factor of
    ``inv(hessian)``, so ``inv(hessian) == U.T @ U``.  Row ``q`` of ``U``
    drives the update of the columns right of ``q``.
    """

    hessian: np.ndarray
    inv_diag: np.ndarray
    chol_upper: np.ndarray
    damp_lambda: float
    dead: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    @classmethod
    def identity(cls, dim: int, damp_frac: float = 0.0) -> "HessianContext":
        return prepare_context(np.eye(dim), damp_frac)


def prepare_context(H: np.ndarray, damp_frac: float = 0.01) -> HessianContext:
    """Dampen ``H`` and compute the upper Cholesky factor of its inverse.

    Zero diagonal entries (dead columns) are set to 1 before dampening; the
    engine zeroes those weight columns.  ``damp_frac = 0`` is accepted for
    exact-identity tests.
    """
    H = np.array(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeMismatch(f"Hessian must be square, got {H.shape}")
    if damp_frac < 0:
        raise ValueError("damp_frac must be non-negative")
    if not np.all(np.isfinite(H)):
        raise NonFinite("Hessian contains NaN or Inf")
    scale = max(np.abs(H).max(), 1e-300)
    if np.abs(H - H.T).max() > 1e-6 * scale:
        raise ShapeMismatch("Hessian is not symmetric")
    H = (H + H.T) / 2
    c = H.shape[0]
    diag = np.diag(H).copy()
    dead = diag == 0
    H[dead, dead] = 1.0
    lam = float(damp_frac * np.mean(np.diag(H)))
    H[np.diag_indices(c)] += lam
    try:
        factor = scipy.linalg.cho_factor(H, lower=True)
        Hinv = scipy.linalg.cho_solve(factor, np.eye(c))
        Hinv = (Hinv + Hinv.T) / 2
        L = np.linalg.cholesky(Hinv)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NotPositiveDefinite(f"Cholesky failed after dampening (lambda={lam:g})") from exc
    U = np.triu(L.T)
    inv_diag = np.diag(Hinv).copy()
    if np.any(np.diag(U) <= 0) or np.any(inv_diag <= 0):
        raise NotPositiveDefinite("non-positive pivot in inverse Cholesky factor")
    return HessianContext(hessian=H, inv_diag=inv_diag, chol_upper=U, damp_lambda=lam, dead=dead)
