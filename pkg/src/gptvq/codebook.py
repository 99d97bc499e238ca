"""Hessian-weighted EM codebooks.

Every point ``x`` carries a diagonal weight vector ``w`` and the distance to a
centroid ``c`` is ``sum_p w_p (x_p - c_p) ** 2``.  With all weights equal the
procedure is plain Lloyd k-means.

The batched helpers (``fit_codebooks`` and friends) operate on arrays shaped
``(G, n, d)``: G independent groups fitted in lockstep.  The single-group
functions are thin wrappers over them.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import TooFewPoints

SUPPORTED_DIMS = (1, 2, 4)
EM_TOL = 1e-9

# broadcast elements per distance chunk
_CACHE_ELEMS = 1 << 15
# above this n*k*d per group (and k >= _TREE_MIN_K) nearest-centroid search goes through a k-d tree
_EXACT_LIMIT = 1 << 24
_TREE_MIN_K = 256


class Storage(enum.Enum):
    REAL32 = 32
    INT8 = 8
    INT4 = 4

    @property
    def code_range(self) -> tuple[int, int]:
        if self is Storage.INT8:
            return -128, 127
        if self is Storage.INT4:
            return -8, 7
        raise ValueError("real-valued storage has no integer range")


class SeedMethod(str, enum.Enum):
    MAHALANOBIS = "mahalanobis"
    KPP = "kpp"


@dataclass
class Codebook:
    """k centroids of dimension d.

    For ``REAL32`` storage ``centroids`` holds the real values; for integer
    storage it holds the integer codes and ``scale`` converts them back.
    """

    centroids: np.ndarray
    storage: Storage = Storage.REAL32
    scale: float = 1.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids)
        if self.centroids.ndim != 2:
            raise ValueError(f"centroids must be (k, d), got {self.centroids.shape}")
        if self.storage is not Storage.REAL32:
            lo, hi = self.storage.code_range
            codes = np.asarray(self.centroids)
            if np.any(codes != np.round(codes)) or codes.min() < lo or codes.max() > hi:
                raise ValueError(f"{self.storage.name} codes must be integers in [{lo}, {hi}]")
            self.centroids = codes.astype(np.int8)
            self.scale = float(np.float32(self.scale))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    @property
    def is_integer(self) -> bool:
        return self.storage is not Storage.REAL32

    def values(self) -> np.ndarray:
        """Decoded centroid values as float32, exactly as a decoder would produce them."""
        if self.storage is Storage.REAL32:
            return self.centroids.astype(np.float32)
        return self.centroids.astype(np.float32) * np.float32(self.scale)


@dataclass
class PointSet:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim == 1 and weights.shape[0] == self.points.shape[0]:
            self.weights = weights[:, None]
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=np.float64), self.points.shape).copy()
        if self.d not in SUPPORTED_DIMS:
            raise ValueError(f"dimensionality must be one of {SUPPORTED_DIMS}, got {self.d}")
        if not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0)):
            raise ValueError("point weights must be strictly positive and finite")

    @classmethod
    def unweighted(cls, points) -> "PointSet":
        points = np.asarray(points, dtype=np.float64)
        return cls(points, np.ones_like(points if points.ndim == 2 else points[:, None]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


class EMResult(NamedTuple):
    codebook: Codebook
    assignment: np.ndarray
    history: np.ndarray


# ---------------------------------------------------------------------------
# batched primitives
# ---------------------------------------------------------------------------

def _exact_distances(x, w, c, out=None, buf=None):
    """(..., n, k) weighted squared distances, accumulated coordinate by coordinate."""
    shape = x.shape[:-1] + (c.shape[-2],)
    acc = np.empty(shape) if out is None else out
    tmp = np.empty(shape) if buf is None else buf
    for p in range(x.shape[-1]):
        tgt = acc if p == 0 else tmp
        np.subtract(x[..., :, p, None], c[..., None, :, p], out=tgt)
        np.multiply(tgt, tgt, out=tgt)
        np.multiply(tgt, w[..., :, p, None], out=tgt)
        if p:
            np.add(acc, tmp, out=acc)
    return acc


def _assign_exact(x, w, c):
    # cache-sized chunks: whole groups when they are small, row slices otherwise
    G, n, _ = x.shape
    k = c.shape[1]
    idx = np.empty((G, n), dtype=np.int64)
    dmin = np.empty((G, n), dtype=np.float64)
    if n * k <= _CACHE_ELEMS:
        step = max(1, _CACHE_ELEMS // (n * k))
        acc, tmp = np.empty((step, n, k)), np.empty((step, n, k))
        for g0 in range(0, G, step):
            sl = slice(g0, min(G, g0 + step))
            m = sl.stop - sl.start
            dist = _exact_distances(x[sl], w[sl], c[sl], acc[:m], tmp[:m])
            idx[sl] = np.argmin(dist, axis=-1)
            dmin[sl] = np.take_along_axis(dist, idx[sl, :, None], axis=-1)[..., 0]
        return idx, dmin
    rows = max(1, _CACHE_ELEMS // k)
    acc, tmp = np.empty((rows, k)), np.empty((rows, k))
    for g in range(G):
        for i0 in range(0, n, rows):
            ps = slice(i0, min(n, i0 + rows))
            m = ps.stop - ps.start
            dist = _exact_distances(x[g, ps], w[g, ps], c[g], acc[:m], tmp[:m])
            j = np.argmin(dist, axis=-1)
            idx[g, ps] = j
            dmin[g, ps] = dist[np.arange(m), j]
    return idx, dmin


def _assign_tree(x, w, c):
    """Nearest centroid per point through one k-d tree per distinct weight vector."""
    idx = np.empty(x.shape[0], dtype=np.int64)
    if np.all(w == w[0]):
        classes, inverse = w[:1], np.zeros(x.shape[0], dtype=np.int64)
    else:
        classes, inverse = np.unique(w, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
    for ci, wc in enumerate(classes):
        sel = np.flatnonzero(inverse == ci)
        root = np.sqrt(wc)
        tree = cKDTree(c * root, leafsize=16)
        _, found = tree.query(x[sel] * root, k=1)
        idx[sel] = found
    diff = x - c[idx]
    dmin = np.sum(w * diff * diff, axis=-1)
    return idx, dmin


def assign_batch(x: np.ndarray, w: np.ndarray, c: np.ndarray):
    """Nearest weighted centroid for (G, n, d) points against (G, k, d) centroids.

    Returns ``(indices, distances)``, both (G, n).  Ties go to the lowest index,
    except on the k-d tree path used for very large codebooks, where exact
    ties are resolved by the tree.
    """
    G, n, d = x.shape
    k = c.shape[1]
    if k >= _TREE_MIN_K and n * k * d > _EXACT_LIMIT:
        out = [_assign_tree(x[g], w[g], c[g]) for g in range(G)]
        return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])
    return _assign_exact(x, w, c)


def m_step_batch(x: np.ndarray, w: np.ndarray, a: np.ndarray, k: int) -> np.ndarray:
    """Weighted per-coordinate means; empty clusters take the worst-fit points."""
    G, n, d = x.shape
    key = (np.arange(G)[:, None] * k + a).reshape(-1)
    num = np.empty((G * k, d))
    den = np.empty((G * k, d))
    for p in range(d):
        num[:, p] = np.bincount(key, weights=(w[..., p] * x[..., p]).reshape(-1), minlength=G * k)
        den[:, p] = np.bincount(key, weights=w[..., p].reshape(-1), minlength=G * k)
    num = num.reshape(G, k, d)
    den = den.reshape(G, k, d)
    filled = den[..., 0] > 0
    c = np.zeros((G, k, d))
    np.divide(num, den, out=c, where=den > 0)
    for g in np.flatnonzero(~filled.all(axis=1)):
        diff = x[g] - c[g][a[g]]
        dist = np.sum(w[g] * diff * diff, axis=-1)
        for m in np.flatnonzero(~filled[g]):
            i = int(np.argmax(dist))
            c[g, m] = x[g, i]
            dist[i] = -np.inf
    return c


def mahalanobis_seed_batch(x: np.ndarray, k: int) -> np.ndarray:
    G, n, d = x.shape
    if n < k:
        raise TooFewPoints(f"{n} points cannot seed {k} centroids")
    if k == 1:
        pos = np.zeros(1, dtype=np.int64)
    else:
        pos = np.round(np.arange(k) * (n - 1) / (k - 1)).astype(np.int64)
    out = np.empty((G, k, d))
    for g in range(G):
        pts = x[g]
        diff = pts - pts.mean(axis=0)
        if d == 1:
            score = np.abs(diff[:, 0])
        else:
            cov = diff.T @ diff / n
            cov += (1e-6 * np.trace(cov) / d + 1e-300) * np.eye(d)
            score = np.einsum("ij,ij->i", diff @ np.linalg.inv(cov), diff)
        order = np.argsort(score, kind="stable")
        out[g] = pts[order[pos]]
    return out


def kmeanspp_seed_points(x: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n, d = x.shape
    if n < k:
        raise TooFewPoints(f"{n} points cannot seed {k} centroids")
    chosen = [int(rng.integers(n))]
    diff = x - x[chosen[0]]
    best = np.sum(w * diff * diff, axis=-1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        total = best.sum()
        if total > 0:
            i = int(rng.choice(n, p=best / total))
        else:
            # remaining points all coincide with a centre; pick an unused one
            i = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(i)
        taken[i] = True
        diff = x - x[i]
        np.minimum(best, np.sum(w * diff * diff, axis=-1), out=best)
    return x[chosen].copy()


def fit_codebooks(
    x: np.ndarray,
    w: np.ndarray,
    k: int,
    iters: int = 100,
    seed_method: SeedMethod | str = SeedMethod.MAHALANOBIS,
    rng_seeds: Sequence[int] | None = None,
    tol: float = EM_TOL,
):
    """Run weighted EM on G groups at once.

    Returns ``(centroids (G,k,d), assignment (G,n), histories)`` where each
    history lists the objective after the initial E-step and after every
    subsequent (M, E) pair.  A group stops once its objective decreases by
    less than ``tol`` relative.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    G, n, d = x.shape
    if n < k:
        raise TooFewPoints(f"{n} points cannot support {k} centroids")
    seed_method = SeedMethod(seed_method)
    if seed_method is SeedMethod.MAHALANOBIS:
        c = mahalanobis_seed_batch(x, k)
    else:
        seeds = list(rng_seeds) if rng_seeds is not None else list(range(G))
        c = np.stack([kmeanspp_seed_points(x[g], w[g], k, np.random.default_rng(seeds[g])) for g in range(G)])

    a, dmin = assign_batch(x, w, c)
    obj = dmin.sum(axis=1)
    histories = [[float(v)] for v in obj]
    active = np.ones(G, dtype=bool)
    for _ in range(iters):
        sel = np.flatnonzero(active)
        if sel.size == 0:
            break
        c_new = m_step_batch(x[sel], w[sel], a[sel], k)
        a_new, dmin = assign_batch(x[sel], w[sel], c_new)
        new = dmin.sum(axis=1)
        c[sel] = c_new
        a[sel] = a_new
        for j, g in enumerate(sel):
            prev = obj[g]
            histories[g].append(float(new[j]))
            if prev - new[j] < tol * abs(prev) or new[j] == 0:
                active[g] = False
            obj[g] = new[j]
    return c, a, [np.array(h) for h in histories]


# ---------------------------------------------------------------------------
# single-group API
# ---------------------------------------------------------------------------

def mahalanobis_seed(ps: PointSet, k: int) -> Codebook:
    """Seed by sorting points on Mahalanobis distance to the mean and taking k evenly spaced ones."""
    return Codebook(mahalanobis_seed_batch(ps.points[None], k)[0])


def kmeanspp_seed(ps: PointSet, k: int, rng_seed: int = 0) -> Codebook:
    """k-means++ seeding under the weighted distance."""
    return Codebook(kmeanspp_seed_points(ps.points, ps.weights, k, np.random.default_rng(rng_seed)))


def e_step(ps: PointSet, cb: Codebook) -> np.ndarray:
    """Index of the nearest centroid for every point (lowest index on ties)."""
    if cb.d != ps.d:
        raise ValueError(f"codebook dimension {cb.d} != point dimension {ps.d}")
    c = np.asarray(cb.values() if cb.is_integer else cb.centroids, dtype=np.float64)
    idx, _ = assign_batch(ps.points[None], ps.weights[None], c[None])
    return idx[0]


def m_step(ps: PointSet, a: np.ndarray, k: int) -> Codebook:
    a = np.asarray(a, dtype=np.int64)
    if a.shape != (ps.n,) or (a.size and (a.min() < 0 or a.max() >= k)):
        raise ValueError("assignment must hold one index in [0, k) per point")
    return Codebook(m_step_batch(ps.points[None], ps.weights[None], a[None], k)[0])


def em_objective(ps: PointSet, cb: Codebook, a: np.ndarray) -> float:
    c = np.asarray(cb.values() if cb.is_integer else cb.centroids, dtype=np.float64)
    diff = ps.points - c[np.asarray(a)]
    return float(np.sum(ps.weights * diff * diff))


def run_em(
    ps: PointSet,
    k: int,
    iters: int = 100,
    seed_method: SeedMethod | str = SeedMethod.MAHALANOBIS,
    rng_seed: int = 0,
) -> EMResult:
    c, a, hist = fit_codebooks(ps.points[None], ps.weights[None], k, iters, seed_method, [rng_seed])
    return EMResult(Codebook(c[0]), a[0], hist[0])


def quantize_codebook(cb: Codebook, bits: int = 8) -> Codebook:
    """Symmetric per-codebook integer quantization of real centroids.

    ``scale = maxabs / (2**(bits-1) - 1)`` (1.0 for an all-zero codebook),
    codes rounded to nearest and clipped to the signed range.
    """
    if bits not in (8, 4):
        raise ValueError(f"codebook bits must be 8 or 4, got {bits}")
    storage = Storage.INT8 if bits == 8 else Storage.INT4
    vals = np.asarray(cb.values() if cb.is_integer else cb.centroids, dtype=np.float64)
    maxabs = float(np.abs(vals).max(initial=0.0))
    scale = np.float32(maxabs / ((1 << (bits - 1)) - 1)) if maxabs > 0 else np.float32(1.0)
    lo, hi = storage.code_range
    codes = np.clip(np.rint(vals / np.float64(scale)), lo, hi)
    return Codebook(codes, storage, float(scale))
