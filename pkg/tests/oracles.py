"""Independent reference implementations, written for clarity rather than speed.

None of these import the package internals they are used to check.
"""
import itertools

import numpy as np


def naive_hessian(X):
    c, n = X.shape
    H = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            s = 0.0
            for t in range(n):
                s += float(X[i, t]) * float(X[j, t])
            H[i, j] = s
    return H


def random_spd(c, rng, offdiag=1.0, samples=None):
    """``X X^T`` for Gaussian X with a shared component so H has off-diagonal mass."""
    samples = samples or 4 * c
    X = rng.standard_normal((c, samples)) + offdiag * rng.standard_normal((1, samples))
    return X @ X.T


def damped_inverse(H, damp_frac=0.01):
    H = np.array(H, dtype=np.float64)
    lam = damp_frac * np.mean(np.diag(H))
    Hd = H + lam * np.eye(len(H))
    return Hd, np.linalg.inv(Hd)


def gptq_reference(W, H, grid_fn, damp_frac=0.01, group_size=None):
    """Column-by-column OBS quantization with an explicitly shrinking inverse Hessian.

    Uses the original unblocked update ``W_:,j+ -= err * Hinv[q, j+] / Hinv[q, q]``
    and removes column q from the inverse with a Schur complement after
    every step; no Cholesky factor, no blocking.
    ``grid_fn(residual_group) -> grid`` gives the frozen 1-D grid of each group
    (per row, ``group_size`` columns), computed when the column loop enters it.
    """
    W = np.array(W, dtype=np.float64)
    rows, cols = W.shape
    group_size = group_size or cols
    Hd, Hinv = damped_inverse(H, damp_frac)
    Q = np.zeros_like(W)
    grids = None
    for q in range(cols):
        if q % group_size == 0:
            grids = [grid_fn(W[r, q:q + group_size]) for r in range(rows)]
        for r in range(rows):
            g = np.asarray(grids[r], dtype=np.float64)
            dist = (W[r, q] - g) ** 2
            Q[r, q] = g[int(np.argmin(dist))]
        err = (W[:, q] - Q[:, q]) / Hinv[q, q]
        W[:, q + 1:] -= np.outer(err, Hinv[q, q + 1:])
        # condition on column q being fixed
        Hinv = Hinv - np.outer(Hinv[:, q], Hinv[q, :]) / Hinv[q, q]
    return Q


def uniform_grid(maxabs, bits):
    qmax = 2 ** (bits - 1) - 1
    s = np.float32(maxabs / qmax) if maxabs > 0 else np.float32(1.0)
    return np.array([np.float32(v) * s for v in range(-(2 ** (bits - 1)), qmax + 1)], dtype=np.float32)


def proxy(W, Q, H):
    D = np.asarray(W, dtype=np.float64) - np.asarray(Q, dtype=np.float64)
    return float(np.trace(D @ H @ D.T))


def brute_force_best(W, H, grids_per_row):
    """Exhaustive minimum of the proxy loss over every grid assignment."""
    rows, cols = W.shape
    best = np.inf
    per_row = [list(itertools.product(grids_per_row[r], repeat=cols)) for r in range(rows)]
    for choice in itertools.product(*per_row):
        Q = np.array(choice, dtype=np.float64)
        best = min(best, proxy(W, Q, H))
    return best


def plain_kmeans(points, init, iters):
    """Lloyd's algorithm with python loops; empty clusters keep their centre."""
    pts = [list(map(float, p)) for p in points]
    cents = [list(map(float, c)) for c in init]
    assign = []
    for _ in range(iters + 1):
        assign = []
        for p in pts:
            best, bi = None, 0
            for m, c in enumerate(cents):
                dist = sum((a - b) ** 2 for a, b in zip(p, c))
                if best is None or dist < best:
                    best, bi = dist, m
            assign.append(bi)
        if _ == iters:
            break
        for m in range(len(cents)):
            members = [p for p, a in zip(pts, assign) if a == m]
            if members:
                cents[m] = [sum(col) / len(members) for col in zip(*members)]
    return np.array(cents), np.array(assign)


def pack_bits_reference(values, bits):
    """Build the LSB-first bit string explicitly, then cut it into bytes."""
    stream = ""
    for v in values:
        stream += format(int(v), f"0{bits}b")[::-1]
    while len(stream) % 8:
        stream += "0"
    return bytes(int(stream[i:i + 8][::-1], 2) for i in range(0, len(stream), 8))


def normal_equations_codebook(W, H, entry_of, n_params, scale=None):
    """Exact minimizer of tr((W - Q) H (W - Q)^T) with Q[u] = theta[entry_of[u]] * scale[u]."""
    rows, cols = W.shape
    S = np.ones_like(W, dtype=np.float64) if scale is None else scale
    M = np.zeros((rows * cols, n_params))
    for r in range(rows):
        for c in range(cols):
            M[r * cols + c, entry_of[r, c]] = S[r, c]
    A = np.kron(np.eye(rows), H)
    w = np.asarray(W, dtype=np.float64).reshape(-1)
    lhs = M.T @ A @ M
    rhs = M.T @ A @ w
    theta = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    Q = (M @ theta).reshape(rows, cols)
    return theta, proxy(W, Q, H)


def nearest_no_feedback(W, ql):
    """Nearest-centroid assignment of the original W against the layer's own codebooks."""
    cfg = ql.config
    out = np.empty_like(W, dtype=np.float64)
    for t in range(ql.bands):
        for g in range(ql.group_columns):
            rs = slice(t * cfg.group_rows, (t + 1) * cfg.group_rows)
            cs = slice(g * cfg.group_cols, (g + 1) * cfg.group_cols)
            vals = ql.codebooks[t][g].values().astype(np.float64)
            vecs = W[rs, cs].astype(np.float64).reshape(-1, cfg.d)
            idx = ((vecs[:, None, :] - vals[None]) ** 2).sum(-1).argmin(1)
            out[rs, cs] = vals[idx].reshape(cfg.group_rows, cfg.group_cols)
    return out
