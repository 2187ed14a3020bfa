"""Pure numpy implementations of the row kernels.

Every function takes C-contiguous float64 2-D arrays whose rows are
independent problems; ``c`` is the positive curvature parameter.  The compiled
module ``_core`` exposes the same functions with the same semantics.
"""

import numpy as np

ARCOSH_FLOOR = 1.0 + 1e-15
ZERO_NORM = 1e-12
NEAR = 2.0  # below this cosh-distance the log map measures distance through |u|


def minkowski_rows(x, y):
    return -x[:, 0] * y[:, 0] + np.einsum("ij,ij->i", x[:, 1:], y[:, 1:])


def expmap_rows(x, v, c):
    sc = np.sqrt(c)
    n = np.sqrt(np.maximum(minkowski_rows(v, v), 0.0))
    small = n < ZERO_NORM
    n_safe = np.where(small, 1.0, n)
    r = n_safe / sc
    out = np.cosh(r)[:, None] * x + (sc * np.sinh(r) / n_safe)[:, None] * v
    out[small] = x[small]
    return out


def logmap_rows(x, y, c):
    sc = np.sqrt(c)
    a = minkowski_rows(x, y)
    alpha = np.maximum(-a / c, ARCOSH_FLOOR)
    u = y + (a / c)[:, None] * x
    un = np.sqrt(np.maximum(minkowski_rows(u, u), 0.0))
    # |u|_M = sqrt(c) sinh(d / sqrt(c)); arsinh is the well-conditioned inverse for nearby points
    dist = sc * np.where(alpha < NEAR, np.arcsinh(un / sc), np.arccosh(alpha))
    zero = (dist < ZERO_NORM) | (un <= 0.0)
    scale = np.where(zero, 0.0, dist / np.where(zero, 1.0, un))
    return scale[:, None] * u


def expmap0_rows(t, c):
    sc = np.sqrt(c)
    n = np.sqrt(np.einsum("ij,ij->i", t, t))
    small = n < ZERO_NORM
    n_safe = np.where(small, 1.0, n)
    r = n_safe / sc
    out = np.empty((t.shape[0], t.shape[1] + 1))
    out[:, 0] = np.where(small, sc, sc * np.cosh(r))
    out[:, 1:] = np.where(small, 0.0, sc * np.sinh(r) / n_safe)[:, None] * t
    return out


def logmap0_rows(x, c):
    sc = np.sqrt(c)
    s = np.sqrt(np.einsum("ij,ij->i", x[:, 1:], x[:, 1:]))
    alpha = np.maximum(x[:, 0] / sc, ARCOSH_FLOOR)
    small = s < ZERO_NORM
    scale = np.where(small, 0.0, sc * np.arccosh(alpha) / np.where(small, 1.0, s))
    out = np.zeros_like(x)
    out[:, 1:] = scale[:, None] * x[:, 1:]
    return out


def dist_rows(x, y, c):
    alpha = np.maximum(-minkowski_rows(x, y) / c, ARCOSH_FLOOR)
    return np.sqrt(c) * np.arccosh(alpha)


def sample_rows(indptr, indices, nodes, u):
    """Fixed-size neighbor sampling over a CSR adjacency.

    Row ``r`` draws ``u.shape[1]`` entries from the neighbor slots of
    ``nodes[r]`` using the uniforms ``u[r]``: with replacement when the node has
    fewer neighbors than that, otherwise a partial Fisher-Yates shuffle (so
    without replacement).  Returns the chosen neighbor ids (``-1`` on empty rows)
    and the positions into ``indices`` they came from, plus an empty-row mask.
    """
    n, size = u.shape
    start = indptr[nodes]
    deg = indptr[nodes + 1] - start
    pos = np.full((n, size), -1, dtype=np.int64)
    empty = deg == 0
    repl = (deg > 0) & (deg < size)
    if repl.any():
        k = np.floor(u[repl] * deg[repl, None]).astype(np.int64)
        k = np.minimum(k, deg[repl, None] - 1)
        pos[repl] = start[repl, None] + k
    for r in np.flatnonzero(deg >= size):
        d = int(deg[r])
        swaps = {}
        for j in range(size):
            k = j + min(int(u[r, j] * (d - j)), d - j - 1)
            vj = swaps.get(j, j)
            vk = swaps.get(k, k)
            swaps[k] = vj
            swaps[j] = vk
            pos[r, j] = start[r] + vk
    if indices.size == 0:
        return np.full((n, size), -1, dtype=np.int64), pos, empty
    picked = np.where(pos >= 0, indices[np.maximum(pos, 0)], -1)
    return picked, pos, empty
