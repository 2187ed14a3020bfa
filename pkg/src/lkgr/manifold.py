"""Lorentz-model geometry with trainable curvature.

Points live on the upper sheet ``{x : <x, x>_M = -c, x0 > 0}`` of the
hyperboloid in ambient coordinates of length ``n + 1`` (``n`` is the intrinsic
dimension); the sectional curvature is ``-1/c``.  All functions act on the
last axis and broadcast over leading axes.

Each operation accepts plain arrays or :class:`lkgr.autodiff.Var` values.
With plain inputs (including a plain ``c``) the fused row kernels from
:mod:`lkgr._kernels` are used; otherwise the operation is composed from taped
primitives so gradients reach the inputs and the curvature.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from . import autodiff as ad

ARCOSH_FLOOR = _kernels.ARCOSH_FLOOR
ZERO_NORM = _kernels.ZERO_NORM
NEAR = _kernels.NEAR
CURVATURE_FLOOR = 1e-4

__all__ = [
    "curvature_from_theta",
    "theta_for_curvature",
    "origin",
    "minkowski_inner",
    "lorentz_distance",
    "project_to_manifold",
    "project_to_tangent",
    "exp_map",
    "log_map",
    "exp_map_origin",
    "log_map_origin",
    "exp_map_origin_spatial",
    "log_map_origin_spatial",
    "encode_euclidean",
    "lorentz_linear",
    "lorentz_bias_add",
    "lorentz_concat",
    "hyperbolic_activation",
    "ACTIVATIONS",
]


# --------------------------------------------------------------------------
# curvature
# --------------------------------------------------------------------------


def curvature_from_theta(theta):
    """Map the unconstrained parameter to ``c = softplus(theta) + 1e-4 > 0``."""
    return ad.softplus(theta) + CURVATURE_FLOOR


def theta_for_curvature(c: float) -> float:
    """Inverse of :func:`curvature_from_theta`."""
    if c <= CURVATURE_FLOOR:
        raise ValueError(f"curvature must exceed {CURVATURE_FLOOR}, got {c}")
    y = c - CURVATURE_FLOOR
    return y + math.log(-math.expm1(-y))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _plain(*xs) -> bool:
    return not any(ad.is_var(x) for x in xs)


def _rows(fn, arrays, c=None, out_dim=None):
    """Run a row kernel over broadcast leading axes."""
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=np.float64) for a in arrays])
    lead = arrays[0].shape[:-1]
    flat = [np.ascontiguousarray(a.reshape(-1, a.shape[-1])) for a in arrays]
    out = fn(*flat) if c is None else fn(*flat, float(c))
    return out.reshape(lead + out.shape[1:])


def _check_pair(x, y):
    xs, ys = ad.value_of(x).shape, ad.value_of(y).shape
    if xs[-1:] != ys[-1:]:
        raise ValueError(f"dimension mismatch: {xs[-1:]} vs {ys[-1:]}")
    if xs[-1] < 2:
        raise ValueError("ambient vectors need length >= 2")


def _inner(x, y):
    return ad.sum(x[..., 1:] * y[..., 1:], axis=-1) - x[..., 0] * y[..., 0]


def _zeros_col(x):
    return np.zeros(ad.value_of(x).shape[:-1] + (1,))


def origin(dim: int, c=1.0) -> np.ndarray:
    """The point ``(sqrt(c), 0, ..., 0)`` with ambient length ``dim``."""
    o = np.zeros(dim)
    o[0] = math.sqrt(float(ad.value_of(c)))
    return o


def _origin_like(x, c):
    if _plain(c):
        return origin(ad.value_of(x).shape[-1], c)
    zeros = np.zeros(ad.value_of(x).shape[-1] - 1)
    return ad.concat([ad.reshape(ad.sqrt(c), (1,)), zeros], axis=-1)


# --------------------------------------------------------------------------
# core geometry
# --------------------------------------------------------------------------


def minkowski_inner(x, y):
    """``-x0*y0 + sum_i xi*yi`` over the last axis."""
    _check_pair(x, y)
    if _plain(x, y):
        return _rows(_kernels.minkowski_rows, (x, y))
    return _inner(x, y)


def lorentz_distance(x, y, c):
    """Geodesic distance ``sqrt(c) * arcosh(-<x, y>_M / c)``."""
    _check_pair(x, y)
    if _plain(x, y, c):
        return _rows(_kernels.dist_rows, (x, y), c)
    alpha = ad.clamp_min(-_inner(x, y) / c, ARCOSH_FLOOR)
    return ad.sqrt(c) * ad.arcosh(alpha)


def project_to_manifold(x, c):
    spatial = x[..., 1:]
    x0 = ad.sqrt(c + ad.sum(spatial * spatial, axis=-1, keepdims=True))
    return ad.concat([x0, spatial], axis=-1)


def project_to_tangent(x, v, c):
    """Project an ambient vector onto the tangent space at ``x``: ``v + <x,v>/c * x``."""
    _check_pair(x, v)
    return v + (_inner(x, v) / c)[..., None] * x


def exp_map(x, v, c):
    """Exponential map at ``x`` of the tangent vector ``v``."""
    _check_pair(x, v)
    # the cosh/sinh combination loses the constraint far from the origin when
    # v is only approximately tangent, so the time coordinate is recomputed
    if _plain(x, v, c):
        out = project_to_manifold(_rows(_kernels.expmap_rows, (x, v), c), c)
        still = np.sqrt(np.maximum(_inner(v, v), 0.0)) < ZERO_NORM
        return np.where(still[..., None], x, out) if np.any(still) else out
    n = ad.sqrt(ad.clamp_min(_inner(v, v), 0.0))
    small = ad.value_of(n) < ZERO_NORM
    n_safe = ad.where(small, 1.0, n)
    sc = ad.sqrt(c)
    r = n_safe / sc
    out = ad.cosh(r)[..., None] * x + (sc * ad.sinh(r) / n_safe)[..., None] * v
    return ad.where(small[..., None], x, project_to_manifold(out, c))


def log_map(x, y, c):
    """Logarithmic map at ``x`` of the point ``y`` (a tangent vector at ``x``)."""
    _check_pair(x, y)
    if _plain(x, y, c):
        return _rows(_kernels.logmap_rows, (x, y), c)
    a = _inner(x, y)
    sc = ad.sqrt(c)
    alpha = ad.clamp_min(-a / c, ARCOSH_FLOOR)
    u = y + (a / c)[..., None] * x
    un = ad.sqrt(ad.clamp_min(_inner(u, u), 0.0))
    # |u|_M = sqrt(c) sinh(d / sqrt(c)): nearby points get their distance through arsinh
    near = ad.value_of(alpha) < NEAR
    dist = sc * ad.where(near, ad.arsinh(un / sc), ad.arcosh(ad.where(near, NEAR, alpha)))
    zero = (ad.value_of(dist) < ZERO_NORM) | (ad.value_of(un) <= 0.0)
    scale = ad.where(zero, 0.0, dist / ad.where(zero, 1.0, un))
    return scale[..., None] * u


def _exp0_spatial(t, c):
    """Exponential map at the origin of the tangent vector ``(0, t)``."""
    if _plain(t, c):
        t = np.asarray(t, dtype=np.float64)
        return _rows(_kernels.expmap0_rows, (t,), c)
    n = ad.sqrt(ad.sum(t * t, axis=-1))
    small = ad.value_of(n) < ZERO_NORM
    n_safe = ad.where(small, 1.0, n)
    sc = ad.sqrt(c)
    r = n_safe / sc
    head = ad.where(small, sc, sc * ad.cosh(r))
    tail = ad.where(small, 0.0, sc * ad.sinh(r) / n_safe)[..., None] * t
    return ad.concat([head[..., None], tail], axis=-1)


def _log0_spatial(x, c):
    """Spatial block of the logarithmic map at the origin."""
    if _plain(x, c):
        return _rows(_kernels.logmap0_rows, (x,), c)[..., 1:]
    spatial = x[..., 1:]
    s = ad.sqrt(ad.sum(spatial * spatial, axis=-1))
    sc = ad.sqrt(c)
    alpha = ad.clamp_min(x[..., 0] / sc, ARCOSH_FLOOR)
    small = ad.value_of(s) < ZERO_NORM
    scale = ad.where(small, 0.0, sc * ad.arcosh(alpha) / ad.where(small, 1.0, s))
    return scale[..., None] * spatial


def exp_map_origin_spatial(t, c):
    """Exponential map at the origin of the spatial tangent block ``t`` (length ``n``)."""
    return _exp0_spatial(t, c)


def log_map_origin_spatial(x, c):
    """Spatial block of :func:`log_map_origin` (length ``n``)."""
    return _log0_spatial(x, c)


def exp_map_origin(v, c):
    """Exponential map at the origin; only the spatial block of ``v`` is used."""
    return _exp0_spatial(v[..., 1:], c)


def log_map_origin(x, c):
    """Logarithmic map at the origin, in ambient coordinates (first entry 0)."""
    if _plain(x, c):
        return _rows(_kernels.logmap0_rows, (x,), c)
    return ad.concat([_zeros_col(x), _log0_spatial(x, c)], axis=-1)


def encode_euclidean(x_e, c):
    """Place a Euclidean vector on the manifold as ``exp_o((0, x_e))``."""
    return _exp0_spatial(x_e, c)


# --------------------------------------------------------------------------
# Lorentzian network primitives
# --------------------------------------------------------------------------


def lorentz_linear(A, x, c):
    """``exp_o(A log_o(x))`` with ``A`` acting on the spatial tangent block."""
    a_shape, x_shape = ad.value_of(A).shape, ad.value_of(x).shape
    if len(a_shape) < 2 or a_shape[-1] != x_shape[-1] - 1:
        raise ValueError(
            f"matrix of shape {a_shape} cannot act on points of ambient length {x_shape[-1]}"
        )
    return _exp0_spatial(ad.matvec(A, _log0_spatial(x, c)), c)


def lorentz_bias_add(x, b, c):
    """Add the origin-tangent bias ``b`` at ``x`` by transporting it along the geodesic.

    ``b`` is an ambient vector with ``b[..., 0] == 0``.  At the origin the
    transport term vanishes and the result is ``exp_o(b)``.
    """
    _check_pair(x, b)
    o = _origin_like(x, c)
    lo = log_map_origin(x, c)
    lxo = log_map(x, o, c)
    num = ad.sum(lo[..., 1:] * b[..., 1:], axis=-1)
    alpha = ad.clamp_min(x[..., 0] / ad.sqrt(c), ARCOSH_FLOOR)
    den = c * ad.arcosh(alpha) * ad.arcosh(alpha)
    at_origin = ad.value_of(den) < ZERO_NORM**2
    gamma = ad.where(at_origin, 0.0, num / ad.where(at_origin, 1.0, den))
    v = b - gamma[..., None] * (lo + lxo)
    return exp_map(x, v, c)


def lorentz_concat(a, b, c):
    """Concatenate the origin-tangent blocks of ``a`` and ``b`` and map back."""
    joined = ad.concat([_log0_spatial(a, c), _log0_spatial(b, c)], axis=-1)
    return _exp0_spatial(joined, c)


ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": lambda t: t,
}


def hyperbolic_activation(x, sigma, c):
    """Apply an elementwise nonlinearity with ``sigma(0) == 0`` in the origin tangent space."""
    fn = ACTIVATIONS[sigma] if isinstance(sigma, str) else sigma
    return _exp0_spatial(fn(_log0_spatial(x, c)), c)
