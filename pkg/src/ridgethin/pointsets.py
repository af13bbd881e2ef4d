"""Deterministic low-discrepancy point families for ball and sphere.

Everything here is a pure function of its arguments (no RNG), so candidate
pools, diagnostic grids, and quadrature nodes are bit-reproducible.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

__all__ = ["ball_fill", "sphere_fill", "sphere_spiral"]


@lru_cache(maxsize=32)
def _halton_cached(dim: int, n: int) -> np.ndarray:
    eng = qmc.Halton(d=dim, scramble=False)
    pts = eng.random(n)
    pts.setflags(write=False)
    return pts


@lru_cache(maxsize=32)
def ball_fill(n: int, dim: int) -> np.ndarray:
    """n Halton points filling the unit ball in R^dim (rejection from the cube)."""
    if n < 1:
        raise ValueError("need at least one point")
    # Rejection from [-1,1]^d keeps the Halton ordering; the cube-to-ball
    # volume ratio bounds the oversampling factor.
    grow = 2.2 * 2.0**dim / _ball_volume(dim)
    m = int(np.ceil(n * grow)) + 64
    while True:
        cube = 2.0 * _halton_cached(dim, m) - 1.0
        inside = cube[np.einsum("ij,ij->i", cube, cube) <= 1.0]
        if inside.shape[0] >= n:
            out = np.ascontiguousarray(inside[:n])
            out.setflags(write=False)
            return out
        m *= 2


def _ball_volume(dim: int) -> float:
    from math import gamma, pi

    return pi ** (dim / 2.0) / gamma(dim / 2.0 + 1.0)


@lru_cache(maxsize=32)
def sphere_fill(n: int, sphere_dim: int) -> np.ndarray:
    """n quasi-uniform points on S^sphere_dim (unit vectors in R^{sphere_dim+1})."""
    if sphere_dim == 2:
        return sphere_spiral(n)
    ambient = sphere_dim + 1
    # Halton -> Gaussian -> normalize gives a deterministic quasi-uniform set.
    u = _halton_cached(ambient, n + 1)[1:]  # drop the all-zero first point
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    out = g / np.linalg.norm(g, axis=1, keepdims=True)
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def sphere_spiral(n: int) -> np.ndarray:
    """Fibonacci spiral on S^2: near-uniform, deterministic, O(1/sqrt(n)) gaps."""
    if n < 1:
        raise ValueError("need at least one point")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    out = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    return out
