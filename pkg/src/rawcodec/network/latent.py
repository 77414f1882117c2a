"""Gaussian cost and integer tables for the quantized latents."""

from __future__ import annotations

import math

import numpy as np

from ..mixture import SupportError, build_cdf_table
from . import kernels


def gaussian_latent_pmf(mu, sigma, bound: int) -> np.ndarray:
    """(n, 2L+1) unit-bin masses on [-L, L]; tail mass sits in the two end bins."""
    mu = np.ascontiguousarray(np.ravel(mu), dtype=np.float64)
    sigma = np.ascontiguousarray(np.ravel(sigma), dtype=np.float64)
    return kernels.gaussian_pmf_rows(mu, sigma, int(bound))


def gaussian_latent_bits(y_hat, mu, sigma, bound: int) -> float:
    """-sum log2 p(y_hat) under the tail-folded Gaussians; raises if |y_hat| > L."""
    y = np.ravel(np.asarray(y_hat, dtype=np.float64))
    if y.size and np.abs(y).max() > bound:
        raise SupportError(f"latent magnitude {np.abs(y).max():g} exceeds bound {bound}")
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), np.shape(y_hat)).ravel()
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), np.shape(y_hat)).ravel()
    n = 2 * bound + 1
    total = 0.0
    for v, m, s in zip(y, mu, sigma):
        q = int(v) + bound
        hi = kernels.gaussian_cdf_edge(q + 1, n, m, s, bound)
        lo = kernels.gaussian_cdf_edge(q, n, m, s, bound)
        total -= math.log2(hi - lo)
    return total


def latent_cdf_rows(mu, sigma, bound: int) -> np.ndarray:
    """Integer CDF rows exactly as the latent coder uses them (total 2^16)."""
    mu = np.ravel(np.asarray(mu, dtype=np.float64))
    sigma = np.ravel(np.asarray(sigma, dtype=np.float64))
    n = 2 * bound + 1
    out = np.empty((mu.size, n + 1), dtype=np.int64)
    for r in range(mu.size):
        for q in range(n + 1):
            out[r, q] = kernels.gaussian_quantized_cdf(q, n, mu[r], sigma[r], bound)
    return out


def latent_table(mu, sigma, bound: int) -> np.ndarray:
    """Rounded-and-repaired tables of the latent PMFs (inspection and tests)."""
    return build_cdf_table(gaussian_latent_pmf(mu, sigma, bound))

