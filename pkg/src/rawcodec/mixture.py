"""Bit-depth-adaptive discrete logistic mixture likelihood (float64 numpy reference).

Sample ``x`` of a channel with bit depth ``b`` is modelled on the grid
``x * delta`` with ``delta = 1 / (2^b - 1)``; the mixture CDF is differenced
at half-bin offsets and the two outermost bins absorb the tails, so the PMF
over ``0 .. 2^b - 1`` is normalized by construction. Channels are coded in
the order r, g1, g2, b and later channel means are shifted by earlier decoded
values.

Parameter arrays are laid out ``(4, K, ...)``: channel, component, pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .coder.rangecoder import PRECISION

CHANNELS = ("r", "g1", "g2", "b")


class SupportError(ValueError):
    pass


class PrecisionError(ValueError):
    pass


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))), np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))


def bin_width(b: int) -> float:
    if b < 1:
        raise SupportError("bit depth 0 has a single symbol and no bin width")
    return 1.0 / ((1 << b) - 1)


@dataclass(frozen=True)
class MixtureParams:
    pi: np.ndarray  # (4, K, ...) weights, simplex over K
    mu: np.ndarray  # (4, K, ...) base means, normalized units
    s: np.ndarray  # (4, K, ...) scales > 0
    beta: np.ndarray  # (4, K, ...) coupling slots r, g1, g2, b

    @property
    def n_components(self) -> int:
        return self.pi.shape[1]

    def at(self, *index) -> MixtureParams:
        """Parameters of a single pixel, index into the trailing pixel axes."""
        sl = (slice(None), slice(None)) + tuple(index)
        return MixtureParams(self.pi[sl], self.mu[sl], self.s[sl], self.beta[sl])

    def validate(self, s_min: float = 1e-6) -> None:
        if not np.allclose(self.pi.sum(axis=1), 1.0, rtol=0, atol=1e-6):
            raise ValueError("mixture weights are not on the simplex")
        if (self.s < s_min).any():
            raise ValueError(f"scale below floor {s_min}")


def mixture_cdf_at_edges(x, pi, mu, s, b: int):
    """Mixture CDF at the lower bin edge of integer x, with the edge clipping.

    Broadcasts x against pi/mu/s whose leading axis is the component axis.
    Returns 0 for x <= 0 and 1 for x >= 2^b.
    """
    delta = bin_width(b)
    x = np.asarray(x, dtype=np.float64)
    t = ((x - 0.5) * delta - mu) / s
    f = (pi * sigmoid(t)).sum(axis=0)
    f = np.where(x <= 0, 0.0, f)
    return np.where(x >= (1 << b), 1.0, f)


def logistic_mixture_pmf(x, pi, mu, s, b: int):
    """P(x) for integer x in [0, 2^b - 1] under a K-component mixture (axis 0 = components)."""
    if b == 0:
        raise SupportError("bit depth 0: use the single-symbol PMF")
    x = np.asarray(x)
    if (x < 0).any() or (x >= (1 << b)).any():
        raise SupportError(f"sample outside [0, 2^{b})")
    return mixture_cdf_at_edges(x + 1, pi, mu, s, b) - mixture_cdf_at_edges(x, pi, mu, s, b)


def mixture_pmf_table(pi, mu, s, b: int) -> np.ndarray:
    """Full PMF over the 2^b alphabet for one pixel-channel (pi, mu, s of shape (K,))."""
    if b == 0:
        return np.ones(1)
    x = np.arange((1 << b) + 1, dtype=np.float64)
    edges = mixture_cdf_at_edges(x, pi[:, None], mu[:, None], s[:, None], b)
    return np.diff(edges)


def log_mixture_pmf(x, pi, mu, s, b: int):
    """Natural-log PMF evaluated without cancellation for narrow components."""
    if b == 0:
        return np.zeros(np.broadcast(np.asarray(x), mu[0]).shape)
    x = np.asarray(x, dtype=np.float64)
    delta = bin_width(b)
    centre = (x * delta - mu) / s
    half = 0.5 * delta / s
    upper = centre + half
    lower = centre - half
    top = x >= (1 << b) - 1
    bottom = x <= 0
    # log(sigmoid(u) - sigmoid(l)) = log sigmoid(u) + log sigmoid(-l) + log(1 - exp(l - u))
    log_sig_u = -np.logaddexp(0.0, -upper)
    log_sig_neg_l = -np.logaddexp(0.0, lower)
    with np.errstate(divide="ignore"):
        gap = np.log(-np.expm1(-(upper - lower)))
    interior = log_sig_u + log_sig_neg_l + gap
    comp = np.where(bottom, log_sig_u, np.where(top, log_sig_neg_l, interior))
    with np.errstate(divide="ignore"):
        weighted = comp + np.log(pi)
    m = weighted.max(axis=0)
    return m + np.log(np.exp(weighted - m).sum(axis=0))


def renormalize_pmf(base_pmf, b: int) -> np.ndarray:
    """Restrict a PMF to [0, 2^b) and rescale so it sums to one."""
    base = np.asarray(base_pmf, dtype=np.float64)
    n = 1 << b
    if n > base.shape[-1]:
        raise SupportError(f"target alphabet 2^{b} exceeds base alphabet {base.shape[-1]}")
    kept = base[..., :n]
    mass = kept.sum(axis=-1, keepdims=True)
    if (mass <= 0).any():
        raise SupportError("no probability mass inside the target support")
    return kept / mass


def autoregressive_means(mu, beta, x_r, x_g1, x_g2):
    """Shift channel means by earlier channels' normalized values.

    mu, beta: (4, K, ...); x_*: normalized values broadcastable to (...).
    """
    mu = np.asarray(mu, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    out = mu.copy()
    out[1] = mu[1] + beta[0] * x_r
    out[2] = mu[2] + beta[1] * x_g1
    out[3] = mu[3] + beta[2] * x_r + beta[3] * (x_g1 + x_g2) / 2
    return out


def normalize_planes(planes, depths) -> np.ndarray:
    """Map integers to [0, 1] per channel; channels of depth 0 map to 0."""
    planes = np.asarray(planes, dtype=np.float64)
    out = np.zeros_like(planes)
    for c, b in enumerate(depths):
        if b > 0:
            out[c] = planes[c] * bin_width(int(b))
    return out


def joint_pixel_logprob(planes, params: MixtureParams, depths, pad_mask=None, support=None) -> float:
    """Total log2 probability of a (4, H, W) patch under the channel-autoregressive model.

    ``depths`` (4,) sets each channel's normalization and bin width; ``support``
    (4,), when smaller, restricts each PMF to [0, 2^support) with renormalization.
    """
    planes = np.asarray(planes)
    depths = np.asarray(depths, dtype=np.int64).reshape(4)
    support = depths if support is None else np.asarray(support, dtype=np.int64).reshape(4)
    if (support > depths).any():
        raise SupportError("support depth exceeds conditioning depth")
    keep = np.ones(planes.shape[1:], dtype=bool) if pad_mask is None else ~np.asarray(pad_mask)
    for c in range(4):
        if (planes[c][keep] >= (1 << int(support[c]))).any():
            raise SupportError(f"channel {CHANNELS[c]} has a sample >= 2^{int(support[c])}")
    xn = normalize_planes(planes, depths)
    mu_hat = autoregressive_means(params.mu, params.beta, xn[0], xn[1], xn[2])
    total = 0.0
    for c in range(4):
        b = int(depths[c])
        if support[c] == 0:
            continue
        lp = log_mixture_pmf(planes[c], params.pi[c], mu_hat[c], params.s[c], b)
        if support[c] < b:
            edge = mixture_cdf_at_edges(1 << int(support[c]), params.pi[c], mu_hat[c], params.s[c], b)
            lp = lp - np.log(edge)
        total += lp[keep].sum()
    return float(total / np.log(2.0))


@dataclass(frozen=True)
class PixelPmf:
    probabilities: np.ndarray
    quantized_cdf: np.ndarray

    @property
    def alphabet_size(self) -> int:
        return self.probabilities.shape[-1]


@njit(cache=True)
def _quantize_rows(pmfs, total, out):
    n, a = pmfs.shape
    for i in range(n):
        counts = np.empty(a, dtype=np.int64)
        rem = np.empty(a, dtype=np.float64)
        acc = 0
        for j in range(a):
            scaled = pmfs[i, j] * total
            c = np.int64(np.rint(scaled))
            if c < 1:
                c = 1
            counts[j] = c
            rem[j] = scaled - c
            acc += c
        diff = total - acc
        if diff > 0:
            order = np.argsort(-rem, kind="mergesort")
            k = 0
            while diff > 0:
                counts[order[k % a]] += 1
                diff -= 1
                k += 1
        elif diff < 0:
            order = np.argsort(rem, kind="mergesort")
            k = 0
            while diff < 0:
                j = order[k % a]
                if counts[j] > 1:
                    counts[j] -= 1
                    diff += 1
                k += 1
        out[i, 0] = 0
        for j in range(a):
            out[i, j + 1] = out[i, j] + counts[j]


def build_cdf_table(pmf, precision: int = PRECISION) -> np.ndarray:
    """Integer CDF(s) totalling 2^precision with every symbol given at least one count.

    Counts are the half-even rounding of p * 2^precision floored at one; the
    total is then repaired by largest remainder (ties to the lower index).
    Accepts one PMF or a stack of PMFs along the last axis.
    """
    p = np.asarray(pmf, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.ascontiguousarray(p.reshape(-1, p.shape[-1]))
    total = 1 << precision
    if p2.shape[1] > total:
        raise PrecisionError(f"alphabet of {p2.shape[1]} symbols exceeds 2^{precision} counts")
    out = np.zeros((p2.shape[0], p2.shape[1] + 1), dtype=np.int64)
    _quantize_rows(p2, total, out)
    return out[0] if single else out.reshape(p.shape[:-1] + (p.shape[-1] + 1,))


def pixel_pmf(pi, mu, s, b: int, precision: int = PRECISION) -> PixelPmf:
    probs = mixture_pmf_table(np.asarray(pi), np.asarray(mu), np.asarray(s), b)
    return PixelPmf(probs, build_cdf_table(probs, precision))
