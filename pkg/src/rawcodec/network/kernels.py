"""Decoder-side network evaluation with a fixed floating-point operation order.

Every quantity that feeds a CDF (hyper synthesis, synthesis, causal context,
entropy head, mixture CDF) is computed here, by the encoder and the decoder
alike, with scalar loops: each output accumulates its terms in one fixed
order, no fused multiply-add, no parallel reductions. A pixel's parameters
therefore depend only on its own inputs, never on batch composition, and
encoder and decoder derive identical integer CDFs.

The pixel coder runs the same compiled loop in both directions; only the
source of each symbol differs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..coder import rangecoder as rc
from ..config import ModelConfig

MODE_ENCODE = 0
MODE_DECODE = 1

ERR_SUPPORT = 10


@njit(cache=True)
def leaky(v, slope):
    return v if v >= 0.0 else v * slope


@njit(cache=True)
def softplus(v):
    # matches torch.nn.functional.softplus (threshold 20)
    if v > 20.0:
        return v
    return math.log1p(math.exp(v))


@njit(cache=True)
def sigmoid(t):
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def conv2d(x, w, b, stride, pad, slope, act):
    ci_n, h, wd = x.shape
    co_n, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.empty((co_n, oh, ow))
    for co in range(co_n):
        for i in range(oh):
            for j in range(ow):
                acc = b[co]
                for ci in range(ci_n):
                    for ky in range(kh):
                        yy = i * stride + ky - pad
                        if yy < 0 or yy >= h:
                            continue
                        for kx in range(kw):
                            xx = j * stride + kx - pad
                            if xx < 0 or xx >= wd:
                                continue
                            acc += w[co, ci, ky, kx] * x[ci, yy, xx]
                out[co, i, j] = leaky(acc, slope) if act else acc
    return out


@njit(cache=True, nogil=True)
def conv_transpose2d(x, w, b, stride, pad, slope, act, oh_lim, ow_lim):
    """Transposed convolution, weights laid out (in, out, kh, kw).

    Scatter form with a fixed (in, ky, kx, iy, ix) accumulation order per
    output. Only the top-left (oh_lim, ow_lim) corner is computed.
    """
    ci_n, h, wd = x.shape
    _, co_n, kh, kw = w.shape
    oh = min((h - 1) * stride - 2 * pad + kh, oh_lim)
    ow = min((wd - 1) * stride - 2 * pad + kw, ow_lim)
    out = np.empty((co_n, oh, ow))
    for co in range(co_n):
        out[co, :, :] = b[co]
        for ci in range(ci_n):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[ci, co, ky, kx]
                    for iy in range(h):
                        oy = iy * stride - pad + ky
                        if oy < 0 or oy >= oh:
                            continue
                        for ix in range(wd):
                            ox = ix * stride - pad + kx
                            if ox < 0 or ox >= ow:
                                continue
                            out[co, oy, ox] += wv * x[ci, iy, ix]
        if act:
            for oy in range(oh):
                for ox in range(ow):
                    out[co, oy, ox] = leaky(out[co, oy, ox], slope)
    return out


@dataclass
class DecoderWeights:
    """float64 copies of every decode-critical parameter."""

    cfg: ModelConfig
    embedding: np.ndarray
    hs1_w: np.ndarray
    hs1_b: np.ndarray
    hs2_w: np.ndarray
    hs2_b: np.ndarray
    gs1_w: np.ndarray
    gs1_b: np.ndarray
    gs2_w: np.ndarray
    gs2_b: np.ndarray
    gs3_w: np.ndarray
    gs3_b: np.ndarray
    ctx_w: np.ndarray  # (C, 4, k, k), already masked
    ctx_b: np.ndarray
    ctx1_w: np.ndarray  # (C, C)
    ctx1_b: np.ndarray
    ctx2_w: np.ndarray
    ctx2_b: np.ndarray
    head1_w: np.ndarray  # (H, C + F + E)
    head1_b: np.ndarray
    head2_w: np.ndarray  # (16K, H)
    head2_b: np.ndarray
    z_mu: np.ndarray
    z_sigma: np.ndarray

    @classmethod
    def from_model(cls, model) -> DecoderWeights:
        import torch

        from .model import causal_mask

        def a(t):
            return np.ascontiguousarray(t.detach().cpu().double().numpy())

        cfg = model.cfg
        with torch.no_grad():
            mask = causal_mask(cfg.context_kernel).double()
            return cls(
                cfg=cfg,
                embedding=a(model.embedding.table.weight),
                hs1_w=a(model.h_s.conv1.weight),
                hs1_b=a(model.h_s.conv1.bias),
                hs2_w=a(model.h_s.conv2.weight),
                hs2_b=a(model.h_s.conv2.bias),
                gs1_w=a(model.g_s.deconv1.weight),
                gs1_b=a(model.g_s.deconv1.bias),
                gs2_w=a(model.g_s.deconv2.weight),
                gs2_b=a(model.g_s.deconv2.bias),
                gs3_w=a(model.g_s.deconv3.weight),
                gs3_b=a(model.g_s.deconv3.bias),
                ctx_w=a(model.context.masked.weight.double() * mask),
                ctx_b=a(model.context.masked.bias),
                ctx1_w=a(model.context.pw1.weight[:, :, 0, 0]),
                ctx1_b=a(model.context.pw1.bias),
                ctx2_w=a(model.context.pw2.weight[:, :, 0, 0]),
                ctx2_b=a(model.context.pw2.bias),
                head1_w=a(model.head.pw1.weight[:, :, 0, 0]),
                head1_b=a(model.head.pw1.bias),
                head2_w=a(model.head.pw2.weight[:, :, 0, 0]),
                head2_b=a(model.head.pw2.bias),
                z_mu=a(model.z_mu),
                z_sigma=positive_floor(a(model.z_sigma_raw), cfg.sigma_min),
            )

    def embed(self, depths) -> np.ndarray:
        """Mean of the four channel embeddings, summed in channel order."""
        d = np.asarray(depths, dtype=np.int64).reshape(4)
        return embed_mean(self.embedding, d)

    def hyper_synthesis(self, z_hat: np.ndarray):
        s = self.cfg.negative_slope
        h = conv2d(z_hat.astype(np.float64), self.hs1_w, self.hs1_b, 1, 1, s, True)
        out = conv2d(h, self.hs2_w, self.hs2_b, 1, 1, s, False)
        m = self.cfg.latent_channels
        return out[:m], positive_floor(out[m:], self.cfg.sigma_min)

    def synthesis(self, y_hat: np.ndarray, valid=None) -> np.ndarray:
        """Prior features; with ``valid=(vh, vw)`` only that corner is produced."""
        s = self.cfg.negative_slope
        big = 1 << 30
        vh, vw = valid if valid is not None else (big, big)
        # rows/cols of each intermediate map that reach the requested corner
        l2 = (min(vh, big // 2) + 2) // 2
        l2w = (min(vw, big // 2) + 2) // 2
        l1, l1w = (l2 + 2) // 2, (l2w + 2) // 2
        h = conv_transpose2d(y_hat.astype(np.float64), self.gs1_w, self.gs1_b, 2, 1, s, True, l1, l1w)
        h = conv_transpose2d(h, self.gs2_w, self.gs2_b, 2, 1, s, True, l2, l2w)
        return conv_transpose2d(h, self.gs3_w, self.gs3_b, 2, 1, s, False, vh, vw)

    def head_prior(self, f: np.ndarray, e: np.ndarray) -> np.ndarray:
        c = self.cfg.context_channels
        return head_prior_terms(f, e, self.head1_w, self.head1_b, c)

    def pixel_arrays(self):
        return (
            self.ctx_w,
            self.ctx_b,
            self.ctx1_w,
            self.ctx1_b,
            self.ctx2_w,
            self.ctx2_b,
            self.head1_w,
            self.head2_w,
            self.head2_b,
        )


@njit(cache=True)
def embed_mean(table, depths):
    e = np.zeros(table.shape[1])
    for c in range(4):
        for i in range(table.shape[1]):
            e[i] += table[depths[c], i]
    for i in range(table.shape[1]):
        e[i] = e[i] / 4.0
    return e


@njit(cache=True)
def positive_floor(raw, floor):
    flat = raw.copy().reshape(-1)
    for i in range(flat.shape[0]):
        flat[i] = softplus(flat[i]) + floor
    return flat.reshape(raw.shape)


@njit(cache=True)
def head_prior_terms(f, e, w1, b1, n_ctx):
    """Bias plus prior-feature and embedding contributions of the first head layer."""
    n_f, h, wd = f.shape
    n_out = w1.shape[0]
    out = np.empty((n_out, h, wd))
    for o in range(n_out):
        base = b1[o]
        for k in range(e.shape[0]):
            base += w1[o, n_ctx + n_f + k] * e[k]
        for i in range(h):
            for j in range(wd):
                acc = base
                for k in range(n_f):
                    acc += w1[o, n_ctx + k] * f[k, i, j]
                out[o, i, j] = acc
    return out


@njit(cache=True)
def pixel_raw_params(xn, i, j, vh, vw, ctx_w, ctx_b, ctx1_w, ctx1_b, ctx2_w, ctx2_b,
                     head1_w, head2_w, head2_b, prior, slope):
    """Entropy-head output (16K,) for pixel (i, j) from the causal neighbourhood in xn."""
    n_c = ctx_w.shape[0]
    k = ctx_w.shape[2]
    half = k // 2
    h1 = np.empty(n_c)
    for o in range(n_c):
        acc = ctx_b[o]
        for ci in range(4):
            for ky in range(half + 1):
                yy = i + ky - half
                if yy < 0:
                    continue
                kx_end = k if ky < half else half
                for kx in range(kx_end):
                    xx = j + kx - half
                    if xx < 0 or xx >= vw:
                        continue
                    acc += ctx_w[o, ci, ky, kx] * xn[ci, yy, xx]
        h1[o] = leaky(acc, slope)
    h2 = np.empty(n_c)
    for o in range(n_c):
        acc = ctx1_b[o]
        for q in range(n_c):
            acc += ctx1_w[o, q] * h1[q]
        h2[o] = leaky(acc, slope)
    h3 = np.empty(n_c)
    for o in range(n_c):
        acc = ctx2_b[o]
        for q in range(n_c):
            acc += ctx2_w[o, q] * h2[q]
        h3[o] = leaky(acc, slope)
    n_h = head1_w.shape[0]
    g = np.empty(n_h)
    for o in range(n_h):
        acc = prior[o, i, j]
        for q in range(n_c):
            acc += head1_w[o, q] * h3[q]
        g[o] = leaky(acc, slope)
    n_out = head2_w.shape[0]
    out = np.empty(n_out)
    for o in range(n_out):
        acc = head2_b[o]
        for q in range(n_h):
            acc += head2_w[o, q] * g[q]
        out[o] = acc
    return out


@njit(cache=True)
def mixture_cdf(x, n_levels, delta, pi, mu, s):
    """Mixture CDF at the lower edge of bin x, with clipped outer edges."""
    if x <= 0:
        return 0.0
    if x >= n_levels:
        return 1.0
    v = (x - 0.5) * delta
    acc = 0.0
    for k in range(pi.shape[0]):
        acc += pi[k] * sigmoid((v - mu[k]) / s[k])
    return acc


@njit(cache=True)
def quantized_cdf(x, n_sym, n_levels, norm, delta, pi, mu, s):
    """Integer CDF over n_sym symbols with total 2^16 and at least one count per symbol."""
    if x <= 0:
        return 0
    if x >= n_sym:
        return rc.TOTAL
    f = mixture_cdf(x, n_levels, delta, pi, mu, s) / norm
    if not f >= 0.0:
        # no mass left inside the support (or NaN): fall back to one count per symbol
        f = 0.0
    elif f > 1.0:
        f = 1.0
    return x + np.int64(math.floor(f * (rc.TOTAL - n_sym)))


@njit(cache=True)
def channel_params(raw, c, n_k, scale_min, pi, mu, s, beta):
    """Unpack channel c of the head output: softmax weights, means, floored scales, couplings."""
    base = 4 * n_k
    m = -1e300
    for k in range(n_k):
        v = raw[c * n_k + k]
        if v > m:
            m = v
    tot = 0.0
    for k in range(n_k):
        pi[k] = math.exp(raw[c * n_k + k] - m)
        tot += pi[k]
    for k in range(n_k):
        pi[k] = pi[k] / tot
        mu[k] = raw[base + c * n_k + k]
        s[k] = softplus(raw[2 * base + c * n_k + k]) + scale_min
        beta[k] = raw[3 * base + c * n_k + k]


@njit(cache=True, nogil=True)
def code_pixels(mode, planes, vh, vw, cond_depths, support_depths, prior, weights_tuple,
                n_k, scale_min, slope, state, buf):
    """Code the valid (vh, vw) region of one patch in raster order, channels r, g1, g2, b.

    Encode: reads planes, writes the stream. Decode: fills planes from the stream.
    Returns (status, ideal bits under the quantized CDFs, failing raster index).
    """
    ctx_w, ctx_b, ctx1_w, ctx1_b, ctx2_w, ctx2_b, head1_w, head2_w, head2_b = weights_tuple
    xn = np.zeros((4, vh, vw))
    deltas = np.zeros(4)
    n_sym = np.zeros(4, dtype=np.int64)
    n_lev = np.zeros(4, dtype=np.int64)
    norms = np.ones(4)
    for c in range(4):
        if cond_depths[c] > 0:
            n_lev[c] = np.int64(1) << cond_depths[c]
            deltas[c] = 1.0 / (n_lev[c] - 1)
        n_sym[c] = np.int64(1) << support_depths[c]
    pi = np.empty(n_k)
    mu = np.empty(n_k)
    s = np.empty(n_k)
    beta = np.empty((4, n_k))
    mu_hat = np.empty(n_k)
    bits = 0.0
    for i in range(vh):
        for j in range(vw):
            raw = pixel_raw_params(xn, i, j, vh, vw, ctx_w, ctx_b, ctx1_w, ctx1_b, ctx2_w, ctx2_b,
                                   head1_w, head2_w, head2_b, prior, slope)
            for c in range(4):
                channel_params(raw, c, n_k, scale_min, pi, mu, s, beta[c])
                if n_sym[c] == 1:
                    if mode == MODE_DECODE:
                        planes[c, i, j] = 0
                    elif planes[c, i, j] != 0:
                        return ERR_SUPPORT, bits, i * vw + j
                    continue
                for k in range(n_k):
                    if c == 0:
                        mu_hat[k] = mu[k]
                    elif c == 1:
                        mu_hat[k] = mu[k] + beta[0, k] * xn[0, i, j]
                    elif c == 2:
                        mu_hat[k] = mu[k] + beta[1, k] * xn[1, i, j]
                    else:
                        mu_hat[k] = mu[k] + beta[2, k] * xn[0, i, j] + beta[3, k] * (xn[1, i, j] + xn[2, i, j]) / 2
                if n_sym[c] < n_lev[c]:
                    norms[c] = mixture_cdf(n_sym[c], n_lev[c], deltas[c], pi, mu_hat, s)
                else:
                    norms[c] = 1.0
                if mode == MODE_ENCODE:
                    x = np.int64(planes[c, i, j])
                    if x >= n_sym[c]:
                        return ERR_SUPPORT, bits, i * vw + j
                    lo = quantized_cdf(x, n_sym[c], n_lev[c], norms[c], deltas[c], pi, mu_hat, s)
                    hi = quantized_cdf(x + 1, n_sym[c], n_lev[c], norms[c], deltas[c], pi, mu_hat, s)
                    if rc.enc_put(state, buf, lo, hi - lo) != rc.OK:
                        return rc.ERR_OVERFLOW, bits, i * vw + j
                else:
                    t = rc.dec_target(state)
                    if t >= rc.TOTAL:
                        return rc.ERR_CORRUPT, bits, i * vw + j
                    a = np.int64(0)
                    b = n_sym[c]
                    lo = np.int64(0)
                    hi = np.int64(rc.TOTAL)
                    while b - a > 1:
                        mid = (a + b) >> 1
                        q = quantized_cdf(mid, n_sym[c], n_lev[c], norms[c], deltas[c], pi, mu_hat, s)
                        if q <= t:
                            a = mid
                            lo = q
                        else:
                            b = mid
                            hi = q
                    x = a
                    err = rc.dec_consume(state, buf, lo, hi - lo)
                    if err != rc.OK:
                        return err, bits, i * vw + j
                    planes[c, i, j] = x
                bits -= math.log2((hi - lo) / rc.TOTAL)
                if cond_depths[c] > 0:
                    xn[c, i, j] = x * deltas[c]
    return rc.OK, bits, -1


@njit(cache=True)
def normal_cdf(t):
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


@njit(cache=True)
def gaussian_pmf_rows(mu, sigma, bound):
    """Unit-bin Gaussian masses on [-bound, bound] with the tails folded into the end bins."""
    n = mu.shape[0]
    a = 2 * bound + 1
    out = np.empty((n, a))
    for r in range(n):
        prev = 0.0
        for q in range(a):
            v = q - bound
            if q == a - 1:
                upper = 1.0
            else:
                upper = normal_cdf((v + 0.5 - mu[r]) / sigma[r])
            out[r, q] = upper - prev
            prev = upper
    return out


@njit(cache=True)
def gaussian_cdf_edge(q, n_sym, mu, sigma, bound):
    """Gaussian CDF at the lower edge of symbol q (value q - bound), tails folded."""
    if q <= 0:
        return 0.0
    if q >= n_sym:
        return 1.0
    return normal_cdf((q - bound - 0.5 - mu) / sigma)


@njit(cache=True)
def gaussian_quantized_cdf(q, n_sym, mu, sigma, bound):
    if q <= 0:
        return 0
    if q >= n_sym:
        return rc.TOTAL
    f = gaussian_cdf_edge(q, n_sym, mu, sigma, bound)
    if not f >= 0.0:
        f = 0.0
    elif f > 1.0:
        f = 1.0
    return q + np.int64(math.floor(f * (rc.TOTAL - n_sym)))


@njit(cache=True, nogil=True)
def code_gaussian(mode, values, mu, sigma, bound, state, buf):
    """Code integers in [-bound, bound] (flat arrays) under per-element Gaussians.

    Returns (status, ideal bits, failing index).
    """
    n_sym = 2 * bound + 1
    bits = 0.0
    for i in range(values.shape[0]):
        if mode == MODE_ENCODE:
            q = np.int64(values[i]) + bound
            if q < 0 or q >= n_sym:
                return ERR_SUPPORT, bits, i
            lo = gaussian_quantized_cdf(q, n_sym, mu[i], sigma[i], bound)
            hi = gaussian_quantized_cdf(q + 1, n_sym, mu[i], sigma[i], bound)
            if rc.enc_put(state, buf, lo, hi - lo) != rc.OK:
                return rc.ERR_OVERFLOW, bits, i
        else:
            t = rc.dec_target(state)
            if t >= rc.TOTAL:
                return rc.ERR_CORRUPT, bits, i
            a = np.int64(0)
            b = np.int64(n_sym)
            lo = np.int64(0)
            hi = np.int64(rc.TOTAL)
            while b - a > 1:
                mid = (a + b) >> 1
                v = gaussian_quantized_cdf(mid, n_sym, mu[i], sigma[i], bound)
                if v <= t:
                    a = mid
                    lo = v
                else:
                    b = mid
                    hi = v
            err = rc.dec_consume(state, buf, lo, hi - lo)
            if err != rc.OK:
                return err, bits, i
            values[i] = a - bound
        bits -= math.log2((hi - lo) / rc.TOTAL)
    return rc.OK, bits, -1
