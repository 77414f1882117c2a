"""Desk-scale learned transforms and the end-to-end rate model (torch).

Everything here is differentiable and used for training and for the
encoder-only transforms (analysis, hyper analysis). The decoder-side
evaluations used while coding live in ``kernels`` and mirror these layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..bitdepth import BitDepthEmbedding
from ..config import ModelConfig

LN2 = math.log(2.0)
LIKELIHOOD_FLOOR = 1e-9


def causal_mask(kernel: int) -> torch.Tensor:
    """Raster-order mask: rows above the centre and pixels left of it."""
    m = torch.zeros(kernel, kernel)
    c = kernel // 2
    m[:c, :] = 1
    m[c, :c] = 1
    return m


class MaskedConv2d(nn.Conv2d):
    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__(in_ch, out_ch, kernel, padding=kernel // 2)
        self.register_buffer("mask", causal_mask(kernel)[None, None])

    def forward(self, x):
        return F.conv2d(x, self.weight * self.mask, self.bias, padding=self.padding)


def soft_positive(t: torch.Tensor, floor: float) -> torch.Tensor:
    return F.softplus(t) + floor


def noise_quantize(t: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(t.shape, generator=generator, dtype=t.dtype, device=t.device) - 0.5
    return t + u


def round_quantize(t):
    """Round half away from zero."""
    if isinstance(t, torch.Tensor):
        return torch.sign(t) * torch.floor(torch.abs(t) + 0.5)
    import numpy as np

    t = np.asarray(t)
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def normal_cdf(t: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-t / math.sqrt(2.0))


def gaussian_likelihood(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mass of the unit bin centred on v under N(mu, sigma^2)."""
    d = torch.abs(v - mu)
    upper = normal_cdf((0.5 - d) / sigma)
    lower = normal_cdf((-0.5 - d) / sigma)
    return upper - lower


def gaussian_bits(v, mu, sigma) -> torch.Tensor:
    p = gaussian_likelihood(v, mu, sigma).clamp_min(LIKELIHOOD_FLOOR)
    return -torch.log(p) / LN2


class AnalysisTransform(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        a = cfg.analysis_channels
        self.conv1 = nn.Conv2d(4 + cfg.embed_dim, a, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(a, a, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(a, cfg.latent_channels, 3, stride=2, padding=1)
        self.slope = cfg.negative_slope

    def forward(self, xn, e):
        h = torch.cat([xn, e[:, :, None, None].expand(-1, -1, *xn.shape[-2:])], dim=1)
        h = F.leaky_relu(self.conv1(h), self.slope)
        h = F.leaky_relu(self.conv2(h), self.slope)
        return self.conv3(h)


class SynthesisTransform(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.synthesis_channels
        self.deconv1 = nn.ConvTranspose2d(cfg.latent_channels, s, 4, stride=2, padding=1)
        self.deconv2 = nn.ConvTranspose2d(s, s, 4, stride=2, padding=1)
        self.deconv3 = nn.ConvTranspose2d(s, cfg.prior_channels, 4, stride=2, padding=1)
        self.slope = cfg.negative_slope

    def forward(self, y_hat):
        h = F.leaky_relu(self.deconv1(y_hat), self.slope)
        h = F.leaky_relu(self.deconv2(h), self.slope)
        return self.deconv3(h)


class HyperAnalysis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(cfg.latent_channels, cfg.hyper_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.hyper_channels, cfg.hyper_channels, 3, padding=1)
        self.slope = cfg.negative_slope

    def forward(self, y_hat):
        return self.conv2(F.leaky_relu(self.conv1(y_hat), self.slope))


class HyperSynthesis(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(cfg.hyper_channels, cfg.hyper_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.hyper_channels, 2 * cfg.latent_channels, 3, padding=1)
        self.slope = cfg.negative_slope
        self.sigma_min = cfg.sigma_min

    def forward(self, z_hat):
        out = self.conv2(F.leaky_relu(self.conv1(z_hat), self.slope))
        mu, raw = out.chunk(2, dim=1)
        return mu, soft_positive(raw, self.sigma_min)


class ContextModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.context_channels
        self.masked = MaskedConv2d(4, c, cfg.context_kernel)
        self.pw1 = nn.Conv2d(c, c, 1)
        self.pw2 = nn.Conv2d(c, c, 1)
        self.slope = cfg.negative_slope

    def forward(self, xn):
        h = F.leaky_relu(self.masked(xn), self.slope)
        h = F.leaky_relu(self.pw1(h), self.slope)
        return F.leaky_relu(self.pw2(h), self.slope)


class EntropyHead(nn.Module):
    """Pointwise map from [context, prior features, depth embedding] to mixture parameters."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.mixtures
        self.pw1 = nn.Conv2d(cfg.context_channels + cfg.prior_channels + cfg.embed_dim, cfg.head_channels, 1)
        self.pw2 = nn.Conv2d(cfg.head_channels, 16 * k, 1)
        self.slope = cfg.negative_slope
        self.k = k
        self.scale_min = cfg.scale_min

    def forward(self, ctx, f, e):
        e_map = e[:, :, None, None].expand(-1, -1, *ctx.shape[-2:])
        h = F.leaky_relu(self.pw1(torch.cat([ctx, f, e_map], dim=1)), self.slope)
        return self.pw2(h)

    def split(self, raw):
        """raw (B, 16K, H, W) -> logits, mu, s, beta each (B, 4, K, H, W)."""
        b, _, h, w = raw.shape
        raw = raw.view(b, 4, 4, self.k, h, w)
        logits, mu, s_raw, beta = raw.unbind(dim=1)
        return logits, mu, soft_positive(s_raw, self.scale_min), beta


def depth_deltas(depths: torch.Tensor) -> torch.Tensor:
    """(B, 4) depths -> bin widths, with 1 standing in for depth-0 channels."""
    levels = torch.pow(2.0, depths.double()) - 1.0
    return torch.where(depths > 0, 1.0 / levels.clamp_min(1.0), torch.ones_like(levels))


def normalize(x: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    delta = depth_deltas(depths).to(x.dtype)
    return torch.where(depths[:, :, None, None] > 0, x * delta[:, :, None, None], torch.zeros_like(x))


def autoregressive_means_t(mu, beta, xn):
    """mu, beta (B, 4, K, H, W); xn (B, 4, H, W) normalized decoded values."""
    xr, xg1, xg2 = xn[:, 0:1], xn[:, 1:2], xn[:, 2:3]
    return torch.stack(
        [
            mu[:, 0],
            mu[:, 1] + beta[:, 0] * xr,
            mu[:, 2] + beta[:, 1] * xg1,
            mu[:, 3] + beta[:, 2] * xr + beta[:, 3] * (xg1 + xg2) / 2,
        ],
        dim=1,
    )


def mixture_log_prob(x, depths, logits, mu_hat, s):
    """Natural-log PMF per pixel-channel, (B, 4, H, W); depth-0 channels contribute 0."""
    delta = depth_deltas(depths).to(x.dtype)[:, :, None, None, None]
    top = (torch.pow(2.0, depths.to(x.dtype)) - 1.0)[:, :, None, None, None]
    xk = x[:, :, None]
    centre = (xk * delta - mu_hat) / s
    half = 0.5 * delta / s
    upper = centre + half
    lower = centre - half
    log_sig_u = -F.softplus(-upper)
    log_sig_neg_l = -F.softplus(lower)
    gap = torch.log((-torch.expm1(lower - upper)).clamp_min(torch.finfo(x.dtype).tiny))
    interior = log_sig_u + log_sig_neg_l + gap
    comp = torch.where(xk <= 0, log_sig_u, torch.where(xk >= top, log_sig_neg_l, interior))
    lp = torch.logsumexp(comp + F.log_softmax(logits, dim=2), dim=2)
    return torch.where(depths[:, :, None, None] > 0, lp, torch.zeros_like(lp))


@dataclass
class RateTerms:
    pixel_bits: torch.Tensor  # (B,)
    latent_bits: torch.Tensor  # (B,)
    hyper_bits: torch.Tensor  # (B,)
    bayer_pixels: int

    @property
    def total_bits(self):
        return self.pixel_bits + self.latent_bits + self.hyper_bits

    @property
    def bpp(self):
        return self.total_bits.sum() / (self.bayer_pixels * self.total_bits.shape[0])


class RawCompressionModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.embedding = BitDepthEmbedding(cfg.embed_dim)
        self.g_a = AnalysisTransform(cfg)
        self.g_s = SynthesisTransform(cfg)
        self.h_a = HyperAnalysis(cfg)
        self.h_s = HyperSynthesis(cfg)
        self.context = ContextModel(cfg)
        self.head = EntropyHead(cfg)
        # static per-channel prior of the hyper latent
        self.z_mu = nn.Parameter(torch.zeros(cfg.hyper_channels))
        self.z_sigma_raw = nn.Parameter(torch.zeros(cfg.hyper_channels))

    def z_prior(self):
        return self.z_mu, soft_positive(self.z_sigma_raw, self.cfg.sigma_min)

    def analyse(self, x, depths):
        xn = normalize(x, depths)
        e = self.embedding(depths)
        return xn, e, self.g_a(xn, e)

    def mixture_params(self, xn, f, e):
        return self.head.split(self.head(self.context(xn), f, e))

    def forward(self, x, depths, generator=None, noise=True) -> RateTerms:
        """x (B, 4, H, W) integer-valued float tensor, depths (B, 4) long."""
        xn, e, y = self.analyse(x, depths)
        y_t = noise_quantize(y, generator) if noise else round_quantize(y)
        z = self.h_a(y_t)
        z_t = noise_quantize(z, generator) if noise else round_quantize(z)
        mu_y, sigma_y = self.h_s(z_t)
        zm, zs = self.z_prior()
        hyper_bits = gaussian_bits(z_t, zm[None, :, None, None], zs[None, :, None, None]).sum(dim=(1, 2, 3))
        latent_bits = gaussian_bits(y_t, mu_y, sigma_y).sum(dim=(1, 2, 3))
        f = self.g_s(y_t)
        logits, mu, s, beta = self.mixture_params(xn, f, e)
        mu_hat = autoregressive_means_t(mu, beta, xn)
        lp = mixture_log_prob(x, depths, logits, mu_hat, s)
        pixel_bits = -lp.sum(dim=(1, 2, 3)) / LN2
        return RateTerms(pixel_bits, latent_bits, hyper_bits, 4 * x.shape[-1] * x.shape[-2])
