import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from rawcodec.config import ModelConfig
from rawcodec.network.kernels import DecoderWeights
from rawcodec.network.model import (
    autoregressive_means_t,
    gaussian_bits,
    mixture_log_prob,
    noise_quantize,
    normalize,
    round_quantize,
    soft_positive,
)

from .conftest import TINY, make_model

EPS = 1e-3
RTOL = 1e-4
ATOL = 1e-5  # gradcheck default; covers O(eps^2) truncation where the derivative is ~0
SEEDS = range(20)


def fd_check(fn, inputs):
    assert gradcheck(fn, inputs, eps=EPS, rtol=RTOL, atol=ATOL, nondet_tol=0.0)


class KinkGuard:
    """Records which side of zero every leaky-rectifier input falls on."""

    def __init__(self, monkeypatch):
        self.signs = []
        original = F.leaky_relu

        def recording(x, *args, **kwargs):
            self.signs.append(x.detach() > 0)
            return original(x, *args, **kwargs)

        monkeypatch.setattr(F, "leaky_relu", recording)

    def run(self, fn):
        self.signs = []
        out = fn()
        return out, self.signs


def coordinate_check(loss_fn, params, seed, guard, per_tensor=6, min_checked=0.5):
    """Central differences on sampled coordinates of every parameter tensor.

    A difference quotient whose stencil straddles a rectifier kink does not
    estimate the derivative, so such coordinates are skipped and counted.
    """
    r = np.random.default_rng(seed)
    loss, centre = guard.run(loss_fn)
    grads = torch.autograd.grad(loss, params)
    tried = checked = 0
    for p, gr in zip(params, grads):
        flat, gflat = p.data.view(-1), gr.view(-1)
        for i in r.choice(flat.numel(), min(per_tensor, flat.numel()), replace=False):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + EPS
                up, s_up = guard.run(loss_fn)
                flat[i] = old - EPS
                down, s_down = guard.run(loss_fn)
                flat[i] = old
            tried += 1
            if any(not (torch.equal(a, c) and torch.equal(b, c)) for a, b, c in zip(s_up, s_down, centre)):
                continue
            checked += 1
            numeric = (up.item() - down.item()) / (2 * EPS)
            analytic = gflat[i].item()
            assert abs(numeric - analytic) <= ATOL + RTOL * abs(analytic), (p.shape, int(i), numeric, analytic)
    assert checked >= min_checked * tried, f"only {checked}/{tried} coordinates were away from a kink"


@pytest.mark.parametrize("seed", SEEDS)
def test_gradient_elementwise_ops(seed):
    g = torch.Generator().manual_seed(seed)
    t = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    fd_check(lambda x: soft_positive(x, 1e-6), (t(6).requires_grad_(),))
    v = t(2, 3, 2, 2)
    # offsets kept off the |v - mu| kink and away from the likelihood floor
    off = 0.1 + 1.4 * torch.rand(2, 3, 2, 2, generator=g, dtype=torch.float64)
    mu = (v + off * torch.sign(t(2, 3, 2, 2))).requires_grad_()
    sigma = (0.3 + t(2, 3, 2, 2).abs()).requires_grad_()
    fd_check(lambda m, s: gaussian_bits(v, m, s), (mu, sigma))


@pytest.mark.parametrize("seed", SEEDS)
def test_gradient_autoregressive_means(seed):
    g = torch.Generator().manual_seed(seed)
    mu = torch.randn(1, 4, 2, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    beta = torch.randn(1, 4, 2, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    xn = torch.rand(1, 4, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    fd_check(autoregressive_means_t, (mu, beta, xn))


@pytest.mark.parametrize("seed", SEEDS)
def test_gradient_mixture_log_prob(seed):
    g = torch.Generator().manual_seed(seed)
    depths = torch.tensor([[1, 4, 8, 12]])
    top = (2 ** depths - 1).double()[:, :, None, None]
    x = torch.floor(torch.rand(1, 4, 2, 3, generator=g, dtype=torch.float64) * (top + 1)).clamp(max=top)
    x[0, :, 0, 0] = 0  # lower edge bin
    x[0, :, 1, 2] = top[0, :, 0, 0]  # upper edge bin
    logits = torch.randn(1, 4, 3, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    mu = torch.rand(1, 4, 3, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    # scales >= 0.5 keep the 1e-3 step small against the curvature
    s = (0.5 + 0.5 * torch.rand(1, 4, 3, 2, 3, generator=g, dtype=torch.float64)).requires_grad_()
    fd_check(lambda lg, m, sc: mixture_log_prob(x, depths, lg, m, sc), (logits, mu, s))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_mixture_log_prob_sharp_scales(seed):
    # sharp components need a finer step for the difference quotient to converge
    g = torch.Generator().manual_seed(seed)
    depths = torch.tensor([[1, 2, 8, 14]])
    x = torch.tensor([0.0, 3.0, 100.0, 9000.0], dtype=torch.float64).view(1, 4, 1, 1)
    logits = torch.randn(1, 4, 2, 1, 1, generator=g, dtype=torch.float64, requires_grad=True)
    mu = torch.rand(1, 4, 2, 1, 1, generator=g, dtype=torch.float64, requires_grad=True)
    s = (0.01 + 0.1 * torch.rand(1, 4, 2, 1, 1, generator=g, dtype=torch.float64)).requires_grad_()
    assert gradcheck(
        lambda lg, m, sc: mixture_log_prob(x, depths, lg, m, sc), (logits, mu, s), eps=1e-6, rtol=RTOL, atol=ATOL
    )


LAYER_NAMES = ["g_a", "g_s", "h_a", "h_s", "context", "head", "embedding"]


def _layer_call(model, name, g):
    cfg = model.cfg
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    if name == "g_a":
        xn, e = torch.rand(1, 4, 16, 16, generator=g, dtype=torch.float64), r(1, cfg.embed_dim)
        return lambda: model.g_a(xn, e).pow(2).sum()
    if name == "g_s":
        y = r(1, cfg.latent_channels, 2, 2)
        return lambda: model.g_s(y).pow(2).sum()
    if name == "h_a":
        y = r(1, cfg.latent_channels, 3, 3)
        return lambda: model.h_a(y).pow(2).sum()
    if name == "h_s":
        z = r(1, cfg.hyper_channels, 3, 3)
        return lambda: sum(t.pow(2).sum() for t in model.h_s(z))
    if name == "context":
        xn = torch.rand(1, 4, 6, 6, generator=g, dtype=torch.float64)
        return lambda: model.context(xn).pow(2).sum()
    if name == "head":
        ctx, f, e = r(1, cfg.context_channels, 3, 3), r(1, cfg.prior_channels, 3, 3), r(1, cfg.embed_dim)
        return lambda: sum(t.pow(2).sum() for t in model.head.split(model.head(ctx, f, e)))
    depths = torch.randint(0, 17, (3, 4), generator=g)
    return lambda: model.embedding(depths).pow(2).sum()


@pytest.mark.parametrize("name", LAYER_NAMES)
def test_gradient_layers(name, monkeypatch):
    guard = KinkGuard(monkeypatch)
    for seed in SEEDS:
        model = make_model(TINY, seed).double()
        g = torch.Generator().manual_seed(100 + seed)
        mod = getattr(model, name)
        coordinate_check(_layer_call(model, name, g), list(mod.parameters()), seed, guard)


def _batch(seed, depth=8, size=16):
    g = torch.Generator().manual_seed(seed)
    depths = torch.tensor([[depth] * 4, [depth - 2, depth, depth, depth - 1]])
    top = (2 ** depths - 1).double()[:, :, None, None]
    x = torch.floor(torch.rand(2, 4, size, size, generator=g, dtype=torch.float64) * (top + 1)).clamp(max=top)
    return x, depths


@pytest.mark.parametrize("seed", SEEDS)
def test_gradient_end_to_end_loss(seed, monkeypatch):
    model = make_model(TINY, seed).double()
    x, depths = _batch(seed)

    def loss():
        # re-seeded so both finite-difference evaluations see the same noise
        return model(x, depths, generator=torch.Generator().manual_seed(seed)).bpp

    coordinate_check(loss, list(model.parameters()), seed, KinkGuard(monkeypatch))


def test_causality():
    """Perturbing a pixel only changes the context of later pixels in raster order."""
    model = make_model().double()
    g = torch.Generator().manual_seed(0)
    xn = torch.rand(1, 4, 9, 9, generator=g, dtype=torch.float64)
    base = model.context(xn)
    for i, j in [(0, 0), (4, 4), (8, 3), (2, 8)]:
        pert = xn.clone()
        pert[0, :, i, j] += 0.5
        diff = (model.context(pert) - base).abs().sum(dim=(0, 1)) > 0
        changed = diff.nonzero().tolist()
        assert changed, "perturbation had no effect"
        for a, b in changed:
            assert (a, b) > (i, j)


def test_noise_quantize_statistics():
    t = torch.zeros(200000, dtype=torch.float64)
    u = noise_quantize(t, torch.Generator().manual_seed(0))
    assert u.min() >= -0.5 and u.max() < 0.5
    assert abs(u.mean().item()) < 0.005
    assert u.var().item() == pytest.approx(1 / 12, rel=0.02)


def test_round_quantize_half_away():
    v = torch.tensor([-1.5, -0.5, 0.49, 0.5, 1.5, 2.5])
    assert round_quantize(v).tolist() == [-2, -1, 0, 1, 2, 3]
    assert round_quantize(np.array([-2.5, 2.5])).tolist() == [-3, 3]


def test_normalize():
    x = torch.tensor([[[[0.0]], [[255.0]], [[1.0]], [[3.0]]]])
    d = torch.tensor([[8, 8, 1, 0]])
    assert normalize(x, d).flatten().tolist() == [0.0, 1.0, 1.0, 0.0]


def test_scale_floors():
    model = make_model()
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(-1e4)
    _, sigma = model.h_s(torch.zeros(1, TINY.hyper_channels, 2, 2))
    assert (sigma >= TINY.sigma_min).all()
    raw = torch.full((1, 16 * TINY.mixtures, 2, 2), -1e4)
    assert (model.head.split(raw)[2] >= TINY.scale_min).all()


def test_forward_deterministic_and_finite():
    model = make_model()
    x, depths = _batch(3)
    a = model(x.float(), depths, generator=torch.Generator().manual_seed(1))
    b = model(x.float(), depths, generator=torch.Generator().manual_seed(1))
    assert torch.equal(a.total_bits, b.total_bits)
    assert torch.isfinite(a.total_bits).all() and (a.total_bits > 0).all()


@pytest.mark.parametrize("cfg", [TINY, ModelConfig()])
def test_decoder_kernels_match_torch(cfg):
    model = make_model(cfg, 5).double()
    w = DecoderWeights.from_model(model)
    g = torch.Generator().manual_seed(2)
    z = torch.round(3 * torch.randn(1, cfg.hyper_channels, 4, 5, generator=g, dtype=torch.float64))
    mu_t, sig_t = model.h_s(z)
    mu, sig = w.hyper_synthesis(z[0].numpy())
    assert np.allclose(mu, mu_t[0].detach().numpy(), rtol=1e-12, atol=1e-12)
    assert np.allclose(sig, sig_t[0].detach().numpy(), rtol=1e-12, atol=1e-12)
    y = torch.round(3 * torch.randn(1, cfg.latent_channels, 4, 5, generator=g, dtype=torch.float64))
    f_t = model.g_s(y)[0].detach().numpy()
    assert np.allclose(w.synthesis(y[0].numpy()), f_t, rtol=1e-12, atol=1e-12)
    assert np.allclose(w.synthesis(y[0].numpy(), (13, 7)), f_t[:, :13, :7], rtol=1e-12, atol=1e-12)
    d = np.array([3, 8, 8, 16])
    e_t = model.embedding(torch.as_tensor(d)[None])[0].detach().numpy()
    assert np.allclose(w.embed(d), e_t, rtol=1e-12, atol=1e-14)


def test_invalid_config():
    with pytest.raises(ValueError):
        ModelConfig(mixtures=0)
    with pytest.raises(ValueError):
        ModelConfig(mixtures=11)
    with pytest.raises(ValueError):
        ModelConfig(context_kernel=4)
