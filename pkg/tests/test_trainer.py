import math

import numpy as np
import pytest
import torch

from rawcodec.config import TrainConfig
from rawcodec.container import Codec
from rawcodec.mixture import MixtureParams, joint_pixel_logprob
from rawcodec.network.model import LN2
from rawcodec.rawio import BayerImage, Pattern
from rawcodec.synthetic import CorpusSpec, make_synthetic_corpus
from rawcodec.trainer import (
    CropSampler,
    LRPlateau,
    RateReport,
    TrainingDiverged,
    crop_depths,
    evaluate_bpp,
    fixed_crops,
    split_corpus,
    train,
    validation_bpp,
)

from .conftest import TINY, make_model


def quick_cfg(**kw):
    base = dict(epochs=3, batch_size=4, learning_rate=3e-3, crop_size=16, patch_size=16, steps_per_epoch=4, prefetch=2)
    base.update(kw)
    return TrainConfig(**base)


def test_plateau_scripted_sequence():
    s = LRPlateau(1e-4, factor=0.1, patience=10)
    losses = [5.0, 4.0] + [4.0] * 9 + [4.5] + [3.0] + [3.5] * 10
    reductions = [i for i, v in enumerate(losses) if s.step(v)]
    # improvements at 0, 1, 12; ten stale epochs after 1 end at 11, after 12 end at 22
    assert reductions == [11, 22]
    assert s.lr == pytest.approx(1e-6)


def test_plateau_threshold():
    s = LRPlateau(1.0, patience=2, threshold=0.1)
    assert [s.step(v) for v in [1.0, 0.95, 0.92]] == [False, False, True]


def test_split_fractions():
    items = list(range(100))
    tr, va, te = split_corpus(items, 0.1, 0.1, 0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(tr + va + te) == items
    assert split_corpus(items, 0.1, 0.1, 0) == (tr, va, te)
    tr, va, te = split_corpus([1, 2], 0.1, 0.1, 0)
    assert va == tr and te == []


def test_crop_depths_recomputed():
    x = np.zeros((2, 4, 3, 3), dtype=np.int64)
    x[0, 1, 2, 2] = 200
    x[1, 3, 0, 0] = 1
    assert crop_depths(x).tolist() == [[8] * 4, [1] * 4]


def test_sampler_and_fixed_crops():
    imgs = make_synthetic_corpus(CorpusSpec("smooth", 2, 64, seed=3))
    x, d = CropSampler(imgs, 16, 0.5, 0).batch(5)
    assert x.shape == (5, 4, 16, 16) and (d == crop_depths(x)).all()
    x, d = fixed_crops(imgs, 16)
    assert x.shape == (2 * 4, 4, 16, 16)
    with pytest.raises(ValueError):
        CropSampler(imgs, 64, 0.5, 0)


def test_rate_equals_negative_log2_likelihood():
    """The loss is exactly the rate: compare against an independent float64 evaluation."""
    model = make_model(TINY, 4).double()
    r = np.random.default_rng(0)
    x = r.integers(0, 64, (1, 4, 16, 16))
    d = np.full((1, 4), 6)
    xt, dt = torch.from_numpy(x).double(), torch.from_numpy(d)
    with torch.no_grad():
        rate = model(xt, dt, noise=False)
        xn, e, y = model.analyse(xt, dt)
        y_hat = torch.sign(y) * torch.floor(y.abs() + 0.5)
        z_hat = model.h_a(y_hat)
        z_hat = torch.sign(z_hat) * torch.floor(z_hat.abs() + 0.5)
        mu_y, sig_y = model.h_s(z_hat)
        zm, zs = (t.detach() for t in model.z_prior())
        logits, mu, s, beta = model.mixture_params(xn, model.g_s(y_hat), e)

    def gauss_bits(v, m, sd):
        total = 0.0
        for a, b, c in zip(v.ravel(), m.ravel(), sd.ravel()):
            cdf = lambda t: 0.5 * math.erfc(-t / math.sqrt(2))  # noqa: E731
            total -= math.log2(max(cdf((a - b + 0.5) / c) - cdf((a - b - 0.5) / c), 1e-9))
        return total

    zb = gauss_bits(z_hat.numpy(), np.broadcast_to(zm.numpy()[None, :, None, None], z_hat.shape),
                    np.broadcast_to(zs.numpy()[None, :, None, None], z_hat.shape))
    yb = gauss_bits(y_hat.numpy(), mu_y.numpy(), sig_y.numpy())
    pi = torch.softmax(logits, dim=2)[0].numpy()
    params = MixtureParams(pi, mu[0].numpy(), s[0].numpy(), beta[0].numpy())
    pb = -joint_pixel_logprob(x[0], params, d[0])
    want = (zb + yb + pb) / (4 * 16 * 16)
    assert float(rate.bpp) == pytest.approx(want, rel=1e-9, abs=1e-9)
    assert float(rate.pixel_bits[0]) == pytest.approx(pb, rel=1e-9)


def test_training_is_deterministic():
    imgs = make_synthetic_corpus(CorpusSpec("smooth", 6, 48, seed=1))
    a = train(imgs, quick_cfg(), TINY)
    b = train(imgs, quick_cfg(), TINY)
    assert a.history_csv() == b.history_csv()
    assert len(a.history) == 3
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_history_file_and_best_epoch(tmp_path):
    imgs = make_synthetic_corpus(CorpusSpec("smooth", 6, 48, seed=1))
    res = train(imgs, quick_cfg(epochs=4), TINY, history_path=tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_bpp,val_bpp,lr,batch_size" and len(lines) == 5
    best = min(res.history, key=lambda r: r.val_bpp)
    assert res.best_epoch == best.epoch
    val_x, val_d = fixed_crops(split_corpus(imgs, 0.1, 0.1, 0)[1], 16)
    assert validation_bpp(res.model, val_x, val_d) == pytest.approx(best.val_bpp, rel=1e-6)


def test_constant_corpus_learns_near_zero_rate():
    imgs = make_synthetic_corpus(CorpusSpec("constant", 10, 64, bit_depth=4, seed=0))
    res = train(imgs, quick_cfg(epochs=20, batch_size=8, steps_per_epoch=50), TINY)
    # validation crops are single blocks: only the first pixel and the latents cost bits
    assert res.best_val_bpp < 0.15
    assert res.best_val_bpp < 0.05 * res.history[0].val_bpp


def test_uniform_noise_is_incompressible():
    b = 6
    imgs = make_synthetic_corpus(CorpusSpec("uniform", 8, 64, bit_depth=b, seed=0))
    res = train(imgs, quick_cfg(epochs=6, steps_per_epoch=10, learning_rate=1e-2), TINY)
    x, d = fixed_crops(imgs, 16)
    with torch.no_grad():
        rate = res.model(torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(d), noise=False)
    pixel_bpp = float(rate.pixel_bits.sum()) / (4 * x[..., 0, 0].size * 16 * 16 / 4)
    assert b - 0.05 <= pixel_bpp <= b + 0.5


def test_nan_loss_aborts():
    imgs = make_synthetic_corpus(CorpusSpec("smooth", 6, 48, seed=1))
    model = make_model(TINY)
    with torch.no_grad():
        model.head.pw2.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(imgs, quick_cfg(), TINY, model=model)


def test_batch_halves_on_memory_pressure(monkeypatch):
    imgs = make_synthetic_corpus(CorpusSpec("smooth", 6, 48, seed=1))
    model = make_model(TINY)
    original = type(model).forward
    calls = {"n": 0}

    def flaky(self, x, *a, **k):
        calls["n"] += 1
        if self.training and x.shape[0] > 2:
            raise RuntimeError("CPU out of memory (simulated)")
        return original(self, x, *a, **k)

    monkeypatch.setattr(type(model), "forward", flaky)
    res = train(imgs, quick_cfg(epochs=1, batch_size=8, min_batch_size=2), TINY, model=model)
    assert res.history[0].batch_size == 2
    with pytest.raises(RuntimeError, match="out of memory"):
        train(imgs, quick_cfg(epochs=1, batch_size=8, min_batch_size=8), TINY, model=make_model(TINY))


def test_evaluate_bpp_is_true_size(tiny_codec):
    imgs = make_synthetic_corpus(CorpusSpec("mixed", 2, 32, seed=0))
    rep = evaluate_bpp(imgs, tiny_codec, "adaptive", patch_size=8)
    for im, row in zip(imgs, rep.rows):
        data, _ = tiny_codec.compress(im, 8)
        assert row.total_bits == 8 * len(data)
        assert row.pixels == im.width * im.height
    assert rep.corpus.total_bits == sum(r.total_bits for r in rep.rows)
    fixed = evaluate_bpp(imgs, tiny_codec, "fixed", patch_size=8)
    assert fixed.mode == "fixed"
    assert "corpus" in rep.to_text() and rep.to_csv().splitlines()[0].startswith("image,mode")


def test_evaluate_bpp_is_a_lossless_audit(tiny_codec, monkeypatch):
    img = BayerImage(np.arange(64, dtype=np.uint16).reshape(8, 8), Pattern.RGGB, 8)

    class Broken(Codec):
        def decompress(self, data, jobs=1):
            out = super().decompress(data, jobs)
            s = out.samples.copy()
            s[0, 0] ^= 1
            return BayerImage(s, out.pattern, out.container_bit_depth)

    broken = Broken(tiny_codec.patch_codec, tiny_codec.weights_hash)
    with pytest.raises(AssertionError, match="lossless audit"):
        evaluate_bpp([img], broken, patch_size=8)


def test_rate_report_corpus_row():
    from rawcodec.trainer import RateRow

    rep = RateReport("adaptive", [RateRow("a", 100, 10, 200, 30, 8.0), RateRow("b", 300, 30, 500, 70, 12.0)])
    c = rep.corpus
    assert (c.pixels, c.total_bits, c.mean_depth) == (400, 840, 11.0)
    assert rep.bpp == pytest.approx(2.1)
