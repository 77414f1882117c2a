"""Per-patch coding: hyper latent, latent and pixel sub-streams.

Each sub-stream is an independent range-coder stream. The hyper latent is
coded under the static per-channel prior, the latent under Gaussians from the
hyper synthesis, and the pixels by the compiled autoregressive loop whose
head is fed with the synthesis features of the decoded latent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from ..network import kernels
from ..network.kernels import MODE_DECODE, MODE_ENCODE, DecoderWeights
from ..network.model import RawCompressionModel, round_quantize
from . import rangecoder as rc

_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class PatchStreams:
    z: bytes
    y: bytes
    pixels: bytes

    @property
    def empty(self) -> bool:
        return not (self.z or self.y or self.pixels)

    def frame(self) -> bytes:
        """Three sub-streams, each behind a 4-byte little-endian length."""
        out = bytearray()
        for part in (self.z, self.y, self.pixels):
            out += _LEN.pack(len(part)) + part
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> PatchStreams:
        parts = []
        pos = 0
        for _ in range(3):
            if pos + 4 > len(data):
                raise rc.StreamError("truncated sub-stream length", pos)
            (n,) = _LEN.unpack_from(data, pos)
            pos += 4
            if pos + n > len(data):
                raise rc.StreamError("sub-stream runs past the patch payload", pos)
            parts.append(bytes(data[pos : pos + n]))
            pos += n
        if pos != len(data):
            raise rc.StreamError("trailing bytes after the pixel sub-stream", pos)
        return cls(*parts)


@dataclass(frozen=True)
class PatchCost:
    """Ideal bits under the quantized tables; realized sizes come from the streams."""

    hyper_bits: float = 0.0
    latent_bits: float = 0.0
    pixel_bits: float = 0.0


EMPTY = PatchStreams(b"", b"", b"")


def _check(status: int, where: str, index: int, stream_offset: int = -1) -> None:
    if status == rc.OK:
        return
    if status == kernels.ERR_SUPPORT:
        raise SupportViolation(f"{where}: symbol {index} outside the coded support")
    if status == rc.ERR_TRUNCATED:
        raise rc.StreamError(f"{where}: truncated at symbol {index}", stream_offset)
    if status == rc.ERR_OVERFLOW:
        raise rc.StreamError(f"{where}: encoder buffer overflow", stream_offset)
    raise rc.StreamError(f"{where}: corrupt at symbol {index}", stream_offset)


class SupportViolation(ValueError):
    pass


class _Enc:
    def __init__(self, capacity: int):
        self.state = np.zeros(6, dtype=np.int64)
        self.buf = np.zeros(capacity + 64, dtype=np.uint8)
        rc.enc_init(self.state)

    def finish(self) -> bytes:
        if rc.enc_finish(self.state, self.buf) != rc.OK:
            raise rc.StreamError("encoder buffer overflow")
        return self.buf[: int(self.state[rc.E_POS])].tobytes()


class _Dec:
    def __init__(self, data: bytes, where: str):
        self.where = where
        # writable copy: the compiled loops share one signature for both directions
        self.buf = np.frombuffer(data, dtype=np.uint8).copy()
        self.state = np.zeros(4, dtype=np.int64)
        if rc.dec_init(self.state, self.buf, 0, self.buf.size) != rc.OK:
            raise rc.StreamError(f"{where}: shorter than the 4-byte preamble", len(data))

    @property
    def pos(self) -> int:
        return int(self.state[rc.D_POS])

    def done(self) -> None:
        if self.pos != self.buf.size:
            raise rc.StreamError(f"{self.where}: {self.buf.size - self.pos} unread bytes", self.pos)


class PatchCodec:
    """Encoder and decoder for single patches under one set of weights.

    ``model`` (torch) is needed only to encode; decoding uses ``weights`` alone.
    """

    def __init__(self, weights: DecoderWeights, model: RawCompressionModel | None = None):
        self.weights = weights
        self.model = model.eval() if model is not None else None
        cfg = weights.cfg
        self.bound = cfg.latent_bound
        self._pixel_arrays = weights.pixel_arrays()

    @classmethod
    def from_model(cls, model: RawCompressionModel) -> PatchCodec:
        return cls(DecoderWeights.from_model(model), model)

    def latent_shape(self, patch_size: int) -> tuple[int, int]:
        s = self.weights.cfg.stride
        if patch_size % s:
            raise ValueError(f"patch size {patch_size} is not a multiple of {s}")
        return patch_size // s, patch_size // s

    # --- encoder-only transforms ---------------------------------------

    def analyse(self, planes: np.ndarray, cond) -> tuple[np.ndarray, np.ndarray]:
        """Rounded and clamped (y_hat, z_hat) of one patch."""
        if self.model is None:
            raise RuntimeError("encoding needs the full model, not only decoder weights")
        bound = self.bound
        with torch.no_grad():
            x = torch.from_numpy(planes.astype(np.float32))[None]
            d = torch.as_tensor(np.asarray(cond, dtype=np.int64))[None]
            _, _, y = self.model.analyse(x, d)
            y_hat = round_quantize(y).clamp(-bound, bound)
            z_hat = round_quantize(self.model.h_a(y_hat)).clamp(-bound, bound)
        return y_hat[0].double().numpy(), z_hat[0].double().numpy()

    # --- shared pieces ---------------------------------------------------

    def _z_params(self, shape):
        w = self.weights
        mu = np.ascontiguousarray(np.broadcast_to(w.z_mu[:, None, None], shape).ravel())
        sigma = np.ascontiguousarray(np.broadcast_to(w.z_sigma[:, None, None], shape).ravel())
        return mu, sigma

    def _prior(self, y_hat, valid, cond):
        w = self.weights
        f = w.synthesis(y_hat, valid)
        return np.ascontiguousarray(w.head_prior(f, w.embed(cond)))

    # --- public API --------------------------------------------------------

    def encode(self, planes, valid, cond, support) -> tuple[PatchStreams, PatchCost]:
        """planes (4, P, P) integers with edge-replicated padding, valid (vh, vw)."""
        planes = np.asarray(planes)
        cond = np.asarray(cond, dtype=np.int64).reshape(4)
        support = np.asarray(support, dtype=np.int64).reshape(4)
        if (support > cond).any():
            raise SupportViolation("support depth exceeds conditioning depth")
        if not support.any():
            if planes[:, : valid[0], : valid[1]].any():
                raise SupportViolation("nonzero sample in a depth-0 patch")
            return EMPTY, PatchCost()
        self.latent_shape(planes.shape[-1])
        w = self.weights
        y_hat, z_hat = self.analyse(planes, cond)

        zs = z_hat.ravel().copy()
        zmu, zsig = self._z_params(z_hat.shape)
        enc = _Enc(2 * zs.size)
        st, zbits, idx = kernels.code_gaussian(MODE_ENCODE, zs, zmu, zsig, self.bound, enc.state, enc.buf)
        _check(st, "hyper latent", idx)
        z_stream = enc.finish()

        mu, sigma = w.hyper_synthesis(z_hat)
        ys = y_hat.ravel().copy()
        enc = _Enc(2 * ys.size)
        st, ybits, idx = kernels.code_gaussian(
            MODE_ENCODE, ys, np.ascontiguousarray(mu.ravel()), np.ascontiguousarray(sigma.ravel()),
            self.bound, enc.state, enc.buf,
        )
        _check(st, "latent", idx)
        y_stream = enc.finish()

        vh, vw = valid
        prior = self._prior(y_hat, valid, cond)
        px = np.ascontiguousarray(planes[:, :vh, :vw], dtype=np.int64)
        # worst case is 16 bits per symbol
        enc = _Enc(8 * vh * vw)
        st, pbits, idx = kernels.code_pixels(
            MODE_ENCODE, px, vh, vw, cond, support, prior, self._pixel_arrays,
            w.cfg.mixtures, w.cfg.scale_min, w.cfg.negative_slope, enc.state, enc.buf,
        )
        _check(st, "pixels", idx)
        return PatchStreams(z_stream, y_stream, enc.finish()), PatchCost(zbits, ybits, pbits)

    def decode(self, streams: PatchStreams, patch_size: int, valid, cond, support) -> np.ndarray:
        """Returns (4, vh, vw) int64 samples of the valid region."""
        cond = np.asarray(cond, dtype=np.int64).reshape(4)
        support = np.asarray(support, dtype=np.int64).reshape(4)
        vh, vw = valid
        if (support > cond).any():
            raise SupportViolation("support depth exceeds conditioning depth")
        if not support.any():
            if not streams.empty:
                raise rc.StreamError("depth-0 patch carries payload bytes")
            return np.zeros((4, vh, vw), dtype=np.int64)
        w = self.weights
        lh, lw = self.latent_shape(patch_size)

        shape = (w.cfg.hyper_channels, lh, lw)
        zmu, zsig = self._z_params(shape)
        z = np.zeros(zmu.size, dtype=np.float64)
        dec = _Dec(streams.z, "hyper latent")
        st, _, idx = kernels.code_gaussian(MODE_DECODE, z, zmu, zsig, self.bound, dec.state, dec.buf)
        _check(st, "hyper latent", idx, dec.pos)
        dec.done()
        z_hat = z.reshape(shape)

        mu, sigma = w.hyper_synthesis(z_hat)
        y = np.zeros(mu.size, dtype=np.float64)
        dec = _Dec(streams.y, "latent")
        st, _, idx = kernels.code_gaussian(
            MODE_DECODE, y, np.ascontiguousarray(mu.ravel()), np.ascontiguousarray(sigma.ravel()),
            self.bound, dec.state, dec.buf,
        )
        _check(st, "latent", idx, dec.pos)
        dec.done()
        y_hat = y.reshape(mu.shape)

        prior = self._prior(y_hat, valid, cond)
        px = np.zeros((4, vh, vw), dtype=np.int64)
        dec = _Dec(streams.pixels, "pixels")
        st, _, idx = kernels.code_pixels(
            MODE_DECODE, px, vh, vw, cond, support, prior, self._pixel_arrays,
            w.cfg.mixtures, w.cfg.scale_min, w.cfg.negative_slope, dec.state, dec.buf,
        )
        _check(st, "pixels", idx, dec.pos)
        dec.done()
        return px

    def model_bits(self, planes, valid, cond, support) -> PatchCost:
        """Float-model cost of the patch (no coding), for comparison with realized sizes."""
        from ..mixture import joint_pixel_logprob
        from ..network.latent import gaussian_latent_bits

        cond = np.asarray(cond, dtype=np.int64).reshape(4)
        support = np.asarray(support, dtype=np.int64).reshape(4)
        if not support.any():
            return PatchCost()
        y_hat, z_hat = self.analyse(np.asarray(planes), cond)
        w = self.weights
        zb = gaussian_latent_bits(z_hat, w.z_mu[:, None, None], w.z_sigma[:, None, None], self.bound)
        mu, sigma = w.hyper_synthesis(z_hat)
        yb = gaussian_latent_bits(y_hat, mu, sigma, self.bound)
        vh, vw = valid
        params = self.pixel_params(np.asarray(planes)[:, :vh, :vw], y_hat, cond)
        pb = -joint_pixel_logprob(np.asarray(planes)[:, :vh, :vw], params, cond, support=support)
        return PatchCost(zb, yb, pb)

    def pixel_params(self, planes, y_hat, cond):
        """Mixture parameters of every valid pixel given the true samples (teacher forcing)."""
        from ..mixture import MixtureParams

        vh, vw = planes.shape[1:]
        w = self.weights
        prior = self._prior(y_hat, (vh, vw), cond)
        xn = np.zeros((4, vh, vw))
        for c in range(4):
            if cond[c] > 0:
                xn[c] = planes[c] * (1.0 / ((1 << int(cond[c])) - 1))
        k = w.cfg.mixtures
        raw = np.empty((16 * k, vh, vw))
        for i in range(vh):
            for j in range(vw):
                raw[:, i, j] = kernels.pixel_raw_params(
                    xn, i, j, vh, vw, *self._pixel_arrays[:6], w.head1_w, w.head2_w, w.head2_b, prior,
                    w.cfg.negative_slope,
                )
        raw = raw.reshape(4, 4, k, vh, vw)
        logits = raw[0]
        pi = np.exp(logits - logits.max(axis=1, keepdims=True))
        pi /= pi.sum(axis=1, keepdims=True)
        s = np.vectorize(kernels.softplus)(raw[2]) + w.cfg.scale_min
        return MixtureParams(pi, raw[1], s, raw[3])

