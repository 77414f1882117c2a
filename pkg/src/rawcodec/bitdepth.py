"""Bit depths of samples and patches, the depth embedding, and side-info packing.

Side-info byte layout: one flag byte, then the depth values.

    flag bit 0   per-channel mode (4 values per patch, order r, g1, g2, b)
    flag bit 1   wide mode: one byte per value instead of one nibble

Nibble mode packs two values per byte, first value in the high nibble; an odd
count leaves the final low nibble zero. Wide mode is used whenever any value
exceeds 15. The value count is not stored: the reader knows the patch count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

MAX_DEPTH = 16
FLAG_PER_CHANNEL = 0x01
FLAG_WIDE = 0x02


class BitDepthError(ValueError):
    pass


def pixel_bit_depth(v: int) -> int:
    """ceil(log2(v + 1)), i.e. the bit length of v."""
    if v < 0:
        raise BitDepthError(f"negative sample {v}")
    return int(v).bit_length()


def bit_depth_array(values) -> np.ndarray:
    v = np.asarray(values).astype(np.int64)
    out = np.zeros(v.shape, dtype=np.int64)
    nz = v > 0
    # frexp is exact for integers below 2^53: v = m * 2^e with m in [0.5, 1)
    out[nz] = np.frexp(v[nz].astype(np.float64))[1]
    return out


def patch_bit_depth(planes: np.ndarray, pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Per-channel depth of the channel maximum over non-padded pixels."""
    planes = np.asarray(planes)
    if pad_mask is not None and pad_mask.any() and not pad_mask.all():
        vals = planes[:, ~pad_mask]
    else:
        vals = planes.reshape(planes.shape[0], -1)
    return np.array([pixel_bit_depth(int(c.max())) for c in vals], dtype=np.int64)


@dataclass(frozen=True)
class BitDepthMap:
    depths: np.ndarray  # (n_patches, 4) int
    per_channel: bool = False

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.int64).reshape(-1, 4)
        if d.size and (d.min() < 0 or d.max() > MAX_DEPTH):
            raise BitDepthError(f"bit depth outside [0, {MAX_DEPTH}]")
        if not self.per_channel and d.size and (d != d[:, :1]).any():
            raise BitDepthError("shared-depth map has unequal channel depths")
        object.__setattr__(self, "depths", d)

    @classmethod
    def from_patches(cls, patches, per_channel: bool = False) -> BitDepthMap:
        rows = [patch_bit_depth(p.planes, p.pad_mask) for p in patches]
        d = np.array(rows, dtype=np.int64).reshape(-1, 4)
        if not per_channel:
            d = np.repeat(d.max(axis=1, keepdims=True), 4, axis=1)
        return cls(d, per_channel)

    @classmethod
    def shared(cls, per_patch) -> BitDepthMap:
        d = np.asarray(per_patch, dtype=np.int64).reshape(-1, 1)
        return cls(np.repeat(d, 4, axis=1), False)

    @property
    def per_patch(self) -> np.ndarray:
        return self.depths.max(axis=1)

    def __len__(self):
        return self.depths.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BitDepthMap):
            return NotImplemented
        return self.per_channel == other.per_channel and bool(np.array_equal(self.depths, other.depths))

    def forced(self, depth: int) -> BitDepthMap:
        return BitDepthMap(np.full_like(self.depths, depth), self.per_channel)


def _stored_values(m: BitDepthMap) -> np.ndarray:
    return m.depths.reshape(-1) if m.per_channel else m.depths[:, 0]


def serialized_size(n_values: int, wide: bool) -> int:
    return 1 + (n_values if wide else (n_values + 1) // 2)


def serialize_bit_depths(m: BitDepthMap) -> bytes:
    vals = _stored_values(m)
    wide = bool(vals.size) and int(vals.max()) > 15
    flag = (FLAG_PER_CHANNEL if m.per_channel else 0) | (FLAG_WIDE if wide else 0)
    if wide:
        payload = vals.astype(np.uint8).tobytes()
    else:
        v = vals.astype(np.uint8)
        if v.size % 2:
            v = np.append(v, np.uint8(0))
        payload = ((v[0::2] << 4) | v[1::2]).astype(np.uint8).tobytes()
    return bytes([flag]) + payload


def deserialize_bit_depths(data: bytes, n_patches: int) -> tuple[BitDepthMap, int]:
    """Returns the map and the number of bytes consumed."""
    if not data:
        raise BitDepthError("missing side-info flag byte")
    flag = data[0]
    if flag & ~(FLAG_PER_CHANNEL | FLAG_WIDE):
        raise BitDepthError(f"unknown side-info flag bits {flag:#04x}")
    per_channel = bool(flag & FLAG_PER_CHANNEL)
    wide = bool(flag & FLAG_WIDE)
    n_values = n_patches * (4 if per_channel else 1)
    size = serialized_size(n_values, wide)
    if len(data) < size:
        raise BitDepthError(f"side info truncated: need {size} bytes, have {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8, count=size - 1, offset=1)
    if wide:
        vals = raw.astype(np.int64)
    else:
        vals = np.empty(2 * raw.size, dtype=np.int64)
        vals[0::2] = raw >> 4
        vals[1::2] = raw & 0x0F
        vals = vals[:n_values]
    if per_channel:
        depths = vals.reshape(n_patches, 4)
    else:
        depths = np.repeat(vals.reshape(n_patches, 1), 4, axis=1)
    return BitDepthMap(depths, per_channel), size


class BitDepthEmbedding(nn.Module):
    """One learnable vector per bit depth 0..16."""

    def __init__(self, dim: int = 16):
        super().__init__()
        self.table = nn.Embedding(MAX_DEPTH + 1, dim)
        with torch.no_grad():
            self.table.weight.normal_(0.0, 1.0 / math.sqrt(dim))

    @property
    def dim(self) -> int:
        return self.table.embedding_dim

    def forward(self, depths: torch.Tensor) -> torch.Tensor:
        """depths (..., 4) int -> (..., dim), the mean over the four channel embeddings."""
        if depths.numel() and (int(depths.min()) < 0 or int(depths.max()) > MAX_DEPTH):
            raise BitDepthError(f"bit depth outside [0, {MAX_DEPTH}]")
        return self.table(depths.long()).mean(dim=-2)


def embed_bit_depth(embedding: BitDepthEmbedding, b: int) -> torch.Tensor:
    if not 0 <= b <= MAX_DEPTH:
        raise BitDepthError(f"bit depth {b} outside [0, {MAX_DEPTH}]")
    return embedding.table(torch.tensor(b))
