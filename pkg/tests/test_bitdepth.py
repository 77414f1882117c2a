import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rawcodec.bitdepth import (
    BitDepthEmbedding,
    BitDepthError,
    BitDepthMap,
    bit_depth_array,
    deserialize_bit_depths,
    embed_bit_depth,
    patch_bit_depth,
    pixel_bit_depth,
    serialize_bit_depths,
    serialized_size,
)
from rawcodec.rawio import RggbImage, split_patches


@pytest.mark.parametrize("v,b", [(0, 0), (1, 1), (255, 8), (256, 9), (2**14 - 1, 14), (65535, 16)])
def test_pixel_bit_depth_examples(v, b):
    assert pixel_bit_depth(v) == b


def test_pixel_bit_depth_exhaustive():
    v = np.arange(1 << 16)
    naive = np.ceil(np.log2(v + 1.0)).astype(np.int64)
    assert (bit_depth_array(v) == naive).all()
    loop = np.array([next(b for b in range(17) if x < (1 << b)) for x in range(0, 1 << 16, 97)])
    assert (bit_depth_array(np.arange(0, 1 << 16, 97)) == loop).all()
    assert [pixel_bit_depth(int(x)) for x in range(0, 1 << 16, 331)] == naive[::331].tolist()


def test_negative_sample():
    with pytest.raises(BitDepthError):
        pixel_bit_depth(-1)


def test_patch_bit_depth_examples():
    planes = np.zeros((4, 2, 2), dtype=np.int64)
    planes[1].flat[:3] = [0, 3, 7]
    planes[2, 0, 0] = 4095
    assert patch_bit_depth(planes).tolist() == [0, 3, 12, 0]


def test_patch_bit_depth_ignores_padding():
    img = RggbImage(np.full((4, 10, 10), 3, dtype=np.uint16), 16)
    p = split_patches(img, 16)[0]
    p.planes[:, 12, 12] = 60000  # only affects a padded pixel
    assert patch_bit_depth(p.planes, p.pad_mask).tolist() == [2, 2, 2, 2]


@given(st.integers(0, 16), st.integers(0, 2**31))
def test_tightness(b, seed):
    r = np.random.default_rng(seed)
    planes = r.integers(0, 1 << b, (4, 8, 8))
    d = patch_bit_depth(planes)
    assert (planes.reshape(4, -1).max(axis=1) < (1 << d)).all()
    for c in range(4):
        assert d[c] == 0 or planes[c].max() >= 1 << (d[c] - 1)


def test_serialize_example():
    m = BitDepthMap.shared([12, 12, 14, 10])
    data = serialize_bit_depths(m)
    assert data == bytes([0x00, 0xCC, 0xEA])
    assert len(data) == 1 + 2


def test_serialize_empty():
    m = BitDepthMap(np.zeros((0, 4), dtype=np.int64))
    assert serialize_bit_depths(m) == b"\x00"
    assert deserialize_bit_depths(b"\x00", 0) == (m, 1)


def test_wide_fallback():
    m = BitDepthMap.shared([16, 3, 0])
    data = serialize_bit_depths(m)
    assert data == bytes([0x02, 16, 3, 0])
    assert deserialize_bit_depths(data, 3)[0] == m


@given(
    n=st.integers(0, 40), per_channel=st.booleans(), top=st.sampled_from([15, 16]),
    seed=st.integers(0, 10**6),
)
def test_serialize_roundtrip(n, per_channel, top, seed):
    r = np.random.default_rng(seed)
    if per_channel:
        m = BitDepthMap(r.integers(0, top + 1, (n, 4)), True)
    else:
        m = BitDepthMap.shared(r.integers(0, top + 1, n))
    data = serialize_bit_depths(m)
    values = n * (4 if per_channel else 1)
    wide = bool(values) and int(m.depths.max()) > 15
    assert len(data) == serialized_size(values, wide)
    back, used = deserialize_bit_depths(data + b"junk", n)
    assert back == m and used == len(data)


def test_deserialize_errors():
    with pytest.raises(BitDepthError):
        deserialize_bit_depths(b"", 1)
    with pytest.raises(BitDepthError):
        deserialize_bit_depths(b"\x00", 3)
    with pytest.raises(BitDepthError):
        deserialize_bit_depths(b"\x80\x00", 1)


def test_from_patches_shared_and_per_channel():
    planes = np.zeros((4, 16, 16), dtype=np.uint16)
    planes[0, :8, :8] = 5
    planes[3, 8:, 8:] = 300
    ps = split_patches(RggbImage(planes, 16), 8)
    shared = BitDepthMap.from_patches(ps)
    per = BitDepthMap.from_patches(ps, per_channel=True)
    assert shared.per_patch.tolist() == [3, 0, 0, 9]
    assert per.depths[0].tolist() == [3, 0, 0, 0]
    assert per.depths[3].tolist() == [0, 0, 0, 9]


def test_embedding_rows_and_range():
    emb = BitDepthEmbedding(16)
    assert emb.table.weight.shape == (17, 16)
    assert torch.equal(embed_bit_depth(emb, 0), embed_bit_depth(emb, 0))
    with pytest.raises(BitDepthError):
        embed_bit_depth(emb, 17)
    with pytest.raises(BitDepthError):
        emb(torch.tensor([[0, 1, 2, 17]]))
    # initialization scale 1/sqrt(E)
    big = BitDepthEmbedding(4096)
    assert abs(big.table.weight.std().item() - 1 / math.sqrt(4096)) < 2e-3


def test_embedding_gradient_fd():
    torch.manual_seed(0)
    emb = BitDepthEmbedding(6).double()
    w = torch.randn(6, dtype=torch.float64)
    b = 9

    def loss():
        return torch.tanh(embed_bit_depth(emb, b) @ w)

    emb.zero_grad()
    loss().backward()
    grad = emb.table.weight.grad[b].clone()
    eps = 1e-3
    fd = torch.empty(6, dtype=torch.float64)
    with torch.no_grad():
        for i in range(6):
            emb.table.weight[b, i] += eps
            up = loss().item()
            emb.table.weight[b, i] -= 2 * eps
            dn = loss().item()
            emb.table.weight[b, i] += eps
            fd[i] = (up - dn) / (2 * eps)
    assert torch.allclose(grad, fd, rtol=1e-4, atol=1e-8)
    assert emb.table.weight.grad[b + 1].abs().sum() == 0
