"""Compressed container: header, per-patch index and patch payloads.

The byte layout is documented in docs/format.md. Every multi-byte integer is
little-endian.
"""

from __future__ import annotations

import enum
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .bitdepth import BitDepthMap, deserialize_bit_depths, serialize_bit_depths
from .coder.patch import PatchCodec, PatchCost, PatchStreams
from .coder.rangecoder import StreamError
from .rawio import (
    BayerImage,
    Pattern,
    RggbPatch,
    merge_patches,
    pack_bayer,
    patch_grid,
    split_patches,
    unpack_bayer,
)

MAGIC = b"RWIC"
VERSION = 1
# magic, version, mode, width, height, pattern, container depth, patch size, conditioning depth, weights hash
_FIXED = struct.Struct("<4sBBIIBBHB32s")
_U32 = struct.Struct("<I")
_ENTRY = struct.Struct("<III")  # offset, length, crc32


class Mode(enum.IntEnum):
    ADAPTIVE = 0  # condition and support = each patch's depth
    FIXED = 1  # condition and support = one depth for the whole image, no side info
    MASKED = 2  # condition on one depth, support restricted to each patch's depth


class ContainerError(ValueError):
    """Malformed container (bad magic, version, lengths or checksums)."""


class HashMismatchError(ContainerError):
    pass


class PatchCorruptError(ContainerError):
    def __init__(self, index: int, message: str):
        super().__init__(f"patch {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Header:
    width: int
    height: int
    pattern: Pattern
    container_bit_depth: int
    patch_size: int
    mode: Mode
    cond_depth: int
    weights_hash: bytes
    depth_map: BitDepthMap | None  # None in fixed mode
    index: tuple[tuple[int, int, int], ...]  # (offset, length, crc32) per patch
    header_size: int

    @property
    def grid(self) -> tuple[int, int]:
        return patch_grid(self.height // 2, self.width // 2, self.patch_size)

    @property
    def n_patches(self) -> int:
        r, c = self.grid
        return r * c

    def depths_of(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(conditioning, support) depths of patch i."""
        if self.mode == Mode.FIXED:
            d = np.full(4, self.cond_depth, dtype=np.int64)
            return d, d
        support = self.depth_map.depths[i]
        if self.mode == Mode.MASKED:
            return np.full(4, self.cond_depth, dtype=np.int64), support
        return support, support


@dataclass(frozen=True)
class SizeReport:
    """Byte accounting of one container."""

    header_bytes: int  # fixed header, index, checksums and sub-stream length prefixes
    side_info_bytes: int  # bit-depth map
    hyper_bytes: int
    latent_bytes: int
    pixel_bytes: int
    bayer_pixels: int
    ideal: PatchCost

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + self.side_info_bytes + self.hyper_bytes + self.latent_bytes + self.pixel_bytes

    def bpp(self, part: str = "total") -> float:
        return 8 * getattr(self, f"{part}_bytes") / self.bayer_pixels


def _encode_header(h: Header, side: bytes) -> bytes:
    out = bytearray(
        _FIXED.pack(
            MAGIC, VERSION, int(h.mode), h.width, h.height, int(h.pattern), h.container_bit_depth,
            h.patch_size, h.cond_depth, h.weights_hash,
        )
    )
    out += _U32.pack(len(side)) + side
    out += _U32.pack(len(h.index))
    for entry in h.index:
        out += _ENTRY.pack(*entry)
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


def header_size(n_patches: int, side_len: int) -> int:
    return _FIXED.size + 4 + side_len + 4 + _ENTRY.size * n_patches + 4


def read_header(data: bytes) -> Header:
    if len(data) < _FIXED.size + 4:
        raise ContainerError("container shorter than its fixed header")
    magic, version, mode, width, height, pattern, depth, psize, cond, whash = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        mode = Mode(mode)
        pattern = Pattern(pattern)
    except ValueError as exc:
        raise ContainerError(str(exc)) from None
    if width == 0 or height == 0 or width % 2 or height % 2:
        raise ContainerError(f"invalid dimensions {width}x{height}")
    if not 1 <= depth <= 16 or cond > 16 or psize < 8 or psize % 8:
        raise ContainerError("invalid depth or patch size field")
    pos = _FIXED.size
    (side_len,) = _U32.unpack_from(data, pos)
    pos += 4
    rows, cols = patch_grid(height // 2, width // 2, psize)
    n = rows * cols
    if pos + side_len + 4 > len(data):
        raise ContainerError("side info runs past the end of the container")
    side = data[pos : pos + side_len]
    pos += side_len
    (n_index,) = _U32.unpack_from(data, pos)
    pos += 4
    if n_index != n:
        raise ContainerError(f"index lists {n_index} patches, geometry implies {n}")
    end = pos + _ENTRY.size * n
    if end + 4 > len(data):
        raise ContainerError("patch index runs past the end of the container")
    (crc,) = _U32.unpack_from(data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ContainerError("header checksum mismatch")
    index = tuple(_ENTRY.unpack_from(data, pos + _ENTRY.size * i) for i in range(n))
    if mode == Mode.FIXED:
        if side_len:
            raise ContainerError("fixed-depth container carries side info")
        depth_map = None
    else:
        try:
            depth_map, used = deserialize_bit_depths(bytes(side), n)
        except ValueError as exc:
            raise ContainerError(f"side info: {exc}") from None
        if used != side_len:
            raise ContainerError("side info length does not match its contents")
        if mode == Mode.MASKED and (depth_map.depths > cond).any():
            raise ContainerError("patch depth exceeds the conditioning depth")
    return Header(width, height, pattern, depth, psize, mode, cond, whash, depth_map, index, end + 4)


class Codec:
    """Image-level compressor bound to one set of weights."""

    def __init__(self, patch_codec: PatchCodec, weights_hash: bytes):
        if len(weights_hash) != 32:
            raise ValueError("weights hash must be 32 bytes")
        self.patch_codec = patch_codec
        self.weights_hash = bytes(weights_hash)

    @classmethod
    def from_weights_file(cls, path, decode_only: bool = False) -> Codec:
        from .network.kernels import DecoderWeights
        from .network.weights import load_weights

        model, digest = load_weights(path)
        return cls(PatchCodec(DecoderWeights.from_model(model), None if decode_only else model), digest)

    @classmethod
    def from_model(cls, model) -> Codec:
        from .network.weights import serialize_weights, weights_hash

        return cls(PatchCodec.from_model(model), weights_hash(serialize_weights(model)))

    # --- compress -----------------------------------------------------------

    def compress(
        self,
        img: BayerImage,
        patch_size: int = 64,
        mode: Mode = Mode.ADAPTIVE,
        cond_depth: int | None = None,
        per_channel: bool = False,
        jobs: int = 1,
    ) -> tuple[bytes, SizeReport]:
        mode = Mode(mode)
        self.patch_codec.latent_shape(patch_size)
        patches = split_patches(pack_bayer(img), patch_size)
        dmap = BitDepthMap.from_patches(patches, per_channel)
        if mode == Mode.ADAPTIVE:
            cond = 0
        else:
            cond = img.container_bit_depth if cond_depth is None else int(cond_depth)
            if not 0 <= cond <= 16:
                raise ValueError(f"conditioning depth {cond} outside [0, 16]")
            if len(dmap) and dmap.depths.max() > cond:
                raise ValueError(f"content needs {dmap.depths.max()} bits, conditioning depth is {cond}")
        side = b"" if mode == Mode.FIXED else serialize_bit_depths(dmap)
        proto = Header(
            img.width, img.height, img.pattern, img.container_bit_depth, patch_size, mode, cond,
            self.weights_hash, None if mode == Mode.FIXED else dmap, (), 0,
        )

        def work(i: int):
            c, s = proto.depths_of(i)
            p = patches[i]
            return self.patch_codec.encode(p.planes, p.valid, c, s)

        results = _map(work, range(len(patches)), jobs)
        payload = bytearray()
        index = []
        for streams, _ in results:
            framed = streams.frame()
            index.append((len(payload), len(framed), zlib.crc32(framed)))
            payload += framed
        head = _encode_header(replace(proto, index=tuple(index)), side)
        hyper = sum(len(s.z) for s, _ in results)
        lat = sum(len(s.y) for s, _ in results)
        pix = sum(len(s.pixels) for s, _ in results)
        ideal = PatchCost(*(sum(getattr(c, f) for _, c in results) for f in ("hyper_bits", "latent_bits", "pixel_bits")))
        report = SizeReport(
            header_bytes=len(head) - len(side) + 12 * len(results),
            side_info_bytes=len(side),
            hyper_bytes=hyper,
            latent_bytes=lat,
            pixel_bytes=pix,
            bayer_pixels=img.width * img.height,
            ideal=ideal,
        )
        data = head + bytes(payload)
        assert len(data) == report.total_bytes
        return data, report

    # --- decompress ---------------------------------------------------------

    def _check_hash(self, h: Header) -> None:
        if h.weights_hash != self.weights_hash:
            raise HashMismatchError(
                f"container was written with weights {h.weights_hash.hex()[:16]}..., "
                f"loaded weights are {self.weights_hash.hex()[:16]}..."
            )

    def _patch(self, data: bytes, h: Header, i: int) -> RggbPatch:
        off, length, crc = h.index[i]
        start = h.header_size + off
        if start + length > len(data):
            raise PatchCorruptError(i, "payload runs past the end of the container")
        blob = data[start : start + length]
        if zlib.crc32(blob) != crc:
            raise PatchCorruptError(i, "checksum mismatch")
        P = h.patch_size
        hh, hw = h.height // 2, h.width // 2
        cols = h.grid[1]
        r0, c0 = (i // cols) * P, (i % cols) * P
        valid = (min(P, hh - r0), min(P, hw - c0))
        cond, support = h.depths_of(i)
        try:
            px = self.patch_codec.decode(PatchStreams.parse(blob), P, valid, cond, support)
        except StreamError as exc:
            raise PatchCorruptError(i, str(exc)) from None
        planes = np.pad(px.astype(np.uint16), ((0, 0), (0, P - valid[0]), (0, P - valid[1])), mode="edge")
        mask = np.ones((P, P), dtype=bool)
        mask[: valid[0], : valid[1]] = False
        return RggbPatch(planes, (r0, c0), valid, mask)

    def decode_patch(self, data: bytes, i: int) -> RggbPatch:
        """Decode one patch without touching the others."""
        h = read_header(data)
        self._check_hash(h)
        if not 0 <= i < h.n_patches:
            raise IndexError(f"patch {i} out of range [0, {h.n_patches})")
        return self._patch(data, h, i)

    def decompress(self, data: bytes, jobs: int = 1) -> BayerImage:
        h = read_header(data)
        self._check_hash(h)
        last = max((o + n for o, n, _ in h.index), default=0)
        if h.header_size + last != len(data):
            raise ContainerError("payload length does not match the patch index")
        patches = _map(lambda i: self._patch(data, h, i), range(h.n_patches), jobs)
        rggb = merge_patches(patches, h.height // 2, h.width // 2, h.container_bit_depth)
        if int(rggb.planes.max()) >= 1 << h.container_bit_depth:
            raise ContainerError("decoded sample exceeds the container bit depth")
        return unpack_bayer(rggb, h.pattern)


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))

