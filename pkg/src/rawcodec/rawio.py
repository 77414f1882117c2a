"""Bayer mosaic ingest, RGGB packing, patch tiling and the raw container file.

Raw container layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"RWBY"
    4       4     width  (uint32, even, > 0)
    8       4     height (uint32, even, > 0)
    12      1     pattern (0=RGGB 1=BGGR 2=GRBG 3=GBRG)
    13      1     container bit depth (1..16)
    14      2*W*H samples, uint16, row-major
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RAW_MAGIC = b"RWBY"
_RAW_HEADER = struct.Struct("<4sIIBB")


class RawFormatError(ValueError):
    pass


class DimensionError(RawFormatError):
    pass


class SampleRangeError(RawFormatError):
    pass


class TruncatedFileError(RawFormatError):
    pass


class PatchLayoutError(ValueError):
    pass


class Pattern(enum.IntEnum):
    RGGB = 0
    BGGR = 1
    GRBG = 2
    GBRG = 3


# (row, col) offset inside the 2x2 quad of the r, g1, g2, b sites.
# g1 is the green sharing a row with red, g2 the green sharing a row with blue.
_SITES = {
    Pattern.RGGB: ((0, 0), (0, 1), (1, 0), (1, 1)),
    Pattern.BGGR: ((1, 1), (1, 0), (0, 1), (0, 0)),
    Pattern.GRBG: ((0, 1), (0, 0), (1, 1), (1, 0)),
    Pattern.GBRG: ((1, 0), (1, 1), (0, 0), (0, 1)),
}


def channel_sites(pattern: Pattern) -> tuple[tuple[int, int], ...]:
    return _SITES[Pattern(pattern)]


@dataclass(frozen=True)
class BayerImage:
    samples: np.ndarray  # (height, width) uint16
    pattern: Pattern = Pattern.RGGB
    container_bit_depth: int = 16

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise DimensionError(f"expected a 2-D mosaic, got shape {s.shape}")
        h, w = s.shape
        if h == 0 or w == 0:
            raise DimensionError("empty mosaic")
        if h % 2 or w % 2:
            raise DimensionError(f"mosaic dimensions must be even, got {w}x{h}")
        if not 1 <= self.container_bit_depth <= 16:
            raise SampleRangeError(f"container bit depth {self.container_bit_depth} outside [1, 16]")
        if s.dtype.kind not in "iu":
            raise SampleRangeError(f"samples must be integers, got {s.dtype}")
        if s.size and (s.min() < 0 or int(s.max()) >= 1 << self.container_bit_depth):
            raise SampleRangeError(
                f"sample outside [0, 2^{self.container_bit_depth}) in {self.container_bit_depth}-bit image"
            )
        object.__setattr__(self, "samples", s.astype(np.uint16, copy=False))
        object.__setattr__(self, "pattern", Pattern(self.pattern))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, BayerImage):
            return NotImplemented
        return (
            self.pattern == other.pattern
            and self.container_bit_depth == other.container_bit_depth
            and self.samples.shape == other.samples.shape
            and bool(np.array_equal(self.samples, other.samples))
        )


@dataclass(frozen=True)
class RggbImage:
    planes: np.ndarray  # (4, half_height, half_width) uint16, order r, g1, g2, b
    container_bit_depth: int = 16

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 3 or p.shape[0] != 4:
            raise DimensionError(f"expected (4, H, W) planes, got {p.shape}")
        if p.shape[1] == 0 or p.shape[2] == 0:
            raise DimensionError("empty RGGB image")
        object.__setattr__(self, "planes", p.astype(np.uint16, copy=False))

    @property
    def half_height(self) -> int:
        return self.planes.shape[1]

    @property
    def half_width(self) -> int:
        return self.planes.shape[2]

    def __eq__(self, other):
        if not isinstance(other, RggbImage):
            return NotImplemented
        return self.container_bit_depth == other.container_bit_depth and bool(
            np.array_equal(self.planes, other.planes)
        )


@dataclass(frozen=True)
class RggbPatch:
    planes: np.ndarray  # (4, P, P) uint16, edge-replicated outside the valid area
    origin: tuple[int, int]  # (row, col) in RGGB image coordinates
    valid: tuple[int, int]  # (rows, cols) of real data starting at the top-left corner
    pad_mask: np.ndarray = field(repr=False)  # (P, P) bool, True on replicated pixels

    @property
    def size(self) -> int:
        return self.planes.shape[-1]


def pack_bayer(img: BayerImage) -> RggbImage:
    s = img.samples
    planes = np.stack([s[r::2, c::2] for r, c in channel_sites(img.pattern)])
    return RggbImage(np.ascontiguousarray(planes), img.container_bit_depth)


def unpack_bayer(img: RggbImage, pattern: Pattern) -> BayerImage:
    h, w = img.half_height, img.half_width
    out = np.empty((2 * h, 2 * w), dtype=np.uint16)
    for plane, (r, c) in zip(img.planes, channel_sites(pattern)):
        out[r::2, c::2] = plane
    return BayerImage(out, Pattern(pattern), img.container_bit_depth)


def patch_grid(half_height: int, half_width: int, patch_size: int) -> tuple[int, int]:
    return -(-half_height // patch_size), -(-half_width // patch_size)


def _check_patch_size(patch_size: int) -> None:
    if patch_size < 8 or patch_size % 2:
        raise ValueError(f"patch size must be even and >= 8, got {patch_size}")


def split_patches(img: RggbImage, patch_size: int = 64) -> list[RggbPatch]:
    """Tile in raster order; partial boundary tiles are edge-replicated to full size."""
    _check_patch_size(patch_size)
    P = patch_size
    rows, cols = patch_grid(img.half_height, img.half_width, P)
    out = []
    for i in range(rows):
        for j in range(cols):
            r0, c0 = i * P, j * P
            block = img.planes[:, r0 : r0 + P, c0 : c0 + P]
            vh, vw = block.shape[1:]
            if (vh, vw) != (P, P):
                block = np.pad(block, ((0, 0), (0, P - vh), (0, P - vw)), mode="edge")
            mask = np.ones((P, P), dtype=bool)
            mask[:vh, :vw] = False
            out.append(RggbPatch(np.ascontiguousarray(block), (r0, c0), (vh, vw), mask))
    return out


def merge_patches(
    patches, half_height: int, half_width: int, container_bit_depth: int = 16
) -> RggbImage:
    """Place patches by origin; every pixel must be covered exactly once."""
    planes = np.zeros((4, half_height, half_width), dtype=np.uint16)
    cover = np.zeros((half_height, half_width), dtype=np.int32)
    for p in patches:
        r0, c0 = p.origin
        vh, vw = p.valid
        if r0 < 0 or c0 < 0 or r0 + vh > half_height or c0 + vw > half_width:
            raise PatchLayoutError(f"patch at {p.origin} with extent {p.valid} leaves the image")
        planes[:, r0 : r0 + vh, c0 : c0 + vw] = p.planes[:, :vh, :vw]
        cover[r0 : r0 + vh, c0 : c0 + vw] += 1
    if (cover > 1).any():
        raise PatchLayoutError("overlapping patches")
    if (cover == 0).any():
        raise PatchLayoutError("image not fully covered by patches")
    return RggbImage(planes, container_bit_depth)


def encode_raw_container(img: BayerImage) -> bytes:
    head = _RAW_HEADER.pack(RAW_MAGIC, img.width, img.height, int(img.pattern), img.container_bit_depth)
    return head + img.samples.astype("<u2").tobytes()


def decode_raw_container(data: bytes) -> BayerImage:
    if len(data) < _RAW_HEADER.size:
        raise TruncatedFileError(f"raw header needs {_RAW_HEADER.size} bytes, got {len(data)}")
    magic, w, h, pattern, depth = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise RawFormatError(f"bad magic {magic!r}")
    if pattern not in Pattern._value2member_map_:
        raise RawFormatError(f"unknown Bayer pattern code {pattern}")
    need = _RAW_HEADER.size + 2 * w * h
    if len(data) < need:
        raise TruncatedFileError(f"raw file truncated: {len(data)} of {need} bytes")
    if len(data) > need:
        raise RawFormatError(f"{len(data) - need} trailing bytes after samples")
    samples = np.frombuffer(data, dtype="<u2", count=w * h, offset=_RAW_HEADER.size)
    return BayerImage(samples.reshape(h, w).astype(np.uint16), Pattern(pattern), depth)


def write_raw_container(img: BayerImage, path) -> None:
    Path(path).write_bytes(encode_raw_container(img))


def read_raw_container(path) -> BayerImage:
    return decode_raw_container(Path(path).read_bytes())
