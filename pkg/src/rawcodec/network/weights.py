"""Weight file: architecture descriptor, float32 tensors and a content hash.

Layout (little-endian)::

    magic b"RWWT" | version u16 | descriptor length u32 | descriptor (UTF-8 JSON)
    | float32 tensors in descriptor order | SHA-256 of all preceding bytes

The descriptor holds the model config and ``[name, shape]`` per tensor. The
trailing digest is the weights hash recorded in compressed containers.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from ..config import ModelConfig
from .model import RawCompressionModel

WEIGHTS_MAGIC = b"RWWT"
WEIGHTS_VERSION = 1
_HEAD = struct.Struct("<4sHI")


class WeightsFormatError(ValueError):
    pass


def serialize_weights(model: RawCompressionModel) -> bytes:
    state = {k: v.detach().cpu().float().contiguous() for k, v in model.state_dict().items() if k != "context.masked.mask"}
    desc = {"model": asdict(model.cfg), "tensors": [[k, list(v.shape)] for k, v in state.items()]}
    blob = json.dumps(desc, sort_keys=True).encode()
    body = bytearray(_HEAD.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(blob)) + blob)
    for v in state.values():
        body += v.numpy().astype("<f4").tobytes()
    return bytes(body) + hashlib.sha256(body).digest()


def weights_hash(data: bytes) -> bytes:
    return data[-32:]


def deserialize_weights(data: bytes) -> tuple[RawCompressionModel, bytes]:
    if len(data) < _HEAD.size + 32:
        raise WeightsFormatError("weights file truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsFormatError("weights content hash mismatch")
    magic, version, n = _HEAD.unpack_from(body)
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad weights magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    desc = json.loads(body[_HEAD.size : _HEAD.size + n])
    model = RawCompressionModel(ModelConfig(**desc["model"]))
    state = model.state_dict()
    off = _HEAD.size + n
    for name, shape in desc["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(body):
        raise WeightsFormatError("weights payload length does not match descriptor")
    model.load_state_dict(state)
    model.eval()
    return model, digest


def save_weights(model: RawCompressionModel, path) -> bytes:
    data = serialize_weights(model)
    Path(path).write_bytes(data)
    return weights_hash(data)


def load_weights(path) -> tuple[RawCompressionModel, bytes]:
    return deserialize_weights(Path(path).read_bytes())
