"""Regenerate the golden files under tests/golden.

Run only when a format version changes; the golden tests exist to catch
accidental changes to any byte layout.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from rawcodec.coder.rangecoder import RangeEncoder
from rawcodec.config import ModelConfig
from rawcodec.container import Codec, Mode
from rawcodec.network.model import RawCompressionModel
from rawcodec.network.weights import save_weights
from rawcodec.rawio import BayerImage, Pattern, write_raw_container

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"

GOLDEN_MODEL = ModelConfig(
    embed_dim=4, latent_channels=8, hyper_channels=4, analysis_channels=8, synthesis_channels=8,
    prior_channels=4, context_channels=8, head_channels=8, mixtures=2, latent_bound=16,
)


def golden_image() -> BayerImage:
    r = np.random.default_rng(2024)
    s = r.integers(0, 1 << 10, (24, 40))
    s[:16, :16] &= 0x0F  # one 4-bit patch
    s[16:, 16:32] = 0  # one empty patch
    return BayerImage(s.astype(np.uint16), Pattern.GRBG, 12)


def coder_symbols():
    cdf = np.array([0, 30000, 50000, 60000, 65000, 65535, 65536])
    symbols = np.array([0, 1, 0, 2, 3, 4, 5, 0, 0, 1, 5, 5, 2])
    return cdf, symbols


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(0)
    model = RawCompressionModel(GOLDEN_MODEL).eval()
    save_weights(model, OUT / "tiny.rwwt")
    codec = Codec.from_weights_file(OUT / "tiny.rwwt")
    img = golden_image()
    write_raw_container(img, OUT / "sample.rwb")
    for mode in Mode:
        data, _ = codec.compress(img, patch_size=8, mode=mode)
        (OUT / f"sample_{mode.name.lower()}.rwic").write_bytes(data)
    cdf, symbols = coder_symbols()
    enc = RangeEncoder()
    for s in symbols:
        enc.encode_symbol(int(s), cdf)
    (OUT / "coder.bin").write_bytes(enc.finish())
    manifest = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(OUT.glob("*")) if p.suffix != ".json"}
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for name, digest in manifest.items():
        print(f"{name:24s} {(OUT / name).stat().st_size:7d}  {digest[:16]}")


if __name__ == "__main__":
    main()
