"""Do the learned channel couplings pick up inter-channel correlation?

Trains on the correlated corpus (G1 = R + small noise, other channels
independent) and on an uncorrelated control (independent uniform channels),
then averages the mixture-weighted couplings the entropy head predicts on
held-out patches. Slot 0 is G1's coupling to R.

    python scripts/beta_probe.py [--epochs 20]
"""

from __future__ import annotations

import argparse

import numpy as np
from desk import add_arguments, train_model

from rawcodec.bitdepth import BitDepthMap
from rawcodec.rawio import pack_bayer, split_patches

SLOTS = ["G1<-R", "G2<-G1", "B<-R", "B<-(G1+G2)/2"]


def coupling_stats(codec, images, patch_size=32, max_patches=8):
    pc = codec.patch_codec
    per_slot = [[] for _ in SLOTS]
    for img in images:
        patches = split_patches(pack_bayer(img), patch_size)[:max_patches]
        depths = BitDepthMap.from_patches(patches).depths
        for p, d in zip(patches, depths):
            y_hat, _ = pc.analyse(p.planes, d)
            vh, vw = p.valid
            params = pc.pixel_params(p.planes[:, :vh, :vw], y_hat, d)
            # the channel whose mean a slot shifts: G1, G2, B, B
            owners = [1, 2, 3, 3]
            for slot, c in enumerate(owners):
                weighted = (params.pi[c] * params.beta[slot]).sum(axis=0)
                per_slot[slot].append(weighted.ravel())
    return [np.concatenate(v) for v in per_slot]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_arguments(p, epochs=20)
    args = p.parse_args()
    rows = []
    for kind in ("correlated", "uniform"):
        codec, _, test, cpu = train_model(kind, args)
        for slot, v in zip(SLOTS, coupling_stats(codec, test)):
            rows.append((kind, slot, v.mean(), v.std(), cpu))
    print(f"{'corpus':11s} {'slot':13s} {'mean beta':>10s} {'std':>8s}")
    for kind, slot, m, s, _ in rows:
        print(f"{kind:11s} {slot:13s} {m:10.4f} {s:8.4f}")


if __name__ == "__main__":
    main()
