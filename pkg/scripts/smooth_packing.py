"""Trained rate on the smooth-gradient corpus against naive bit packing.

Reports the adaptive bpp next to the mean patch depth (the cost of storing each
patch at its own depth without entropy coding), the container depth, and a
lower bound from the generator's noise entropy.

    python scripts/smooth_packing.py [--epochs 60]
"""

from __future__ import annotations

import argparse

from desk import add_arguments, train_model

from rawcodec.container import Mode
from rawcodec.synthetic import CorpusSpec, smooth_entropy_estimate
from rawcodec.trainer import evaluate_bpp


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_arguments(p)
    args = p.parse_args()

    codec, _, test, cpu = train_model("smooth", args)
    rep = evaluate_bpp(test, codec, Mode.ADAPTIVE)
    print(rep.to_text())
    c = rep.corpus
    floor = smooth_entropy_estimate(CorpusSpec("smooth"))
    print(f"training:             {cpu / 60:.1f} CPU min")
    print(f"adaptive bpp:         {c.bpp:.3f}")
    print(f"mean patch depth:     {c.mean_depth:.2f}  (ratio {c.bpp / c.mean_depth:.3f}, target <= 0.70)")
    print(f"container depth:      {test[0].container_bit_depth}")
    print(f"noise entropy bound:  {floor:.3f} bpp")


if __name__ == "__main__":
    main()
