"""Fixed versus adaptive bit depth on the mixed 8/14-bit corpus.

Trains one model, then measures real container sizes with each patch coded at
its own depth (adaptive), at the corpus maximum (fixed), and conditioned on the
maximum with the support cut to the patch depth (masked).

    python scripts/ablation.py [--epochs 60] [--csv out.csv]
"""

from __future__ import annotations

import argparse

from desk import add_arguments, train_model

from rawcodec.container import Mode
from rawcodec.trainer import evaluate_bpp


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_arguments(p)
    p.add_argument("--csv", help="write the per-image rate tables here")
    args = p.parse_args()

    codec, _, test, cpu = train_model("mixed", args)
    reports = {m: evaluate_bpp(test, codec, m) for m in (Mode.ADAPTIVE, Mode.FIXED, Mode.MASKED)}
    for rep in reports.values():
        print(rep.to_text())
    base = reports[Mode.ADAPTIVE].bpp
    print(f"training: {cpu / 60:.1f} CPU min")
    print(f"{'mode':10s} {'bpp':>8s} {'vs adaptive':>12s}")
    for m, rep in reports.items():
        print(f"{m.name.lower():10s} {rep.bpp:8.3f} {100 * (rep.bpp / base - 1):+11.1f}%")
    if args.csv:
        with open(args.csv, "w") as f:
            for i, rep in enumerate(reports.values()):
                text = rep.to_csv()
                f.write(text if i == 0 else text.split("\n", 1)[1])


if __name__ == "__main__":
    main()
