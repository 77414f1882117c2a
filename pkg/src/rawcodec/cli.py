"""Command line: compress, decompress, train, bench, inspect, init.

Exit codes (stable):

    0  success
    1  internal error
    2  usage error
    3  input could not be parsed (raw file, container or config)
    4  weights hash does not match the container
    5  --verify found a mismatch after decoding
    6  corrupt or truncated patch payload
    7  weights file missing or malformed
    8  training diverged
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from pathlib import Path

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_HASH = 4
EXIT_VERIFY = 5
EXIT_CORRUPT = 6
EXIT_WEIGHTS = 7
EXIT_DIVERGED = 8

WEIGHTS_ENV = "RAWCODEC_WEIGHTS"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _weights_path(args) -> str:
    path = args.weights or os.environ.get(WEIGHTS_ENV)
    if not path:
        raise CliError(EXIT_USAGE, f"no weights given: pass --weights or set {WEIGHTS_ENV}")
    return path


def _codec(args, decode_only: bool = False):
    from .container import Codec
    from .network.weights import WeightsFormatError

    path = _weights_path(args)
    try:
        return Codec.from_weights_file(path, decode_only=decode_only)
    except (OSError, WeightsFormatError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_WEIGHTS, f"cannot load weights {path}: {exc}") from None


def _read_raw(path):
    from .rawio import RawFormatError, read_raw_container

    try:
        return read_raw_container(path)
    except (OSError, RawFormatError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read raw image {path}: {exc}") from None


def _emit(rows: list[tuple[str, object]], machine: bool) -> None:
    if machine:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([k for k, _ in rows])
        w.writerow([v for _, v in rows])
    else:
        width = max(len(k) for k, _ in rows)
        for k, v in rows:
            print(f"{k.ljust(width)}  {v}")


def _decode(codec, data: bytes, jobs: int):
    from .container import ContainerError, HashMismatchError, PatchCorruptError

    try:
        return codec.decompress(data, jobs=jobs)
    except HashMismatchError as exc:
        raise CliError(EXIT_HASH, str(exc)) from None
    except PatchCorruptError as exc:
        raise CliError(EXIT_CORRUPT, str(exc)) from None
    except ContainerError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from None


def cmd_compress(args) -> int:
    from .container import Mode

    img = _read_raw(args.input)
    codec = _codec(args)
    if args.fixed_depth is None:
        mode, cond = Mode.ADAPTIVE, None
    else:
        mode = Mode.FIXED
        cond = img.container_bit_depth if args.fixed_depth < 0 else args.fixed_depth
    try:
        data, rep = codec.compress(img, args.patch_size, mode, cond, per_channel=args.per_channel, jobs=args.jobs)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    if args.verify:
        out = _decode(codec, data, args.jobs)
        if out != img:
            raise CliError(EXIT_VERIFY, "verification failed: decoded image differs from the input")
    _atomic_write(args.output, data)
    px = rep.bayer_pixels
    _emit(
        [
            ("bytes", rep.total_bytes),
            ("latent_bpp", f"{8 * (rep.hyper_bytes + rep.latent_bytes) / px:.4f}"),
            ("pixel_bpp", f"{8 * rep.pixel_bytes / px:.4f}"),
            ("side_bpp", f"{8 * (rep.header_bytes + rep.side_info_bytes) / px:.4f}"),
            ("total_bpp", f"{rep.bpp():.4f}"),
            ("verified", "yes" if args.verify else "no"),
        ],
        args.machine,
    )
    return EXIT_OK


def cmd_decompress(args) -> int:
    from .rawio import encode_raw_container

    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from None
    codec = _codec(args, decode_only=True)
    img = _decode(codec, data, args.jobs)
    _atomic_write(args.output, encode_raw_container(img))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .container import ContainerError, read_header

    try:
        h = read_header(Path(args.input).read_bytes())
    except (OSError, ContainerError) as exc:
        raise CliError(EXIT_PARSE, str(exc)) from None
    depths = "" if h.depth_map is None else " ".join(str(int(v)) for v in h.depth_map.per_patch)
    _emit(
        [
            ("width", h.width),
            ("height", h.height),
            ("pattern", h.pattern.name),
            ("container_bit_depth", h.container_bit_depth),
            ("patch_size", h.patch_size),
            ("mode", h.mode.name.lower()),
            ("cond_depth", h.cond_depth),
            ("per_channel", int(bool(h.depth_map is not None and h.depth_map.per_channel))),
            ("patches", h.n_patches),
            ("header_bytes", h.header_size),
            ("payload_bytes", sum(n for _, n, _ in h.index)),
            ("weights_hash", h.weights_hash.hex()),
            ("patch_depths", depths),
        ],
        args.machine,
    )
    return EXIT_OK


def _load_corpus(args):
    from .rawio import RawFormatError
    from .synthetic import CorpusSpec, load_corpus_dir, make_synthetic_corpus

    if args.synthetic:
        return make_synthetic_corpus(
            CorpusSpec(args.synthetic, args.n_images, args.size, seed=args.seed or 0)
        ), None
    try:
        files = sorted(Path(args.corpus).glob("*.rwb"))
        return load_corpus_dir(args.corpus), [f.stem for f in files]
    except (OSError, RawFormatError) as exc:
        raise CliError(EXIT_PARSE, str(exc)) from None


def cmd_train(args) -> int:
    import dataclasses
    import json

    import torch

    from .config import RunConfig, load_config
    from .network.weights import save_weights
    from .trainer import TrainingDiverged, train

    if args.config:
        try:
            run = load_config(args.config)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CliError(EXIT_PARSE, f"bad config {args.config}: {exc}") from None
    else:
        run = RunConfig()
    tcfg = run.train
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    torch.manual_seed(tcfg.seed)
    images, _ = _load_corpus(args)
    try:
        res = train(images, tcfg, run.model, history_path=args.history, time_budget=args.time_budget)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from None
    digest = save_weights(res.model, args.output)
    _emit(
        [("epochs", len(res.history)), ("best_epoch", res.best_epoch),
         ("best_val_bpp", f"{res.best_val_bpp:.4f}"), ("weights_hash", digest.hex())],
        args.machine,
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    from .container import Mode
    from .trainer import evaluate_bpp

    images, names = _load_corpus(args)
    codec = _codec(args)
    mode = Mode.ADAPTIVE if args.fixed_depth is None else Mode.FIXED
    cond = None if args.fixed_depth is None or args.fixed_depth < 0 else args.fixed_depth
    try:
        rep = evaluate_bpp(images, codec, mode, args.patch_size, cond, names=names, jobs=args.jobs)
    except AssertionError as exc:
        raise CliError(EXIT_VERIFY, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    sys.stdout.write(rep.to_csv() if args.machine else rep.to_text())
    return EXIT_OK


def cmd_init(args) -> int:
    import torch

    from .config import ModelConfig, load_config
    from .network.model import RawCompressionModel
    from .network.weights import save_weights

    cfg = load_config(args.config).model if args.config else ModelConfig()
    torch.manual_seed(args.seed or 0)
    digest = save_weights(RawCompressionModel(cfg), args.output)
    _emit([("weights_hash", digest.hex())], args.machine)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawcodec", description="Learned lossless Bayer raw compression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=True, jobs=False, corpus=False):
        sp.add_argument("--machine", action="store_true", help="CSV on stdout")
        sp.add_argument("--seed", type=int, default=None)
        if weights:
            sp.add_argument("--weights", help=f"weights file (default: ${WEIGHTS_ENV})")
        if jobs:
            sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        if corpus:
            sp.add_argument("corpus", nargs="?", help="directory of .rwb raw containers")
            sp.add_argument("--synthetic", choices=["constant", "uniform", "smooth", "correlated", "mixed"])
            sp.add_argument("--n-images", type=int, default=16)
            sp.add_argument("--size", type=int, default=128)

    fixed_help = "code every patch at one depth (default: the container depth)"
    c = sub.add_parser("compress", help="raw container -> compressed container")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--verify", action="store_true")
    c.add_argument("--patch-size", type=int, default=64)
    c.add_argument("--fixed-depth", type=int, nargs="?", const=-1, default=None, help=fixed_help)
    c.add_argument("--per-channel", action="store_true", help="one depth per channel instead of per patch")
    common(c, jobs=True)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="compressed container -> raw container")
    d.add_argument("input")
    d.add_argument("output")
    common(d, jobs=True)
    d.set_defaults(func=cmd_decompress)

    i = sub.add_parser("inspect", help="print container header fields")
    i.add_argument("input")
    common(i, weights=False)
    i.set_defaults(func=cmd_inspect)

    t = sub.add_parser("train", help="train weights on a corpus")
    t.add_argument("output", help="weights file to write")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--history", help="loss history CSV")
    t.add_argument("--time-budget", type=float, help="stop after this many seconds")
    common(t, weights=False, corpus=True)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="real compressed sizes over a corpus")
    b.add_argument("--patch-size", type=int, default=64)
    b.add_argument("--fixed-depth", type=int, nargs="?", const=-1, default=None,
                   help="force every patch to one depth (default: the corpus maximum)")
    common(b, jobs=True, corpus=True)
    b.set_defaults(func=cmd_bench)

    n = sub.add_parser("init", help="write untrained weights")
    n.add_argument("output")
    n.add_argument("--config")
    common(n, weights=False)
    n.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command in ("train", "bench") and not (args.corpus or args.synthetic):
        parser.error("give a corpus directory or --synthetic")
    if getattr(args, "seed", None) is not None:
        import numpy as np
        import torch

        np.random.seed(args.seed)
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"rawcodec: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        print(f"rawcodec: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
