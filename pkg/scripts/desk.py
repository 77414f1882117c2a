"""Shared desk-scale recipe for the experiment scripts (one CPU core, minutes per run)."""

from __future__ import annotations

import argparse
import logging
import time

import torch

from rawcodec.config import ModelConfig, TrainConfig
from rawcodec.container import Codec
from rawcodec.network.weights import save_weights
from rawcodec.synthetic import CorpusSpec, make_synthetic_corpus
from rawcodec.trainer import train

TRAIN_IMAGES = 24
TEST_IMAGES = 6
IMAGE_SIZE = 256
TEST_SEED = 99


def recipe(epochs: int = 60, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        epochs=epochs, batch_size=16, learning_rate=1e-3, crop_size=32, patch_size=64,
        steps_per_epoch=50, plateau_patience=10, seed=seed,
    )


def add_arguments(p: argparse.ArgumentParser, epochs: int = 60) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--time-budget", type=float, default=30 * 60, help="seconds of training per model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights-out", help="directory for the trained weights files")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-epoch log")


def corpora(kind: str, seed: int = 0):
    train_set = make_synthetic_corpus(CorpusSpec(kind, TRAIN_IMAGES, IMAGE_SIZE, seed=seed))
    test_set = make_synthetic_corpus(CorpusSpec(kind, TEST_IMAGES, IMAGE_SIZE, seed=TEST_SEED))
    return train_set, test_set


def train_model(kind: str, args, images=None):
    """Train on a synthetic corpus; returns (codec, model, test images, CPU seconds)."""
    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    torch.manual_seed(args.seed)
    train_set, test_set = corpora(kind, args.seed)
    start = time.process_time()
    result = train(images or train_set, recipe(args.epochs, args.seed), ModelConfig(), time_budget=args.time_budget)
    cpu = time.process_time() - start
    if args.weights_out:
        from pathlib import Path

        out = Path(args.weights_out)
        out.mkdir(parents=True, exist_ok=True)
        save_weights(result.model, out / f"{kind}.rwwt")
    return Codec.from_model(result.model), result.model, test_set, cpu
