"""Rate-minimizing training loop and real-size evaluation."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bitdepth import bit_depth_array
from .config import ModelConfig, TrainConfig
from .container import Codec, Mode
from .network.model import RawCompressionModel
from .rawio import BayerImage, pack_bayer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class LRPlateau:
    """Multiply the LR by ``factor`` once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 10, threshold: float = 0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.stale = 0

    def step(self, loss: float) -> bool:
        """Record one epoch; True when the LR was just reduced."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
            return True
        return False


def split_corpus(images, val_fraction: float, test_fraction: float, seed: int):
    """Seeded image-level split into (train, val, test); val and test get at least one image when possible."""
    n = len(images)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, round(n * val_fraction)) if n >= 3 else 0
    n_test = max(1, round(n * test_fraction)) if n >= 3 else 0
    val = [images[i] for i in order[:n_val]]
    test = [images[i] for i in order[n_val : n_val + n_test]]
    train = [images[i] for i in order[n_val + n_test :]]
    return train, val or train, test


def crop_depths(crops: np.ndarray) -> np.ndarray:
    """(B, 4, h, w) crops -> (B, 4) shared depths (max over channels)."""
    per_channel = bit_depth_array(crops.reshape(crops.shape[0], 4, -1).max(axis=2))
    return np.repeat(per_channel.max(axis=1, keepdims=True), 4, axis=1)


class CropSampler:
    """Random crops with flips from packed planes; depths recomputed per crop."""

    def __init__(self, images: list[BayerImage], crop: int, flip_p: float, seed: int):
        self.planes = [pack_bayer(im).planes.astype(np.int64) for im in images]
        self.planes = [p for p in self.planes if min(p.shape[1:]) >= crop]
        if not self.planes:
            raise ValueError(f"no image is at least {crop}x{crop} after packing")
        self.crop = crop
        self.flip_p = flip_p
        self.rng = np.random.default_rng(seed)

    def batch(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.crop
        out = np.empty((n, 4, c, c), dtype=np.int64)
        for k in range(n):
            p = self.planes[self.rng.integers(len(self.planes))]
            r = self.rng.integers(p.shape[1] - c + 1)
            q = self.rng.integers(p.shape[2] - c + 1)
            x = p[:, r : r + c, q : q + c]
            if self.rng.random() < self.flip_p:
                x = x[:, :, ::-1]
            if self.rng.random() < self.flip_p:
                x = x[:, ::-1, :]
            out[k] = x
        return out, crop_depths(out)


def fixed_crops(images: list[BayerImage], crop: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping crops of every image (validation set), no augmentation."""
    rows = []
    for im in images:
        p = pack_bayer(im).planes.astype(np.int64)
        for r in range(0, p.shape[1] - crop + 1, crop):
            for q in range(0, p.shape[2] - crop + 1, crop):
                rows.append(p[:, r : r + crop, q : q + crop])
    if not rows:
        raise ValueError(f"no validation image is at least {crop}x{crop} after packing")
    x = np.stack(rows)
    return x, crop_depths(x)


class _Prefetch:
    """Background producer of training batches through a bounded queue."""

    def __init__(self, sampler: CropSampler, depth: int):
        self.sampler = sampler
        self.q: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self.requests: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        while True:
            n = self.requests.get()
            if n is None:
                return
            self.q.put(self.sampler.batch(n))

    def request(self, n: int) -> None:
        self.requests.put(n)

    def get(self):
        return self.q.get()

    def close(self):
        self.requests.put(None)


@dataclass
class EpochRecord:
    epoch: int
    train_bpp: float
    val_bpp: float
    lr: float
    batch_size: int


@dataclass
class TrainResult:
    model: RawCompressionModel
    history: list[EpochRecord] = field(default_factory=list)
    best_val_bpp: float = math.inf
    best_epoch: int = -1

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_bpp", "val_bpp", "lr", "batch_size"])
        for r in self.history:
            w.writerow([r.epoch, f"{r.train_bpp:.6f}", f"{r.val_bpp:.6f}", f"{r.lr:.3g}", r.batch_size])
        return buf.getvalue()


def _bpp(model, x, d, generator=None, noise=True) -> torch.Tensor:
    return model(torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(d), generator, noise).bpp


@torch.no_grad()
def validation_bpp(model, x: np.ndarray, d: np.ndarray, batch: int = 64) -> float:
    """Model rate with rounding quantization, averaged over all validation pixels."""
    model.eval()
    tot = 0.0
    for i in range(0, len(x), batch):
        tot += float(_bpp(model, x[i : i + batch], d[i : i + batch], noise=False)) * len(x[i : i + batch])
    return tot / len(x)


def _step(model, opt, cfg: TrainConfig, x, d, gen) -> float:
    opt.zero_grad()
    loss = _bpp(model, x, d, gen)
    if not torch.isfinite(loss):
        return float("nan")
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return loss.item()


def _is_oom(exc: BaseException) -> bool:
    return isinstance(exc, MemoryError) or "out of memory" in str(exc).lower()


def train(
    images: list[BayerImage],
    cfg: TrainConfig | None = None,
    model_cfg: ModelConfig | None = None,
    history_path=None,
    model: RawCompressionModel | None = None,
    time_budget: float | None = None,
) -> TrainResult:
    """Minimize bits per Bayer pixel with Adam; returns the best-validation weights.

    ``steps_per_epoch`` defaults to one pass over the training crops.
    ``time_budget`` (seconds) stops early at an epoch boundary.
    """
    import time

    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = model or RawCompressionModel(model_cfg or ModelConfig())
    train_set, val_set, _ = split_corpus(images, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    sampler = CropSampler(train_set, cfg.crop_size, cfg.flip_probability, cfg.seed + 1)
    val_x, val_d = fixed_crops(val_set, cfg.crop_size)
    if cfg.steps_per_epoch is not None:
        steps = cfg.steps_per_epoch
    else:
        area = sum(p.shape[1] * p.shape[2] for p in sampler.planes)
        steps = max(1, area // (cfg.crop_size**2 * cfg.batch_size))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    sched = LRPlateau(cfg.learning_rate, cfg.lr_decay, cfg.plateau_patience)
    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    batch = cfg.batch_size
    pre = _Prefetch(sampler, cfg.prefetch)
    start = time.monotonic()
    try:
        for epoch in range(cfg.epochs):
            model.train()
            tot, n_steps = 0.0, 0
            pre.request(batch)
            while n_steps < steps:
                x, d = pre.get()
                if n_steps + 1 < steps:
                    pre.request(batch)
                while True:
                    try:
                        loss = _step(model, opt, cfg, x[:batch], d[:batch], gen)
                        break
                    except RuntimeError as exc:
                        if isinstance(exc, TrainingDiverged) or not _is_oom(exc) or batch // 2 < cfg.min_batch_size:
                            raise
                        batch //= 2
                        log.warning("memory pressure, batch size reduced to %d", batch)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss {loss} at epoch {epoch}, step {n_steps}, "
                        f"lr {sched.lr:.3g}, depths seen {sorted(set(d[:, 0].tolist()))}"
                    )
                tot += loss
                n_steps += 1
            val = validation_bpp(model, val_x, val_d)
            if not math.isfinite(val):
                raise TrainingDiverged(f"non-finite validation bpp at epoch {epoch}")
            result.history.append(EpochRecord(epoch, tot / steps, val, sched.lr, batch))
            log.info("epoch %d train %.4f val %.4f lr %.2g", epoch, tot / steps, val, sched.lr)
            if val < result.best_val_bpp:
                result.best_val_bpp, result.best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
            if sched.step(val):
                for g in opt.param_groups:
                    g["lr"] = sched.lr
            if history_path is not None:
                Path(history_path).write_text(result.history_csv())
            if time_budget is not None and time.monotonic() - start > time_budget:
                log.info("time budget reached after epoch %d", epoch)
                break
    finally:
        pre.close()
    model.load_state_dict(best_state)
    model.eval()
    return result


# --- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class RateRow:
    name: str
    pixels: int
    latent_bits: int  # hyper + latent sub-streams
    pixel_bits: int
    side_bits: int  # headers, index, framing and the bit-depth map
    mean_depth: float

    @property
    def total_bits(self) -> int:
        return self.latent_bits + self.pixel_bits + self.side_bits

    @property
    def bpp(self) -> float:
        return self.total_bits / self.pixels


@dataclass
class RateReport:
    mode: str
    rows: list[RateRow]

    @property
    def corpus(self) -> RateRow:
        return RateRow(
            "corpus",
            sum(r.pixels for r in self.rows),
            sum(r.latent_bits for r in self.rows),
            sum(r.pixel_bits for r in self.rows),
            sum(r.side_bits for r in self.rows),
            float(np.average([r.mean_depth for r in self.rows], weights=[r.pixels for r in self.rows])),
        )

    @property
    def bpp(self) -> float:
        return self.corpus.bpp

    def _table(self):
        head = ["image", "mode", "pixels", "latent_bpp", "pixel_bpp", "side_bpp", "total_bpp", "mean_depth"]
        body = []
        for r in [*self.rows, self.corpus]:
            body.append(
                [r.name, self.mode, str(r.pixels), f"{r.latent_bits / r.pixels:.4f}",
                 f"{r.pixel_bits / r.pixels:.4f}", f"{r.side_bits / r.pixels:.4f}", f"{r.bpp:.4f}",
                 f"{r.mean_depth:.2f}"]
            )
        return head, body

    def to_csv(self) -> str:
        head, body = self._table()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        w.writerows(body)
        return buf.getvalue()

    def to_text(self) -> str:
        head, body = self._table()
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in [head, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def corpus_max_depth(images: list[BayerImage]) -> int:
    return max(int(im.samples.max()).bit_length() for im in images)


def evaluate_bpp(
    images: list[BayerImage],
    codec: Codec,
    mode: str | Mode = Mode.ADAPTIVE,
    patch_size: int = 64,
    cond_depth: int | None = None,
    names: list[str] | None = None,
    jobs: int = 1,
) -> RateReport:
    """Real container sizes; every image is also decoded and compared.

    Fixed and masked modes condition on ``cond_depth``, by default the corpus maximum.
    """
    from .bitdepth import BitDepthMap
    from .rawio import split_patches

    mode = Mode[mode.upper()] if isinstance(mode, str) else Mode(mode)
    if mode != Mode.ADAPTIVE and cond_depth is None:
        cond_depth = corpus_max_depth(images)
    rows = []
    for k, im in enumerate(images):
        data, rep = codec.compress(im, patch_size, mode, cond_depth, jobs=jobs)
        if codec.decompress(data, jobs=jobs) != im:
            raise AssertionError(f"lossless audit failed on image {k}")
        patches = split_patches(pack_bayer(im), patch_size)
        dm = BitDepthMap.from_patches(patches)
        weights = np.array([p.valid[0] * p.valid[1] for p in patches], dtype=np.float64)
        rows.append(
            RateRow(
                names[k] if names else f"img{k:04d}",
                im.width * im.height,
                8 * (rep.hyper_bytes + rep.latent_bytes),
                8 * rep.pixel_bytes,
                8 * (rep.header_bytes + rep.side_info_bytes),
                float(np.average(dm.per_patch, weights=weights)),
            )
        )
        assert rows[-1].total_bits == 8 * len(data)
    return RateReport(mode.name.lower(), rows)
