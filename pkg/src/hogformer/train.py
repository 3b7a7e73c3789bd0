"""Training loop: patch batches, composite loss, Adam, CSV log, checkpoint."""

from __future__ import annotations

import csv
import logging
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ModelConfig
from .data import ImageSample, iterate, read_manifest, sample_patches
from .losses import LossWeights, total_loss
from .metrics import MetricReport
from .model import HogformerModel, build_model, forward_restore
from .optim import Adam, CosineSchedule
from .tensor import ConfigurationError

log = logging.getLogger("hogformer.train")

LOG_COLUMNS = ["step", "l_rec", "l_cor", "l_hog", "total", "lr"]


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    manifest: str | None = None
    crop: int = 64
    batch: int = 2
    steps: int = 1000
    lr: float = 3e-4
    min_lr: float = 0.0
    seed: int = 0
    flips: bool = True
    alpha: float = 1.0
    beta: float = 1.0
    eval_every: int = 0
    eval_images: int = 4
    prefetch: int = 2

    def validate(self) -> "TrainConfig":
        problems = []
        if self.crop < 16:
            problems.append(f"crop must be >= 16, got {self.crop}")
        elif self.crop % self.model.pad_multiple():
            problems.append(f"crop {self.crop} must be a multiple of {self.model.pad_multiple()}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1, got {self.batch}")
        if self.steps < 0:
            problems.append(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.prefetch < 0:
            problems.append(f"prefetch must be >= 0, got {self.prefetch}")
        if problems:
            raise ConfigurationError("invalid train config: " + "; ".join(problems))
        self.model.validate()
        LossWeights(self.alpha, self.beta).validate()
        return self

    def loss_weights(self) -> LossWeights:
        # the hog_loss component flag switches the HOG term off entirely
        return LossWeights(self.alpha, self.beta if self.model.hog_loss else 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainResult:
    model: HogformerModel
    optimizer: Adam
    rows: list[dict]
    evals: list[dict]
    seconds: float


def _batches(samples: list[ImageSample], cfg: TrainConfig):
    """Deterministic stream of (degraded, clean) float32 batches."""
    rng = np.random.default_rng(cfg.seed + 1)
    for _ in range(cfg.steps):
        idx = rng.choice(len(samples), size=cfg.batch, replace=len(samples) < cfg.batch)
        crops = [sample_patches(samples[i], cfg.crop, 1, rng, cfg.flips)[0] for i in idx]
        yield (
            np.stack([c.degraded for c in crops]).astype(np.float32),
            np.stack([c.clean for c in crops]).astype(np.float32),
        )


def _prefetched(gen, depth: int):
    """Run ``gen`` on a worker thread through a bounded queue. The sequence
    is the same as iterating ``gen`` directly, whatever the depth."""
    if depth == 0:
        yield from gen
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def evaluate(model: HogformerModel, samples: list[ImageSample]) -> MetricReport:
    report = MetricReport()
    with T.no_grad():
        for s in samples:
            pred = forward_restore(model, s.degraded, clamp=True)
            report.add(s.id, pred.data, s.clean)
    return report


def train_loop(
    cfg: TrainConfig,
    checkpoint_path: str | None = None,
    samples: list[ImageSample] | None = None,
    model: HogformerModel | None = None,
) -> TrainResult:
    """Train on ``samples`` (or the manifest in ``cfg``).

    With ``checkpoint_path`` (say ``run/model.hogf``) the final checkpoint is
    written there, the per-step log to ``run/model.loss.csv`` and periodic
    eval to ``run/model.eval.csv``. All data is loaded and degraded before
    step 0, so unreadable inputs abort early.
    """
    cfg.validate()
    if samples is None:
        if not cfg.manifest:
            raise ConfigurationError("train_loop needs a manifest or in-memory samples")
        samples = list(iterate(read_manifest(cfg.manifest)))
    if cfg.steps and not samples:
        raise ConfigurationError("training set is empty")
    for s in samples:
        if min(s.clean.shape[1:]) < cfg.crop:
            raise ConfigurationError(f"{s.id}: image {s.clean.shape[1:]} smaller than crop {cfg.crop}")

    model = model or build_model(cfg.model, seed=cfg.seed)
    model.astype(np.float32)
    opt = Adam(model.named_parameters())
    schedule = CosineSchedule(cfg.lr, cfg.steps, cfg.min_lr)
    opt.state.schedule = schedule.to_dict()
    weights = cfg.loss_weights()
    eval_set = samples[: cfg.eval_images]

    writer = fh = None
    if checkpoint_path:
        stem = os.path.splitext(checkpoint_path)[0]
        os.makedirs(os.path.dirname(os.path.abspath(checkpoint_path)), exist_ok=True)
        fh = open(f"{stem}.loss.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    rows, evals = [], []
    start = time.perf_counter()
    try:
        with T.default_dtype(np.float32):
            for step, (x, y) in enumerate(_prefetched(_batches(samples, cfg), cfg.prefetch), start=1):
                lr = schedule.lr(step)
                opt.zero_grad()
                pred = model(T.Tensor(x))
                terms = total_loss(pred, T.Tensor(y), weights)
                terms.total.backward()
                opt.step(lr)
                row = {"step": step, **terms.values(), "lr": lr}
                rows.append(row)
                if writer:
                    writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
                    fh.flush()
                if step == 1 or step % 50 == 0 or step == cfg.steps:
                    log.info("step %d total %.5f rec %.5f lr %.3g", step, row["total"], row["l_rec"], lr)
                if cfg.eval_every and step % cfg.eval_every == 0:
                    rep = evaluate(model, eval_set)
                    evals.append({"step": step, "psnr": rep.mean_psnr, "ssim": rep.mean_ssim})
                    log.info("eval step %d psnr %.3f ssim %.4f", step, rep.mean_psnr, rep.mean_ssim)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        if evals:
            with open(f"{stem}.eval.csv", "w", newline="") as efh:
                ew = csv.DictWriter(efh, fieldnames=["step", "psnr", "ssim"])
                ew.writeheader()
                ew.writerows(evals)
        save_checkpoint(model, checkpoint_path, step=len(rows), optimizer=opt)
    return TrainResult(model, opt, rows, evals, time.perf_counter() - start)
