"""Supervised pretraining of the U-Net on (FBP, ground truth) pairs."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import unet
from .ct import RayTransform
from .metrics import psnr
from .phantoms import EllipsesDistribution, NoiseModel, SampleRecord, dataset_stream
from .tensor import Adam, LearningRateSchedule, Tensor, backward
from .tensor import functional as F
from .unet import CheckpointMeta, UNetConfig, UNetParams

LOG_HEADER = ["epoch", "train_loss", "val_loss", "checkpoint_path"]
MIN_VAL_NAME = "ckpt_minval.edipckpt"


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch:04d}.edipckpt"


@dataclass
class PretrainConfig:
    epochs: int = 100
    samples_per_epoch: int = 3200
    val_samples: int = 320
    batch_size: int = 16
    lr_schedule: LearningRateSchedule = field(default_factory=lambda: LearningRateSchedule.constant(1e-3))
    checkpoint_every_epochs: int = 20
    seed: int = 0
    ellipses: EllipsesDistribution = field(default_factory=EllipsesDistribution)
    noise: NoiseModel = field(default_factory=NoiseModel)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if min(self.epochs, self.samples_per_epoch, self.val_samples, self.batch_size,
               self.checkpoint_every_epochs) < 1:
            raise ValueError("pretraining counts must be positive")
        if self.batch_size > self.samples_per_epoch:
            raise ValueError("batch_size must not exceed samples_per_epoch")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "samples_per_epoch": self.samples_per_epoch,
            "val_samples": self.val_samples, "batch_size": self.batch_size,
            "lr_schedule": self.lr_schedule.to_dict(), "checkpoint_every_epochs": self.checkpoint_every_epochs,
            "seed": self.seed, "ellipses": self.ellipses.to_dict(), "noise": self.noise.to_dict(),
            "unet": self.unet.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "PretrainConfig":
        d = dict(d)
        d["lr_schedule"] = LearningRateSchedule.from_dict(d["lr_schedule"])
        d["ellipses"] = EllipsesDistribution.from_dict(d["ellipses"])
        d["noise"] = NoiseModel.from_dict(d["noise"])
        d["unet"] = UNetConfig.from_dict(d["unet"])
        return cls(**d)


@dataclass
class PretrainRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    checkpoints: list[tuple[int, Path]] = field(default_factory=list)
    min_val_loss: float = math.inf
    min_val_epoch: int = 0
    min_val_loss_checkpoint: Path | None = None
    epochs: list[int] = field(default_factory=list)
    params: UNetParams | None = None

    def write_csv(self, path) -> None:
        ckpt = {e: p.name for e, p in self.checkpoints}
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for e, tl, vl in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([e, repr(tl), repr(vl), ckpt.get(e, "")])


class SampleSource:
    """Produces training batches and the fixed validation set for one seed."""

    def __init__(self, config: PretrainConfig, op: RayTransform):
        self.config, self.op = config, op

    def epoch(self, epoch: int):
        """Records of 1-based ``epoch``; each epoch draws fresh samples from the stream."""
        c = self.config
        start = (epoch - 1) * c.samples_per_epoch
        stream = dataset_stream(c.ellipses, self.op, c.noise, c.seed, "train", start)
        return list(itertools.islice(stream, c.samples_per_epoch))

    def validation(self):
        c = self.config
        return list(itertools.islice(dataset_stream(c.ellipses, self.op, c.noise, c.seed, "val"), c.val_samples))


def _stack(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([r.fbp for r in records])[:, None], np.stack([r.ground_truth for r in records])[:, None])


def supervised_loss(params: UNetParams, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean squared error per pixel over the batch."""
    out = unet.forward(params, inputs)
    return F.mean(F.mul(F.sub(out, Tensor(targets)), F.sub(out, Tensor(targets))))


def validation_loss(params: UNetParams, records: list[SampleRecord], batch_size: int = 16) -> float:
    total = 0.0
    for k in range(0, len(records), batch_size):
        x, t = _stack(records[k:k + batch_size])
        total += float(np.sum((unet.predict(params, x[:, 0]) - t[:, 0]) ** 2))
    n = records[0].ground_truth.size
    return total / (len(records) * n)


def pretrain(config: PretrainConfig, op: RayTransform, out_dir=None, resume_from=None,
             stop_after_epoch: int | None = None, source: SampleSource | None = None) -> PretrainRecord:
    """Train ``phi(fbp) ~ ground_truth`` and checkpoint along the way.

    ``resume_from`` restarts from a checkpoint (parameters and Adam moments) at the
    following epoch. ``stop_after_epoch`` ends the loop early, mainly for resume tests.
    Without ``out_dir`` nothing is written.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    source = source or SampleSource(config, op)
    first_epoch = 1
    if resume_from is not None:
        params, meta, moments = unet.load_checkpoint(resume_from, config.unet, with_optimizer=True)
        first_epoch = meta.epoch + 1
    else:
        params = unet.init_params(config.unet, config.seed)
    opt = Adam(params.trainable(), config.lr_schedule)
    if resume_from is not None:
        opt.state.step_count = meta.optimizer_step
        for name, (m, v) in moments.items():
            opt.state.first_moment[name] = m.copy()
            opt.state.second_moment[name] = v.copy()

    val = source.validation()
    rec = PretrainRecord(params=params)
    last = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(first_epoch, last + 1):
        records = source.epoch(epoch)
        losses = []
        for k in range(0, len(records) - config.batch_size + 1, config.batch_size):
            x, t = _stack(records[k:k + config.batch_size])
            opt.zero_grad()
            lval = supervised_loss(params, x, t)
            if not math.isfinite(float(lval.data)):
                raise FloatingPointError(f"non-finite pretraining loss in epoch {epoch}")
            backward(lval)
            opt.step()
            losses.append(float(lval.data))
        rec.epochs.append(epoch)
        rec.train_loss.append(float(np.mean(losses)))
        vloss = validation_loss(params, val, config.batch_size)
        rec.val_loss.append(vloss)
        meta = CheckpointMeta(epoch=epoch, seed=config.seed, val_loss=vloss)
        if out is not None and epoch % config.checkpoint_every_epochs == 0:
            path = out / checkpoint_name(epoch)
            unet.save_checkpoint(path, params, meta, opt.state)
            rec.checkpoints.append((epoch, path))
        if vloss < rec.min_val_loss:
            rec.min_val_loss, rec.min_val_epoch = vloss, epoch
            if out is not None:
                rec.min_val_loss_checkpoint = out / MIN_VAL_NAME
                unet.save_checkpoint(rec.min_val_loss_checkpoint, params, meta, opt.state)
    if out is not None:
        rec.write_csv(out / "pretrain_log.csv")
    return rec


def eval_checkpoint_feedforward(checkpoint, sample: SampleRecord, config: UNetConfig | None = None):
    """``(output, psnr)`` of the network applied to ``sample.fbp``; parameters are untouched.

    ``checkpoint`` is a path (requires ``config``) or a :class:`UNetParams`.
    """
    if isinstance(checkpoint, UNetParams):
        params = checkpoint
    else:
        if config is None:
            raise ValueError("a UNetConfig is needed to load a checkpoint path")
        params, _ = unet.load_checkpoint(checkpoint, config)
    output = unet.predict(params, sample.fbp)
    return output, psnr(output, sample.ground_truth)
