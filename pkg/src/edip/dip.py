"""Unsupervised fine-tuning: DIP, EDIP and their fixed-encoder variants.

The objective is ``(1/m) ||A phi(z) - y||^2 + gamma' * TV(phi(z))`` with
anisotropic TV built from forward differences (no wraparound).
"""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import unet
from .ct import RayTransform
from .metrics import psnr
from .tensor import Adam, LearningRateSchedule, Tensor, backward
from .tensor import functional as F
from .unet import UNetConfig, UNetParams

INPUT_MODES = ("noise", "fbp")
INIT_MODES = ("random", "checkpoint")
NOISE_INPUT_HIGH = 0.1


class NonFiniteLossError(FloatingPointError):
    """Raised when the objective turns NaN/Inf; carries the history so far."""

    def __init__(self, iteration: int, history: "RunHistory"):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.history = history


@dataclass(frozen=True)
class StopRule:
    """Stop once the moving average of ``|l[i+1] - l[i]|`` over ``window`` steps drops below ``threshold``."""

    window: int = 100
    threshold: float = 1e-7

    def __post_init__(self):
        if self.window < 1 or not self.threshold > 0:
            raise ValueError("StopRule needs window >= 1 and threshold > 0")

    def to_dict(self) -> dict:
        return {"window": self.window, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d) -> "StopRule":
        return cls(int(d["window"]), float(d["threshold"]))


class StopMonitor:
    def __init__(self, rule: StopRule):
        self.rule = rule
        self.deltas: deque[float] = deque(maxlen=rule.window)
        self.last: float | None = None

    def update(self, loss: float) -> bool:
        if self.last is not None:
            self.deltas.append(abs(loss - self.last))
        self.last = loss
        return len(self.deltas) == self.rule.window and sum(self.deltas) / self.rule.window < self.rule.threshold


@dataclass
class DipConfig:
    input_mode: str = "noise"
    init_mode: str = "random"
    checkpoint: str | None = None
    seed: int = 0
    freeze_encoder: bool = False
    gamma_prime: float = 1e-4
    lr_schedule: LearningRateSchedule = field(default_factory=lambda: LearningRateSchedule.constant(1e-4))
    max_iters: int = 1000
    stop_rule: StopRule | None = None
    eval_every: int = 10
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.gamma_prime < 0:
            raise ValueError("gamma_prime must be >= 0")
        if self.max_iters < 1 or self.eval_every < 1:
            raise ValueError("max_iters and eval_every must be >= 1")
        if self.freeze_encoder and self.init_mode != "checkpoint":
            raise ValueError("freeze_encoder requires init_mode='checkpoint'")
        if self.init_mode == "checkpoint" and not self.checkpoint:
            raise ValueError("init_mode='checkpoint' requires a checkpoint path")

    def to_dict(self) -> dict:
        return {
            "input_mode": self.input_mode, "init_mode": self.init_mode, "checkpoint": self.checkpoint,
            "seed": self.seed, "freeze_encoder": self.freeze_encoder, "gamma_prime": self.gamma_prime,
            "lr_schedule": self.lr_schedule.to_dict(), "max_iters": self.max_iters,
            "stop_rule": None if self.stop_rule is None else self.stop_rule.to_dict(),
            "eval_every": self.eval_every, "unet": self.unet.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "DipConfig":
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = LearningRateSchedule.from_dict(d["lr_schedule"])
        if d.get("stop_rule") is not None:
            d["stop_rule"] = StopRule.from_dict(d["stop_rule"])
        if "unet" in d:
            d["unet"] = UNetConfig.from_dict(d["unet"])
        return cls(**d)


def warmup_schedule(initial_lr: float = 5e-4, final_lr: float = 1e-4, transition_iters: int = 5000,
                    scale: float = 1.0) -> LearningRateSchedule:
    """Linear warm-down used for noise-input DIP; ``scale`` shortens the transition for desk runs."""
    return LearningRateSchedule("linear-warmdown", initial_lr, final_lr, max(1, round(transition_iters * scale)))


# -- objective -------------------------------------------------------------------

def total_variation(image) -> Tensor:
    """``||D_h x||_1 + ||D_v x||_1`` over the last two axes."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    return F.add(F.l1_norm(F.forward_diff(x, -1)), F.l1_norm(F.forward_diff(x, -2)))


@dataclass
class LossTerms:
    loss: Tensor
    data_fit: float
    tv: float


def image_loss(image: Tensor, op: RayTransform, y_delta: np.ndarray, gamma_prime: float) -> LossTerms:
    """Objective evaluated on an image tensor of shape ``(..., n, n)``."""
    n = op.geometry.image_size
    y = np.asarray(y_delta, dtype=np.float64).ravel()
    if y.size != op.shape[0]:
        raise ValueError(f"measurement has {y.size} entries, operator expects {op.shape[0]}")
    if image.size != n * n:
        raise ValueError(f"image has {image.size} pixels, operator expects {n * n}")
    img = F.reshape(image, (n, n))
    resid = F.sub(F.sparse_matvec(op.matrix, F.reshape(img, (n * n,))), Tensor(y))
    fit = F.mul(F.l2_norm_sq(resid), 1.0 / y.size)
    tv = total_variation(img)
    return LossTerms(F.add(fit, F.mul(tv, float(gamma_prime))), float(fit.data), float(tv.data))


def loss(params: UNetParams, op: RayTransform, y_delta, z, gamma_prime: float) -> LossTerms:
    return image_loss(unet.forward(params, z), op, y_delta, gamma_prime)


# -- history -----------------------------------------------------------------------

HISTORY_HEADER = ["iter", "loss", "data_fit", "tv", "psnr", "wall_ms"]


@dataclass
class RunHistory:
    loss: list[float] = field(default_factory=list)
    data_fit: list[float] = field(default_factory=list)
    tv: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)  # nan off the eval grid
    wall_ms: list[float] = field(default_factory=list)
    gamma_prime: float = 0.0
    eval_every: int = 1
    min_loss: float = math.inf
    min_loss_iter: int = -1
    min_loss_output: np.ndarray | None = None
    min_loss_psnr: list[float] = field(default_factory=list)
    stop_iter: int | None = None

    def __len__(self) -> int:
        return len(self.loss)

    def record(self, loss_value: float, fit: float, tv: float, output: np.ndarray, wall_ms: float,
               ground_truth=None) -> None:
        i = len(self.loss)
        self.loss.append(loss_value)
        self.data_fit.append(fit)
        self.tv.append(tv)
        self.wall_ms.append(wall_ms)
        if loss_value < self.min_loss:
            self.min_loss, self.min_loss_iter = loss_value, i
            self.min_loss_output = output.copy()
        on_grid = ground_truth is not None and i % self.eval_every == 0
        self.psnr.append(psnr(output, ground_truth) if on_grid else math.nan)
        self.min_loss_psnr.append(psnr(self.min_loss_output, ground_truth) if on_grid else math.nan)

    def psnr_trace(self) -> tuple[np.ndarray, np.ndarray]:
        """``(iterations, psnr)`` restricted to the evaluation grid."""
        it = np.arange(0, len(self.psnr), self.eval_every)
        return it, np.asarray(self.psnr)[it]

    def running_min(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.loss))

    def write_csv(self, path, include_wall_time: bool = True) -> None:
        """Per-iteration log; with ``include_wall_time=False`` the timing column is blank."""
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for i in range(len(self.loss)):
                p = self.psnr[i]
                w.writerow([i, repr(self.loss[i]), repr(self.data_fit[i]), repr(self.tv[i]),
                            "" if math.isnan(p) else repr(p),
                            f"{self.wall_ms[i]:.3f}" if include_wall_time else ""])


def read_history_csv(path, eval_every: int = 1) -> RunHistory:
    h = RunHistory(eval_every=eval_every)
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            h.loss.append(float(row["loss"]))
            h.data_fit.append(float(row["data_fit"]))
            h.tv.append(float(row["tv"]))
            h.psnr.append(float(row["psnr"]) if row["psnr"] else math.nan)
            h.wall_ms.append(float(row["wall_ms"]) if row["wall_ms"] else math.nan)
    if h.loss:
        h.min_loss_iter = int(np.argmin(h.loss))
        h.min_loss = h.loss[h.min_loss_iter]
    return h


# -- reconstruction loop ---------------------------------------------------------

def noise_input(image_size: int, seed: int, channels: int = 1) -> np.ndarray:
    """Fixed network input, i.i.d. uniform on ``[0, 0.1]``."""
    rng = np.random.default_rng([int(seed), 2])
    return rng.uniform(0.0, NOISE_INPUT_HIGH, size=(1, channels, image_size, image_size))


def network_input(config: DipConfig, op: RayTransform, y_delta) -> np.ndarray:
    n = op.geometry.image_size
    if config.input_mode == "noise":
        return noise_input(n, config.seed, config.unet.in_channels)
    if config.unet.in_channels != 1:
        raise ValueError("fbp input mode needs a single-channel network")
    return op.fbp(np.asarray(y_delta).reshape(op.sinogram_shape))[None, None]


def initial_params(config: DipConfig, params: UNetParams | None = None) -> UNetParams:
    if params is not None:
        if params.config != config.unet:
            raise unet.ArchitectureMismatchError("supplied parameters do not match config.unet")
        return params.copy()
    if config.init_mode == "checkpoint":
        loaded, _ = unet.load_checkpoint(config.checkpoint, config.unet)
        return loaded
    return unet.init_params(config.unet, config.seed)


@dataclass
class DipResult:
    history: RunHistory
    final_output: np.ndarray
    min_loss_output: np.ndarray
    params: UNetParams


def reconstruct(config: DipConfig, op: RayTransform, y_delta, ground_truth=None,
                params: UNetParams | None = None, callback=None) -> DipResult:
    """Run Adam on the objective for ``config.max_iters`` steps (or until the stop rule fires).

    ``params`` overrides the configured initialisation (used to share one loaded
    checkpoint across runs); it is copied, never mutated. ``callback(i, params)``
    is invoked before the update of iteration ``i``.
    """
    y = np.asarray(y_delta, dtype=np.float64)
    if y.size != op.shape[0]:
        raise ValueError(f"measurement has {y.size} entries, operator expects {op.shape[0]}")
    if ground_truth is not None:
        ground_truth = np.asarray(ground_truth, dtype=np.float64)
        if ground_truth.shape != op.image_shape:
            raise ValueError(f"ground truth shape {ground_truth.shape} != image shape {op.image_shape}")
    p = initial_params(config, params)
    if config.freeze_encoder:
        unet.freeze(p, p.encoder_names)
    z = Tensor(network_input(config, op, y))
    opt = Adam(p.trainable(), config.lr_schedule)
    hist = RunHistory(gamma_prime=config.gamma_prime, eval_every=config.eval_every)
    monitor = StopMonitor(config.stop_rule) if config.stop_rule else None
    n = op.geometry.image_size
    out = None
    t0 = time.perf_counter()
    for i in range(config.max_iters):
        out = unet.forward(p, z)
        terms = image_loss(out, op, y, config.gamma_prime)
        value = float(terms.loss.data)
        image = out.data.reshape(n, n)
        hist.record(value, terms.data_fit, terms.tv, image, 1e3 * (time.perf_counter() - t0), ground_truth)
        if not math.isfinite(value):
            raise NonFiniteLossError(i, hist)
        if monitor is not None and monitor.update(value):
            hist.stop_iter = i
            break
        if callback is not None:
            callback(i, p)
        opt.zero_grad()
        backward(terms.loss)
        opt.step()
    return DipResult(hist, out.data.reshape(n, n).copy(), hist.min_loss_output, p)
