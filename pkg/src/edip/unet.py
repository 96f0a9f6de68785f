"""Multi-scale U-Net with group normalisation and an encoder/decoder split.

Layout per scale: two ``conv3x3 -> group_norm -> leaky_relu`` units. The
contracting path downsamples with a stride-2 first unit; the expanding path
upsamples bilinearly, concatenates a 1x1-projected skip connection and
applies two units. A 1x1 convolution and a sigmoid form the output head.

Encoder blocks: ``inc.*`` and ``down*.*`` (contracting path and bottleneck).
Decoder blocks: ``skip*.*``, ``up*.*`` and ``outc.*``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .tensor import functional as F
from .tensor.serialize import read_tensor, write_tensor

ENCODER, DECODER = "encoder", "decoder"


class ArchitectureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    scales: int = 4
    channels: int = 32
    skip_channels: int = 4
    kernel_size: int = 3
    groups: int = 8
    in_channels: int = 1
    final_activation: str = "sigmoid"

    def __post_init__(self):
        if self.scales < 2:
            raise ValueError("scales must be >= 2")
        if self.channels % self.groups:
            raise ValueError(f"channels ({self.channels}) must be divisible by groups ({self.groups})")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd to preserve spatial size")
        if self.skip_channels < 0 or self.in_channels < 1:
            raise ValueError("bad channel counts")
        if self.final_activation != "sigmoid":
            raise ValueError("only the sigmoid head is supported")

    @property
    def skip_groups(self) -> int:
        return math.gcd(self.groups, self.skip_channels) if self.skip_channels else 0

    def check_input_size(self, height: int, width: int) -> None:
        f = 2 ** (self.scales - 1)
        if height % f or width % f:
            raise ArchitectureMismatchError(
                f"input {height}x{width} not divisible by 2^(scales-1) = {f}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "UNetConfig":
        return cls(**d)

    def hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def layer_table(cfg: UNetConfig) -> list[tuple[str, str, int, int, int, bool]]:
    """``(prefix, tag, c_in, c_out, kernel, has_norm)`` for every conv in forward order."""
    c, k, s = cfg.channels, cfg.kernel_size, cfg.skip_channels
    rows = [("inc.0", ENCODER, cfg.in_channels, c, k, True), ("inc.1", ENCODER, c, c, k, True)]
    for i in range(1, cfg.scales):
        rows += [(f"down{i}.0", ENCODER, c, c, k, True), (f"down{i}.1", ENCODER, c, c, k, True)]
    for i in range(cfg.scales - 1, 0, -1):
        if s:
            rows.append((f"skip{i - 1}", DECODER, c, s, 1, True))
        rows += [(f"up{i}.0", DECODER, c + s, c, k, True), (f"up{i}.1", DECODER, c, c, k, True)]
    rows.append(("outc", DECODER, c, 1, 1, False))
    return rows


class UNetParams:
    """Ordered named parameter blocks, each tagged encoder or decoder."""

    def __init__(self, config: UNetConfig, blocks: "OrderedDict[str, Tensor]", tags: dict[str, str]):
        self.config = config
        self.blocks = blocks
        self.tags = tags

    def __getitem__(self, name: str) -> Tensor:
        return self.blocks[name]

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def items(self):
        return self.blocks.items()

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.blocks.values())

    @property
    def encoder_names(self) -> list[str]:
        return [n for n in self.blocks if self.tags[n] == ENCODER]

    @property
    def decoder_names(self) -> list[str]:
        return [n for n in self.blocks if self.tags[n] == DECODER]

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, t) for n, t in self.blocks.items() if t.requires_grad)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.blocks.values()])

    def block_slices(self) -> "OrderedDict[str, slice]":
        out, pos = OrderedDict(), 0
        for n, t in self.blocks.items():
            out[n] = slice(pos, pos + t.size)
            pos += t.size
        return out

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.num_params},)")
        for (n, t), sl in zip(self.blocks.items(), self.block_slices().values()):
            t.data = vec[sl].reshape(t.shape).copy()

    def copy(self) -> "UNetParams":
        blocks = OrderedDict((n, Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n))
                             for n, t in self.blocks.items())
        return UNetParams(self.config, blocks, dict(self.tags))

    def zero_grad(self) -> None:
        for t in self.blocks.values():
            t.grad = None


def num_params(cfg: UNetConfig) -> int:
    total = 0
    for _, _, cin, cout, k, norm in layer_table(cfg):
        total += cout * cin * k * k + cout + (2 * cout if norm else 0)
    return total


def init_params(config: UNetConfig, seed: int) -> UNetParams:
    """Kaiming-uniform conv weights (leaky-ReLU gain), zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    blocks: OrderedDict[str, Tensor] = OrderedDict()
    tags: dict[str, str] = {}

    def add(name, tag, arr):
        blocks[name] = Tensor(arr, requires_grad=True, name=name)
        tags[name] = tag

    a = F.LEAKY_SLOPE
    for prefix, tag, cin, cout, k, norm in layer_table(config):
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / ((1.0 + a * a) * fan_in))
        add(f"{prefix}.conv.weight", tag, rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        add(f"{prefix}.conv.bias", tag, np.zeros(cout))
        if norm:
            add(f"{prefix}.norm.gain", tag, np.ones(cout))
            add(f"{prefix}.norm.bias", tag, np.zeros(cout))
    return UNetParams(config, blocks, tags)


def split_params(params: UNetParams) -> tuple[list[str], list[str]]:
    return params.encoder_names, params.decoder_names


def freeze(params: UNetParams, names) -> None:
    """Exclude ``names`` from gradient accumulation and optimizer updates."""
    for n in names:
        params.blocks[n].requires_grad = False
        params.blocks[n].grad = None


def _unit(params: UNetParams, prefix: str, h: Tensor, stride: int, groups: int) -> Tensor:
    w = params[f"{prefix}.conv.weight"]
    pad = w.shape[-1] // 2
    h = F.conv2d(h, w, params[f"{prefix}.conv.bias"], stride=stride, padding=pad)
    h = F.group_norm(h, groups, params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"])
    return F.leaky_relu(h)


def as_batch(x) -> Tensor:
    """Accept ``(H, W)``, ``(N, H, W)`` or ``(N, C, H, W)`` inputs."""
    if isinstance(x, Tensor):
        if x.ndim != 4:
            raise ValueError(f"tensor input must be 4-d, got {x.shape}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise ValueError(f"cannot interpret input of shape {arr.shape} as images")
    return Tensor(arr)


def forward(params: UNetParams, x) -> Tensor:
    """Network output ``(N, 1, H, W)`` in ``(0, 1)``."""
    cfg = params.config
    x = as_batch(x)
    if x.shape[1] != cfg.in_channels:
        raise ArchitectureMismatchError(f"input has {x.shape[1]} channels, network expects {cfg.in_channels}")
    cfg.check_input_size(*x.shape[2:])
    g = cfg.groups
    h = _unit(params, "inc.0", x, 1, g)
    h = _unit(params, "inc.1", h, 1, g)
    feats = [h]
    for i in range(1, cfg.scales):
        h = _unit(params, f"down{i}.0", h, 2, g)
        h = _unit(params, f"down{i}.1", h, 1, g)
        feats.append(h)
    for i in range(cfg.scales - 1, 0, -1):
        h = F.bilinear_upsample_2x(h)
        if cfg.skip_channels:
            skip = _unit(params, f"skip{i - 1}", feats[i - 1], 1, cfg.skip_groups)
            h = F.concat_channels([h, skip])
        h = _unit(params, f"up{i}.0", h, 1, g)
        h = _unit(params, f"up{i}.1", h, 1, g)
    h = F.conv2d(h, params["outc.conv.weight"], params["outc.conv.bias"])
    return F.sigmoid(h)


def predict(params: UNetParams, images) -> np.ndarray:
    """Feed-forward evaluation returning plain arrays with the input's leading shape."""
    arr = np.asarray(images, dtype=np.float64)
    # evaluate on detached copies so no graph is recorded
    frozen = UNetParams(params.config, OrderedDict((n, Tensor(t.data)) for n, t in params.items()), params.tags)
    out = forward(frozen, arr).data
    return out[0, 0] if arr.ndim == 2 else out[:, 0]


# -- checkpoint container --------------------------------------------------------

CKPT_MAGIC = b"EDIPCKPT"
CKPT_VERSION = 1
_TAG_CODES = {ENCODER: 0, DECODER: 1, "optimizer": 2}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


@dataclass
class CheckpointMeta:
    epoch: int = 0
    seed: int = 0
    val_loss: float = float("nan")
    config_hash: bytes = b""
    optimizer_step: int = 0


def save_checkpoint(path, params: UNetParams, meta: CheckpointMeta, optimizer_state=None) -> None:
    """Write params (and optionally Adam moments) to the binary container.

    Header (little-endian): magic, u32 version, u64 epoch, u64 seed, f64 val_loss,
    32-byte config hash, u64 optimizer step, u32 block count. Each block:
    u16 name length, utf-8 name, u8 tag, tensor record.
    """
    config_hash = params.config.hash()
    blocks = [(n, params.tags[n], t.data) for n, t in params.items()]
    step = 0
    if optimizer_state is not None:
        step = optimizer_state.step_count
        for n in params:
            if n in optimizer_state.first_moment:
                blocks.append((f"adam.m:{n}", "optimizer", optimizer_state.first_moment[n]))
                blocks.append((f"adam.v:{n}", "optimizer", optimizer_state.second_moment[n]))
    with open(Path(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQQd", CKPT_VERSION, int(meta.epoch), int(meta.seed), float(meta.val_loss)))
        fh.write(config_hash)
        fh.write(struct.pack("<QI", int(step), len(blocks)))
        for name, tag, arr in blocks:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", _TAG_CODES[tag]))
            write_tensor(fh, arr)
    meta.config_hash = config_hash
    meta.optimizer_step = step


def load_checkpoint(path, config: UNetConfig, with_optimizer: bool = False):
    """Load a checkpoint for ``config``; raises if it was written for another architecture.

    Returns ``(params, meta)`` or ``(params, meta, moments)`` when ``with_optimizer``;
    ``moments`` maps block name to ``(first, second)`` arrays.
    """
    with open(Path(path), "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, epoch, seed, val_loss = struct.unpack("<IQQd", fh.read(28))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config_hash = fh.read(32)
        step, count = struct.unpack("<QI", fh.read(12))
        if config_hash != config.hash():
            raise ArchitectureMismatchError(
                f"{path}: config hash {config_hash.hex()[:12]} does not match {config.hash().hex()[:12]}")
        blocks: OrderedDict[str, Tensor] = OrderedDict()
        tags: dict[str, str] = {}
        moments: dict[str, list] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (code,) = struct.unpack("<B", fh.read(1))
            arr = read_tensor(fh)
            tag = _TAG_NAMES[code]
            if tag == "optimizer":
                kind, block = name.split(":", 1)
                moments.setdefault(block, [None, None])[0 if kind == "adam.m" else 1] = arr
            else:
                blocks[name] = Tensor(arr.copy(), requires_grad=True, name=name)
                tags[name] = tag
    expected = init_params(config, 0)
    if list(blocks) != list(expected.blocks) or any(
            blocks[n].shape != expected[n].shape or tags[n] != expected.tags[n] for n in blocks):
        raise ArchitectureMismatchError(f"{path}: block layout does not match the configured architecture")
    meta = CheckpointMeta(epoch, seed, val_loss, config_hash, step)
    params = UNetParams(config, blocks, tags)
    if with_optimizer:
        return params, meta, {k: tuple(v) for k, v in moments.items()}
    return params, meta
