"""Versioned JSON experiment configuration."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..ct import FanBeamGeometry, named_geometry
from ..dip import DipConfig, StopRule
from ..phantoms import EllipsesDistribution, NoiseModel
from ..pretrain import PretrainConfig
from ..spectral import RsvdConfig
from ..tensor import LearningRateSchedule
from ..unet import UNetConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class MethodSpec:
    """One fine-tuning variant; ``init`` is ``random`` or ``pretrained`` (the selected checkpoint)."""

    input_mode: str = "noise"
    init: str = "random"
    freeze_encoder: bool = False
    gamma_prime: float = 1e-4
    lr_schedule: LearningRateSchedule = field(default_factory=lambda: LearningRateSchedule.constant(1e-4))
    max_iters: int = 1000
    eval_every: int = 10
    stop_rule: StopRule | None = None

    def __post_init__(self):
        if self.init not in ("random", "pretrained"):
            raise ConfigError(f"method init must be 'random' or 'pretrained', got {self.init!r}")
        if self.freeze_encoder and self.init != "pretrained":
            raise ConfigError("freeze_encoder requires init='pretrained'")

    @property
    def seed_invariant(self) -> bool:
        """Deterministic input and initialisation: every seed yields the same run."""
        return self.input_mode == "fbp" and self.init == "pretrained"

    def dip_config(self, unet: UNetConfig, seed: int, checkpoint: str | None = None) -> DipConfig:
        return DipConfig(
            input_mode=self.input_mode,
            init_mode="checkpoint" if self.init == "pretrained" else "random",
            checkpoint=checkpoint, seed=seed, freeze_encoder=self.freeze_encoder,
            gamma_prime=self.gamma_prime, lr_schedule=self.lr_schedule, max_iters=self.max_iters,
            stop_rule=self.stop_rule, eval_every=self.eval_every, unet=unet)

    def to_dict(self) -> dict:
        return {"input_mode": self.input_mode, "init": self.init, "freeze_encoder": self.freeze_encoder,
                "gamma_prime": self.gamma_prime, "lr_schedule": self.lr_schedule.to_dict(),
                "max_iters": self.max_iters, "eval_every": self.eval_every,
                "stop_rule": None if self.stop_rule is None else self.stop_rule.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "MethodSpec":
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = LearningRateSchedule.from_dict(d["lr_schedule"])
        if d.get("stop_rule") is not None:
            d["stop_rule"] = StopRule.from_dict(d["stop_rule"])
        return cls(**d)


@dataclass
class ExperimentConfig:
    name: str = "desk"
    geometry: FanBeamGeometry = field(default_factory=lambda: named_geometry("sparse20", 64))
    ellipses: EllipsesDistribution = field(default_factory=EllipsesDistribution)
    noise: NoiseModel = field(default_factory=NoiseModel)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(channels=16))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pretrain_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    validation_methods: dict[str, MethodSpec] = field(default_factory=dict)
    validation_seeds: list[int] = field(default_factory=lambda: [0])
    methods: dict[str, MethodSpec] = field(default_factory=dict)
    baseline_method: str = "dip_noise"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    test_phantom: str = "rings-and-texture"
    measurement_seed: int = 0
    tail_fraction: float = 1 / 6
    rise_margin: float = 0.1
    selection_margin: float = 0.25
    tv_baseline: dict | None = None  # {"gamma_prime", "lr", "iters", "eval_every"}
    spectral: dict = field(default_factory=lambda: {"rank": 20, "oversampling": 5, "power_iterations": 0,
                                                    "probe_seed": 0, "mid_iters": 100,
                                                    "methods": ["dip_noise", "edip_fbp"]})
    record_wall_time: bool = False
    workers: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        if self.unet.in_channels != 1:
            raise ConfigError("experiments use single-channel networks")
        if self.pretrain.unet != self.unet:
            self.pretrain = PretrainConfig.from_dict({**self.pretrain.to_dict(), "unet": self.unet.to_dict()})
        if self.methods and self.baseline_method not in self.methods:
            raise ConfigError(f"baseline_method {self.baseline_method!r} is not among the methods")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.unet.check_input_size(self.geometry.image_size, self.geometry.image_size)

    def to_dict(self) -> dict:
        pre = self.pretrain.to_dict()
        for k in ("unet", "ellipses", "noise", "seed"):
            pre.pop(k)
        return {
            "version": CONFIG_VERSION, "name": self.name, "geometry": self.geometry.to_dict(),
            "ellipses": self.ellipses.to_dict(), "noise": self.noise.to_dict(), "unet": self.unet.to_dict(),
            "pretrain": pre, "pretrain_seeds": list(self.pretrain_seeds),
            "validation_methods": {k: v.to_dict() for k, v in self.validation_methods.items()},
            "validation_seeds": list(self.validation_seeds),
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "baseline_method": self.baseline_method, "seeds": list(self.seeds),
            "test_phantom": self.test_phantom, "measurement_seed": self.measurement_seed,
            "tail_fraction": self.tail_fraction, "rise_margin": self.rise_margin,
            "selection_margin": self.selection_margin, "tv_baseline": copy.deepcopy(self.tv_baseline),
            "spectral": copy.deepcopy(self.spectral), "record_wall_time": self.record_wall_time,
            "workers": self.workers, "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = copy.deepcopy(dict(d))
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        try:
            geom = d.pop("geometry")
            if "preset" in geom:
                geometry = named_geometry(geom["preset"], int(geom.get("image_size", 64)))
            else:
                geometry = FanBeamGeometry.from_dict(geom)
            ellipses = EllipsesDistribution.from_dict(d.pop("ellipses")) if "ellipses" in d else EllipsesDistribution()
            noise = NoiseModel.from_dict(d.pop("noise")) if "noise" in d else NoiseModel()
            unet = UNetConfig.from_dict(d.pop("unet")) if "unet" in d else UNetConfig(channels=16)
            pre = d.pop("pretrain", {})
            base = PretrainConfig(ellipses=ellipses, noise=noise, unet=unet).to_dict()
            base.update(pre)
            pretrain = PretrainConfig.from_dict(base)
            methods = {k: MethodSpec.from_dict(v) for k, v in d.pop("methods", {}).items()}
            vmethods = {k: MethodSpec.from_dict(v) for k, v in d.pop("validation_methods", {}).items()}
            return cls(geometry=geometry, ellipses=ellipses, noise=noise, unet=unet, pretrain=pretrain,
                       methods=methods, validation_methods=vmethods, **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Digest of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def rsvd_config(self) -> RsvdConfig:
        s = self.spectral
        return RsvdConfig(rank=int(s.get("rank", 20)), oversampling=int(s.get("oversampling", 5)),
                          probe_seed=int(s.get("probe_seed", 0)),
                          power_iterations=int(s.get("power_iterations", 0)))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.to_json())
