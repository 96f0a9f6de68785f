"""Adam with bias correction and the two learning-rate schedules used here."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class LearningRateSchedule:
    """``constant`` or ``linear-warmdown`` learning rate as a function of step.

    For ``linear-warmdown`` the rate moves linearly from ``initial_lr`` to
    ``final_lr`` over ``transition_iters`` steps and stays at ``final_lr``.
    """

    kind: str = "constant"
    initial_lr: float = 1e-4
    final_lr: float = 1e-4
    transition_iters: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "linear-warmdown"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "linear-warmdown" and self.transition_iters <= 0:
            raise ValueError("linear-warmdown needs transition_iters > 0")

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.initial_lr
        frac = min(step / self.transition_iters, 1.0)
        return self.initial_lr + (self.final_lr - self.initial_lr) * frac

    @classmethod
    def constant(cls, lr: float) -> "LearningRateSchedule":
        return cls("constant", lr, lr, 0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "initial_lr": self.initial_lr,
                "final_lr": self.final_lr, "transition_iters": self.transition_iters}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearningRateSchedule":
        return cls(d["kind"], float(d["initial_lr"]), float(d["final_lr"]), int(d["transition_iters"]))


@dataclass
class AdamState:
    schedule: LearningRateSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Mapping[str, np.ndarray]:
    """One Adam update of ``params`` (in place); blocks absent from ``grads`` are skipped.

    Moments are allocated lazily, so frozen blocks never get optimizer state.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    lr = state.schedule(state.step_count)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p = params[name]
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


class Adam:
    """Convenience wrapper that reads ``.grad`` from named leaf tensors."""

    def __init__(self, tensors, schedule: LearningRateSchedule, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.tensors = dict(tensors)
        self.state = AdamState(schedule, beta1, beta2, epsilon)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def step(self) -> None:
        grads = {name: t.grad for name, t in self.tensors.items()
                 if t.requires_grad and t.grad is not None}
        adam_step({name: t.data for name, t in self.tensors.items()}, grads, self.state)
