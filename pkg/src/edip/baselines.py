"""Network-free TV-regularised reconstruction, optimised directly over the image."""

from __future__ import annotations

import math
import time

import numpy as np

from .ct import RayTransform
from .dip import NonFiniteLossError, RunHistory, StopMonitor, StopRule, image_loss
from .tensor import Adam, LearningRateSchedule, Tensor, backward


def baseline_tv_reconstruct(op: RayTransform, y_delta, gamma_prime: float = 1e-4, lr: float = 5e-4,
                            iters: int = 5000, x0=None, ground_truth=None, eval_every: int = 10,
                            stop_rule: StopRule | None = None) -> tuple[np.ndarray, RunHistory]:
    """Adam on ``(1/m)||Ax - y||^2 + gamma' TV(x)`` starting from ``x0`` (zero image by default).

    Returns the final iterate and its history; ``history.min_loss_output`` holds the best iterate.
    """
    if gamma_prime < 0:
        raise ValueError("gamma_prime must be >= 0")
    n = op.geometry.image_size
    start = np.zeros((n, n)) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(n, n)
    x = Tensor(start.copy(), requires_grad=True, name="image")
    opt = Adam({"image": x}, LearningRateSchedule.constant(lr))
    hist = RunHistory(gamma_prime=gamma_prime, eval_every=eval_every)
    monitor = StopMonitor(stop_rule) if stop_rule else None
    t0 = time.perf_counter()
    for i in range(iters + 1):
        terms = image_loss(x, op, y_delta, gamma_prime)
        value = float(terms.loss.data)
        hist.record(value, terms.data_fit, terms.tv, x.data, 1e3 * (time.perf_counter() - t0), ground_truth)
        if not math.isfinite(value):
            raise NonFiniteLossError(i, hist)
        if i == iters or (monitor is not None and monitor.update(value)):
            if i < iters:
                hist.stop_iter = i
            break
        opt.zero_grad()
        backward(terms.loss)
        opt.step()
    return x.data.copy(), hist
