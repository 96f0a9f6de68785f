"""Image quality and convergence metrics.

PSNR and SSIM share one dynamic-range convention: ``max(gt) - min(gt)``.
Convergence metrics operate on traces logged on an iteration grid and
aggregated pointwise (median) across repeated runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(reconstruction, ground_truth) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(reconstruction, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if x.shape != gt.shape:
        raise ValueError(f"shape mismatch: reconstruction {x.shape} vs ground truth {gt.shape}")
    return x, gt


def data_range(ground_truth) -> float:
    gt = np.asarray(ground_truth)
    return float(gt.max() - gt.min())


def psnr(reconstruction, ground_truth) -> float:
    """``10 log10(range^2 / MSE)``; ``inf`` when the images are identical."""
    x, gt = _pair(reconstruction, ground_truth)
    mse = float(np.mean((x - gt) ** 2))
    if mse == 0.0:
        return math.inf
    rng = data_range(gt)
    if rng == 0.0:
        raise ValueError("psnr undefined for a constant ground truth")
    return 10.0 * math.log10(rng * rng / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ w


def ssim(reconstruction, ground_truth) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, evaluated where the window fits."""
    x, gt = _pair(reconstruction, ground_truth)
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs a 2-d image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    rng = data_range(gt) or 1.0
    c1, c2 = (SSIM_K1 * rng) ** 2, (SSIM_K2 * rng) ** 2
    w = _gaussian_window()
    mx, my = _filter_valid(x, w), _filter_valid(gt, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(gt * gt, w) - my * my
    sxy = _filter_valid(x * gt, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def hoyer(vector) -> float:
    """Sparsity in ``[0, 1]``: 0 for equal-magnitude entries, 1 for one-hot vectors."""
    v = np.asarray(vector, dtype=np.float64).ravel()
    n = v.size
    if n < 2:
        raise ValueError("hoyer needs a vector of length >= 2")
    peak = float(np.abs(v).max())
    if peak == 0.0:
        raise ValueError("hoyer undefined for the zero vector")
    # rescaled so constant and one-hot vectors give integer norms and exact 0 / 1
    u = np.abs(v) / peak
    l1 = float(u.sum())
    ratio = math.sqrt(l1 * l1 / float(np.dot(u, u)))
    root = math.sqrt(n)
    return (root - ratio) / (root - 1.0)


# -- traces ----------------------------------------------------------------------

@dataclass
class AggregatedTrace:
    iterations: np.ndarray
    median: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_runs: int
    initial: np.ndarray  # per-run value at the first grid point

    @property
    def grid_step(self) -> int:
        return int(self.iterations[1] - self.iterations[0]) if len(self.iterations) > 1 else 1


def aggregate(traces: Sequence[Sequence[float]], iterations=None) -> AggregatedTrace:
    """Pointwise median/mean/std over runs logged on a shared grid."""
    arr = np.asarray(traces, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError("traces must be a non-empty runs x grid array")
    grid = np.arange(arr.shape[1]) if iterations is None else np.asarray(iterations, dtype=np.int64)
    if grid.shape != (arr.shape[1],):
        raise ValueError("iteration grid does not match trace length")
    return AggregatedTrace(grid, np.median(arr, axis=0), arr.mean(axis=0), arr.std(axis=0),
                           arr.shape[0], arr[:, 0].copy())


def _as_trace(trace) -> AggregatedTrace:
    return trace if isinstance(trace, AggregatedTrace) else aggregate(trace)


def tail_mask(trace: AggregatedTrace, tail_fraction: float = 1 / 6, tail_iters: float | None = None) -> np.ndarray:
    """Grid points inside the trailing window; ``tail_iters`` overrides ``tail_fraction``."""
    last = trace.iterations[-1]
    if tail_iters is None:
        if not 0 < tail_fraction <= 1:
            raise ValueError("tail_fraction must be in (0, 1]")
        tail_iters = tail_fraction * (last + 1)
    return trace.iterations > last - tail_iters


def steady_psnr(trace, tail_fraction: float = 1 / 6, tail_iters: float | None = None) -> float:
    """Median of the median trace over the trailing window."""
    trace = _as_trace(trace)
    mask = tail_mask(trace, tail_fraction, tail_iters)
    if not mask.any():
        raise ValueError("steady_psnr: tail window contains no grid points")
    return float(np.median(trace.median[mask]))


def rise_time(trace, baseline_steady_psnr: float, margin: float = 0.1) -> int | None:
    """First grid iteration with median PSNR >= baseline - margin, or ``None`` if never."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    trace = _as_trace(trace)
    hits = np.flatnonzero(trace.median >= baseline_steady_psnr - margin)
    return int(trace.iterations[hits[0]]) if hits.size else None


def max_psnr(trace) -> tuple[float, int]:
    trace = _as_trace(trace)
    i = int(np.argmax(trace.median))
    return float(trace.median[i]), int(trace.iterations[i])


@dataclass
class ConvergenceSummary:
    steady_psnr: float
    rise_time: int | None
    max_psnr: float
    max_psnr_iter: int
    init_psnr: float
    grid_step: int = 1

    def row(self, method: str) -> list[str]:
        rise = "not-reached" if self.rise_time is None else str(self.rise_time)
        return [method, rise, _fmt(self.max_psnr), str(self.max_psnr_iter),
                _fmt(self.steady_psnr), _fmt(self.init_psnr)]


def summarize(trace, baseline_steady_psnr: float | None = None, margin: float = 0.1,
              tail_fraction: float = 1 / 6) -> ConvergenceSummary:
    """Summary of one method; the baseline defaults to the trace's own steady PSNR."""
    trace = _as_trace(trace)
    steady = steady_psnr(trace, tail_fraction)
    base = steady if baseline_steady_psnr is None else baseline_steady_psnr
    peak, peak_iter = max_psnr(trace)
    return ConvergenceSummary(steady, rise_time(trace, base, margin), peak, peak_iter,
                              float(np.mean(trace.initial)), trace.grid_step)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


SUMMARY_HEADER = ["method", "rise_time", "max_psnr", "max_psnr_iter", "steady_psnr", "init_psnr"]


def write_summary_csv(path, summaries: dict[str, ConvergenceSummary]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for method, s in summaries.items():
            w.writerow(s.row(method))


def read_summary_csv(path) -> dict[str, ConvergenceSummary]:
    out = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            rise = None if row["rise_time"] == "not-reached" else int(row["rise_time"])
            out[row["method"]] = ConvergenceSummary(float(row["steady_psnr"]), rise, float(row["max_psnr"]),
                                                    int(row["max_psnr_iter"]), float(row["init_psnr"]))
    return out
