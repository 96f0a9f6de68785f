"""Synthetic images and simulated measurements.

Every generator is a pure function of its configuration and seed. Images
live on the ``[-1, 1]^2`` grid described in :mod:`edip.ct.geometry`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .ct import RayTransform


def pixel_centers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(x, y)`` coordinate grids; exact mirror symmetry about both axes."""
    c = (2.0 * np.arange(n) + 1.0 - n) / n
    return np.meshgrid(c, -c)


def rasterize_ellipses(ellipses, n: int, supersample: int = 1) -> np.ndarray:
    """Sum of ``value * indicator`` over ``(value, a, b, x0, y0, phi)`` tuples.

    With ``supersample > 1`` each pixel averages a ``k x k`` sub-grid.
    """
    k = supersample
    if k == 1:
        xs, ys = pixel_centers(n)
    else:
        xs, ys = pixel_centers(n * k)
    img = np.zeros(xs.shape)
    for value, a, b, x0, y0, phi in ellipses:
        c, s = math.cos(phi), math.sin(phi)
        dx, dy = xs - x0, ys - y0
        u = (dx * c + dy * s) / a
        v = (-dx * s + dy * c) / b
        img += value * (u * u + v * v <= 1.0)
    if k > 1:
        img = img.reshape(n, k, n, k).mean(axis=(1, 3))
    return img


@dataclass(frozen=True)
class EllipsesDistribution:
    count_range: tuple[int, int] = (3, 10)
    value_range: tuple[float, float] = (0.1, 1.0)
    axis_range: tuple[float, float] = (0.05, 0.4)
    center_disk_radius: float = 0.8

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad count_range {self.count_range}")
        if self.value_range[1] < self.value_range[0]:
            raise ValueError(f"bad value_range {self.value_range}")
        a0, a1 = self.axis_range
        if not (0 < a0 <= a1 <= 1):
            raise ValueError(f"axis_range must satisfy 0 < min <= max <= 1, got {self.axis_range}")
        if self.center_disk_radius < 0:
            raise ValueError("center_disk_radius must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "EllipsesDistribution":
        return cls(tuple(d["count_range"]), tuple(d["value_range"]), tuple(d["axis_range"]),
                   float(d["center_disk_radius"]))


def sample_ellipses(dist: EllipsesDistribution, rng: np.random.Generator) -> list[tuple]:
    count = int(rng.integers(dist.count_range[0], dist.count_range[1] + 1))
    out = []
    for _ in range(count):
        value = rng.uniform(*dist.value_range)
        a = rng.uniform(*dist.axis_range)
        b = rng.uniform(*dist.axis_range)
        r = dist.center_disk_radius * math.sqrt(rng.uniform())
        t = rng.uniform(0.0, 2.0 * math.pi)
        phi = rng.uniform(0.0, math.pi)
        out.append((value, a, b, r * math.cos(t), r * math.sin(t), phi))
    return out


def generate_ellipses_image(dist: EllipsesDistribution, seed: int, image_size: int = 128) -> np.ndarray:
    """Random ellipses summed and clipped to ``[0, 1]``."""
    rng = np.random.default_rng([int(seed), 0])
    img = rasterize_ellipses(sample_ellipses(dist, rng), image_size)
    return np.clip(img, 0.0, 1.0)


# (value, semi-axis a, semi-axis b, x0, y0, rotation in degrees); modified intensities
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def shepp_logan_ellipses() -> list[tuple]:
    return [(v, a, b, x, y, math.radians(deg)) for v, a, b, x, y, deg in SHEPP_LOGAN_ELLIPSES]


def shepp_logan(image_size: int = 128) -> np.ndarray:
    """The 10-ellipse Shepp-Logan head phantom rescaled to ``[0, 1]``."""
    if image_size < 16:
        raise ValueError("shepp_logan needs image_size >= 16")
    img = rasterize_ellipses(shepp_logan_ellipses(), image_size)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


# -- out-of-distribution test phantoms ---------------------------------------

def _rings_and_texture(n: int) -> np.ndarray:
    x, y = pixel_centers(n)
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    px = 2.0 / n
    img = np.zeros((n, n))
    body = r <= 0.82
    # radially banded background texture, quantised so it stays piecewise constant
    band = np.floor(6 * (1 + np.sin(9 * theta + 14 * r))) / 12.0
    img[body] = 0.35 + 0.25 * band[body]
    # thin concentric rings
    for radius in (0.82, 0.6, 0.38):
        img[np.abs(r - radius) <= 1.1 * px] = 0.95
    # lotus-style holes with bright rims at off-centre positions
    holes = [(0.0, 0.0, 0.16), (0.49, 0.1, 0.07), (-0.3, 0.38, 0.09), (-0.4, -0.35, 0.06),
             (0.22, -0.48, 0.08), (0.15, 0.48, 0.05)]
    for hx, hy, hr in holes:
        d = np.hypot(x - hx, y - hy)
        img[d <= hr] = 0.0
        img[np.abs(d - hr) <= 0.9 * px] = 1.0
    # curved crescents cut into the body
    crescent = (np.abs(np.hypot(x - 0.1, y + 0.05) - 0.7) <= 1.5 * px) & (y > 0.2)
    img[crescent] = 0.1
    return np.clip(img, 0.0, 1.0)


def _voronoi_cells(n: int, num_cells: int = 28, seed: int = 20211) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x, y = pixel_centers(n)
    rad = 0.85 * np.sqrt(rng.uniform(size=num_cells))
    ang = rng.uniform(0, 2 * np.pi, size=num_cells)
    cx, cy = rad * np.cos(ang), rad * np.sin(ang)
    values = rng.uniform(0.2, 0.75, size=num_cells)
    d = np.hypot(x[..., None] - cx, y[..., None] - cy)
    order = np.argsort(d, axis=-1)
    nearest = order[..., 0]
    d_sorted = np.take_along_axis(d, order[..., :2], axis=-1)
    img = values[nearest]
    wall = (d_sorted[..., 1] - d_sorted[..., 0]) <= 1.6 * (2.0 / n)
    img[wall] = 1.0
    r = np.hypot(x, y)
    # wavy shell boundary
    shell = 0.88 + 0.04 * np.sin(7 * np.arctan2(y, x))
    img[r > shell] = 0.0
    img[np.abs(r - shell) <= 1.2 * (2.0 / n)] = 0.9
    return np.clip(img, 0.0, 1.0)


TEST_PHANTOM_KINDS = {"rings-and-texture": _rings_and_texture, "voronoi-cells": _voronoi_cells}


def test_phantom(kind: str, image_size: int = 128) -> np.ndarray:
    """Deterministic phantoms outside the ellipses image class."""
    try:
        fn = TEST_PHANTOM_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown test phantom {kind!r}; choose from {sorted(TEST_PHANTOM_KINDS)}") from None
    return fn(image_size)


test_phantom.__test__ = False  # keep pytest from collecting it


# -- measurements ---------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    relative_stddev: float = 0.05
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unsupported noise kind {self.kind!r}")
        if self.relative_stddev < 0:
            raise ValueError("relative_stddev must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "relative_stddev": self.relative_stddev}

    @classmethod
    def from_dict(cls, d) -> "NoiseModel":
        return cls(float(d["relative_stddev"]), d.get("kind", "gaussian"))


def noise_realization(shape, sigma: float, seed: int) -> np.ndarray:
    return sigma * np.random.default_rng([int(seed), 1]).standard_normal(shape)


def simulate_measurement(op: RayTransform, image, noise: NoiseModel, seed: int):
    """Return ``(y_delta, fbp)`` with ``y_delta = A x + eta``.

    ``eta`` is i.i.d. Gaussian with standard deviation ``relative_stddev * mean(A x)``.
    """
    clean = op.forward(image)
    sigma = noise.relative_stddev * float(np.mean(clean))
    y = clean + noise_realization(clean.shape, sigma, seed) if sigma > 0 else clean.copy()
    return y, op.fbp(y)


@dataclass
class SampleRecord:
    ground_truth: np.ndarray
    sinogram: np.ndarray
    fbp: np.ndarray
    seed: int


SPLITS = {"train": 0, "val": 1, "validation": 1}
DESK_TRAIN_PER_EPOCH = 3200
DESK_VAL_PER_EPOCH = 320


def record_seed(split_seed: int, split: str, index: int) -> int:
    """Seed for record ``index`` of a split; the low bit keeps splits disjoint."""
    return (int(split_seed) << 40) | (int(index) << 1) | SPLITS[split]


def make_record(dist: EllipsesDistribution, op: RayTransform, noise: NoiseModel, seed: int) -> SampleRecord:
    x = generate_ellipses_image(dist, seed, op.geometry.image_size)
    y, fbp = simulate_measurement(op, x, noise, seed)
    return SampleRecord(x, y, fbp, seed)


def dataset_stream(dist: EllipsesDistribution, op: RayTransform, noise: NoiseModel,
                   split_seed: int, split: str = "train", start: int = 0) -> Iterator[SampleRecord]:
    """Infinite deterministic stream of ellipses samples for one split."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    for i in itertools.count(start):
        yield make_record(dist, op, noise, record_seed(split_seed, split, i))
