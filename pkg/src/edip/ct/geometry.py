"""2-d fan-beam geometry with a flat detector.

The image occupies ``[-1, 1]^2``. Row 0 of an image array is the top edge
(``y = +1``), column 0 the left edge (``x = -1``). The source sits at
``source_radius * (cos a, sin a)`` for source angle ``a``; the detector line
is perpendicular to the central ray at distance ``detector_radius`` beyond
the rotation centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FanBeamGeometry:
    image_size: int
    angles: tuple[float, ...]
    source_radius: float = 4.0
    detector_radius: float = 2.0
    num_detector_pixels: int = 183
    detector_extent: float = field(default=0.0)

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.source_radius <= math.sqrt(2.0):
            raise GeometryError("source must lie outside the image square (source_radius > sqrt(2))")
        if self.detector_extent <= 0.0:
            object.__setattr__(self, "detector_extent",
                               covering_detector_extent(self.source_radius, self.detector_radius))
        self.validate()

    def validate(self) -> None:
        if self.image_size < 1 or self.num_detector_pixels < 1 or not self.angles:
            raise GeometryError("image_size, num_detector_pixels and the angle count must be positive")
        a = np.asarray(self.angles)
        if np.any(a < 0) or np.any(a >= 2 * math.pi):
            raise GeometryError("angles must lie in [0, 2*pi)")
        if np.any(np.diff(a) <= 0):
            raise GeometryError("angles must be strictly increasing")
        if self.source_radius <= math.sqrt(2.0):
            raise GeometryError("source must lie outside the image square (source_radius > sqrt(2))")
        if self.detector_radius <= -self.source_radius:
            raise GeometryError("detector lies behind the source")
        if self.detector_extent <= 0:
            raise GeometryError("detector_extent must be positive")

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    @property
    def angle_list(self) -> np.ndarray:
        return np.asarray(self.angles)

    @property
    def num_measurements(self) -> int:
        return self.num_angles * self.num_detector_pixels

    @property
    def pixel_size(self) -> float:
        return 2.0 / self.image_size

    @property
    def detector_spacing(self) -> float:
        return self.detector_extent / self.num_detector_pixels

    def detector_offsets(self) -> np.ndarray:
        """Signed positions of detector pixel centres along the detector line."""
        k = np.arange(self.num_detector_pixels)
        return (k + 0.5 - self.num_detector_pixels / 2.0) * self.detector_spacing

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "angles": list(self.angles),
            "source_radius": self.source_radius,
            "detector_radius": self.detector_radius,
            "num_detector_pixels": self.num_detector_pixels,
            "detector_extent": self.detector_extent,
        }

    @classmethod
    def from_dict(cls, d) -> "FanBeamGeometry":
        return cls(int(d["image_size"]), tuple(d["angles"]), float(d["source_radius"]),
                   float(d["detector_radius"]), int(d["num_detector_pixels"]),
                   float(d["detector_extent"]))


def covering_detector_extent(source_radius: float, detector_radius: float, margin: float = 1.02) -> float:
    """Detector width whose fan covers the disk circumscribing the image square."""
    half_angle = math.asin(math.sqrt(2.0) / source_radius)
    return 2.0 * margin * (source_radius + detector_radius) * math.tan(half_angle)


def equispaced_angles(num_angles: int, arc_degrees: float = 360.0) -> tuple[float, ...]:
    return tuple(np.arange(num_angles) * (math.radians(arc_degrees) / num_angles))


def default_detector_pixels(image_size: int) -> int:
    # 183 detector pixels at 128 px, scaled proportionally
    return max(8, int(round(image_size * 183 / 128)))


def sparse_geometry(image_size: int = 128, num_angles: int = 20, **kw) -> FanBeamGeometry:
    """Few angles evenly spread over the full circle (``Sparse 20`` at the default)."""
    kw.setdefault("num_detector_pixels", default_detector_pixels(image_size))
    return FanBeamGeometry(image_size, equispaced_angles(num_angles, 360.0), **kw)


def limited_geometry(image_size: int = 128, num_angles: int = 45, arc_degrees: float = 135.0,
                     **kw) -> FanBeamGeometry:
    """Angles restricted to a sub-arc (``Limited 45`` over [0, 135 deg) at the default)."""
    kw.setdefault("num_detector_pixels", default_detector_pixels(image_size))
    return FanBeamGeometry(image_size, equispaced_angles(num_angles, arc_degrees), **kw)


def full_geometry(image_size: int = 128, num_angles: int = 360, **kw) -> FanBeamGeometry:
    kw.setdefault("num_detector_pixels", default_detector_pixels(image_size))
    return FanBeamGeometry(image_size, equispaced_angles(num_angles, 360.0), **kw)


def named_geometry(name: str, image_size: int = 128, **kw) -> FanBeamGeometry:
    table = {"sparse20": lambda: sparse_geometry(image_size, 20, **kw),
             "limited45": lambda: limited_geometry(image_size, 45, 135.0, **kw),
             "full360": lambda: full_geometry(image_size, 360, **kw)}
    try:
        return table[name.lower().replace(" ", "").replace("_", "")]()
    except KeyError:
        raise GeometryError(f"unknown geometry preset {name!r}; choose from {sorted(table)}") from None
