"""Fan-beam ray transform as an explicit sparse matrix.

Matrix entries are exact intersection lengths of each source-to-detector-pixel
line with the pixel grid (Siddon's traversal, vectorised over rays). Because
the adjoint is the literal transpose of the same matrix, ``<Ax, y> = <x, A^T y>``
holds to rounding.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .geometry import FanBeamGeometry, GeometryError

CSR_MAGIC = b"EDIPCSR"


def siddon_lengths(src: np.ndarray, dst: np.ndarray, nrows: int, ncols: int,
                   x_range=(-1.0, 1.0), y_range=(-1.0, 1.0)):
    """Intersection lengths of segments ``src[r] -> dst[r]`` with a pixel grid.

    The grid has ``nrows x ncols`` cells over ``x_range x y_range``; row 0 is
    at the top (largest y). Returns ``(ray_index, pixel_index, length)`` with
    ``pixel_index = row * ncols + col``. The segment is treated as the full
    line through both points, clipped to the grid.
    """
    src = np.atleast_2d(np.asarray(src, dtype=np.float64))
    dst = np.atleast_2d(np.asarray(dst, dtype=np.float64))
    x0, x1 = x_range
    y0, y1 = y_range
    xe = np.linspace(x0, x1, ncols + 1)
    ye = np.linspace(y0, y1, nrows + 1)
    dx = (x1 - x0) / ncols
    dy = (y1 - y0) / nrows

    d = dst - src
    length = np.hypot(d[:, 0], d[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (xe[None, :] - src[:, :1]) / d[:, :1]
        ay = (ye[None, :] - src[:, 1:]) / d[:, 1:]
    still_x = np.abs(d[:, 0]) < 1e-15 * length
    still_y = np.abs(d[:, 1]) < 1e-15 * length

    lo = np.full(len(src), -np.inf)
    hi = np.full(len(src), np.inf)
    for alphas, still, coord, (c0, c1) in ((ax, still_x, src[:, 0], x_range),
                                           (ay, still_y, src[:, 1], y_range)):
        amin = np.where(still, -np.inf, np.minimum(alphas[:, 0], alphas[:, -1]))
        amax = np.where(still, np.inf, np.maximum(alphas[:, 0], alphas[:, -1]))
        outside = still & ((coord <= c0) | (coord >= c1))
        amin = np.where(outside, np.inf, amin)
        amax = np.where(outside, -np.inf, amax)
        lo = np.maximum(lo, amin)
        hi = np.minimum(hi, amax)
    hit = hi > lo
    ax[still_x] = np.nan
    ay[still_y] = np.nan

    alphas = np.concatenate([ax, ay, lo[:, None], hi[:, None]], axis=1)
    inside = (alphas >= lo[:, None]) & (alphas <= hi[:, None]) & hit[:, None]
    alphas = np.where(inside, alphas, np.where(hit, hi, 0.0)[:, None])
    alphas.sort(axis=1)
    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    mx = src[:, :1] + mid * d[:, :1]
    my = src[:, 1:] + mid * d[:, 1:]
    col = np.floor((mx - x0) / dx).astype(np.int64)
    row = np.floor((y1 - my) / dy).astype(np.int64)
    seg_len = seg * length[:, None]
    keep = (seg_len > 1e-12 * max(dx, dy)) & (col >= 0) & (col < ncols) & (row >= 0) & (row < nrows)
    ray_idx = np.broadcast_to(np.arange(len(src))[:, None], seg.shape)[keep]
    return ray_idx, (row * ncols + col)[keep], seg_len[keep]


def ray_endpoints(geometry: FanBeamGeometry):
    """Source and detector-pixel-centre coordinates for every measurement row."""
    lam = geometry.angle_list
    e = np.stack([np.cos(lam), np.sin(lam)], axis=1)
    u = np.stack([-np.sin(lam), np.cos(lam)], axis=1)
    t = geometry.detector_offsets()
    src = np.repeat(geometry.source_radius * e, geometry.num_detector_pixels, axis=0)
    det = (-geometry.detector_radius * e)[:, None, :] + t[None, :, None] * u[:, None, :]
    return src, det.reshape(-1, 2)


class RayTransform:
    """Sparse fan-beam projector ``A`` with its exact transpose and FBP."""

    def __init__(self, geometry: FanBeamGeometry, matrix: sp.csr_matrix):
        n = geometry.image_size
        if matrix.shape != (geometry.num_measurements, n * n):
            raise ValueError(f"matrix shape {matrix.shape} does not match geometry "
                             f"({geometry.num_measurements}, {n * n})")
        self.geometry = geometry
        self.matrix = matrix.tocsr()
        self._matrix_t = self.matrix.T.tocsr()

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.geometry.image_size, self.geometry.image_size)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.geometry.num_angles, self.geometry.num_detector_pixels)

    def forward(self, image) -> np.ndarray:
        """Sinogram(s) of shape ``(..., angles, detectors)`` for image(s) ``(..., n, n)``."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape[-2:] != self.image_shape:
            raise ValueError(f"forward: image shape {image.shape[-2:]} != {self.image_shape}")
        lead = image.shape[:-2]
        flat = image.reshape(-1, self.matrix.shape[1])
        out = (self.matrix @ flat.T).T
        return out.reshape(lead + self.sinogram_shape)

    def adjoint(self, sinogram) -> np.ndarray:
        sinogram = np.asarray(sinogram, dtype=np.float64)
        if sinogram.shape[-2:] != self.sinogram_shape:
            raise ValueError(f"adjoint: sinogram shape {sinogram.shape[-2:]} != {self.sinogram_shape}")
        lead = sinogram.shape[:-2]
        flat = sinogram.reshape(-1, self.matrix.shape[0])
        out = (self._matrix_t @ flat.T).T
        return out.reshape(lead + self.image_shape)

    def fbp(self, sinogram) -> np.ndarray:
        from .fbp import fan_beam_fbp
        return fan_beam_fbp(self.geometry, sinogram)

    def save(self, path) -> None:
        save_csr(path, self.matrix)


def build_ray_transform(geometry: FanBeamGeometry, chunk: int = 2048) -> RayTransform:
    geometry.validate()
    if geometry.detector_radius <= -geometry.source_radius:
        raise GeometryError("detector lies behind the source")
    n = geometry.image_size
    src, det = ray_endpoints(geometry)
    rows, cols, vals = [], [], []
    for start in range(0, len(src), chunk):
        r, c, v = siddon_lengths(src[start:start + chunk], det[start:start + chunk], n, n)
        rows.append(r + start)
        cols.append(c)
        vals.append(v)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(geometry.num_measurements, n * n))
    matrix.sum_duplicates()
    matrix.sort_indices()
    return RayTransform(geometry, matrix)


def save_csr(path, matrix: sp.spmatrix) -> None:
    """Binary CSR: magic, u64 rows/cols/nnz, u64 offsets, u64 column indices, f64 values."""
    m = sp.csr_matrix(matrix)
    m.sort_indices()
    with open(Path(path), "wb") as fh:
        fh.write(CSR_MAGIC)
        fh.write(struct.pack("<QQQ", m.shape[0], m.shape[1], m.nnz))
        fh.write(m.indptr.astype("<u8").tobytes())
        fh.write(m.indices.astype("<u8").tobytes())
        fh.write(m.data.astype("<f8").tobytes())


def load_csr(path) -> sp.csr_matrix:
    with open(Path(path), "rb") as fh:
        magic = fh.read(len(CSR_MAGIC))
        if magic != CSR_MAGIC:
            raise ValueError(f"bad CSR magic {magic!r}")
        nrows, ncols, nnz = struct.unpack("<QQQ", fh.read(24))
        indptr = np.frombuffer(fh.read(8 * (nrows + 1)), dtype="<u8").astype(np.int64)
        indices = np.frombuffer(fh.read(8 * nnz), dtype="<u8").astype(np.int64)
        data = np.frombuffer(fh.read(8 * nnz), dtype="<f8").astype(np.float64)
    if len(data) != nnz or len(indices) != nnz:
        raise ValueError("truncated CSR file")
    return sp.csr_matrix((data, indices, indptr), shape=(nrows, ncols))


def load_ray_transform(path, geometry: FanBeamGeometry) -> RayTransform:
    return RayTransform(geometry, load_csr(path))
