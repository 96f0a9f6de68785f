"""Filtered back-projection for the flat-detector fan beam.

Cosine pre-weighting, Ram-Lak filtering in the frequency domain and
distance-weighted back-projection with linear interpolation on the detector.
"""

from __future__ import annotations

import numpy as np

from .geometry import FanBeamGeometry


def ram_lak_kernel(num: int, spacing: float) -> np.ndarray:
    """Band-limited ramp kernel sampled at ``k * spacing`` for ``k`` in ``[-num+1, num-1]``."""
    k = np.arange(-num + 1, num)
    h = np.zeros(k.shape)
    h[k == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi ** 2 * spacing ** 2 * k[odd] ** 2)
    return h


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def ramp_filter(rows: np.ndarray, spacing: float) -> np.ndarray:
    """Convolve each row with the Ram-Lak kernel via zero-padded FFT."""
    nd = rows.shape[-1]
    size = _next_pow2(2 * nd)
    kernel = ram_lak_kernel(nd, spacing)
    # circular layout: index 0 holds k=0, negative lags wrap to the end
    circ = np.zeros(size)
    circ[:nd] = kernel[nd - 1:]
    circ[size - nd + 1:] = kernel[:nd - 1]
    freq = np.fft.rfft(circ)
    padded = np.zeros(rows.shape[:-1] + (size,))
    padded[..., :nd] = rows
    out = np.fft.irfft(np.fft.rfft(padded, axis=-1) * freq, n=size, axis=-1)
    return spacing * out[..., :nd]


def fan_beam_fbp(geometry: FanBeamGeometry, sinogram, clamp: bool = True) -> np.ndarray:
    sinogram = np.asarray(sinogram, dtype=np.float64)
    if geometry.num_angles < 2:
        raise ValueError("fbp needs at least 2 projection angles")
    shape = (geometry.num_angles, geometry.num_detector_pixels)
    if sinogram.shape[-2:] != shape:
        raise ValueError(f"fbp: sinogram shape {sinogram.shape[-2:]} != {shape}")
    lead = sinogram.shape[:-2]
    sino = sinogram.reshape((-1,) + shape)

    rs, rd = geometry.source_radius, geometry.detector_radius
    mag = rs / (rs + rd)
    s = geometry.detector_offsets() * mag  # virtual detector through the rotation centre
    ds = geometry.detector_spacing * mag
    weighted = sino * (rs / np.sqrt(rs ** 2 + s ** 2))
    filtered = 0.5 * ramp_filter(weighted, ds)

    lam = geometry.angle_list
    dlam = (lam[-1] - lam[0]) / (len(lam) - 1)
    n = geometry.image_size
    c = (2.0 * np.arange(n) + 1.0 - n) / n
    px, py = np.meshgrid(c, -c)  # row 0 at y = +1
    px, py = px.ravel(), py.ravel()

    out = np.zeros((sino.shape[0], n * n))
    for a, angle in enumerate(lam):
        ca, sa = np.cos(angle), np.sin(angle)
        dist = rs - (px * ca + py * sa)
        sp_ = rs * (-px * sa + py * ca) / dist
        w = (rs / dist) ** 2
        pos = (sp_ - s[0]) / ds
        i0 = np.floor(pos).astype(np.int64)
        frac = pos - i0
        valid = (i0 >= 0) & (i0 < len(s) - 1)
        i0c = np.clip(i0, 0, len(s) - 2)
        q = filtered[:, a]
        vals = q[:, i0c] * (1.0 - frac) + q[:, i0c + 1] * frac
        out += np.where(valid, vals * w, 0.0)
    out *= dlam
    if clamp:
        np.maximum(out, 0.0, out=out)
    return out.reshape(lead + (n, n))
