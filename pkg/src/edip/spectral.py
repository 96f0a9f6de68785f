"""Randomised SVD of the linearised forward map ``theta -> A phi_theta(z)``.

Directional derivatives come from central differences, transposed products
from reverse-mode autodiff. The range finder uses Householder QR and the
small SVD uses one-sided Jacobi rotations; both are implemented here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import unet
from .ct import RayTransform
from .metrics import hoyer
from .tensor import Tensor, backward
from .tensor import functional as F
from .unet import DECODER, ENCODER, UNetParams

CHECKPOINT_TAGS = ("init", "mid", "converged")


class RankDeficientError(np.linalg.LinAlgError):
    pass


def relative_epsilon(theta: np.ndarray, omega: np.ndarray, scale: float = 1e-6) -> float:
    """Central-difference step ``scale * (1 + ||theta||) / ||omega||``."""
    norm = float(np.linalg.norm(omega))
    if norm == 0.0:
        raise ValueError("probe direction must be nonzero")
    return scale * (1.0 + float(np.linalg.norm(theta))) / norm


class LinearSurrogate:
    """``phi_theta = M theta`` composed with an optional matrix ``A``; a test fixture with known spectrum."""

    def __init__(self, M: np.ndarray, A: np.ndarray | None = None, theta=None):
        self.M = np.asarray(M, dtype=np.float64)
        self.A = None if A is None else np.asarray(A, dtype=np.float64)
        self.theta = np.zeros(self.M.shape[1]) if theta is None else np.asarray(theta, dtype=np.float64)
        self.blocks = {"theta": slice(0, self.M.shape[1])}
        self.tags = {"theta": DECODER}

    @property
    def num_params(self) -> int:
        return self.M.shape[1]

    @property
    def num_measurements(self) -> int:
        return self.M.shape[0] if self.A is None else self.A.shape[0]

    def evaluate(self, theta: np.ndarray) -> np.ndarray:
        out = self.M @ theta
        return out if self.A is None else self.A @ out

    def vjp(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return self.M.T @ (q if self.A is None else self.A.T @ q)

    def dense(self) -> np.ndarray:
        return self.M if self.A is None else self.A @ self.M


class UNetForwardMap:
    """``theta -> A phi_theta(z)`` around a read-only snapshot of ``params``."""

    def __init__(self, params: UNetParams, network_input, op: RayTransform):
        self.params = params.copy()
        self.input = np.asarray(network_input, dtype=np.float64)
        self.op = op
        self.theta = self.params.flat()
        self.blocks = self.params.block_slices()
        self.tags = dict(self.params.tags)

    @property
    def num_params(self) -> int:
        return self.theta.size

    @property
    def num_measurements(self) -> int:
        return self.op.shape[0]

    def evaluate(self, theta: np.ndarray) -> np.ndarray:
        probe = self.params.copy()
        probe.set_flat(theta)
        image = unet.predict(probe, self.input)
        return self.op.matrix @ image.ravel()

    def vjp(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).ravel()
        if q.size != self.num_measurements:
            raise ValueError(f"cotangent has {q.size} entries, expected {self.num_measurements}")
        probe = self.params.copy()
        for t in probe.blocks.values():
            t.requires_grad = True
        out = unet.forward(probe, self.input)
        proj = F.sparse_matvec(self.op.matrix, F.reshape(out, (-1,)))
        backward(F.sum(F.mul(proj, Tensor(q))))
        return np.concatenate([(t.grad if t.grad is not None else np.zeros(t.shape)).ravel()
                               for t in probe.blocks.values()])


def jvp(fmap, omega, epsilon: float | None = None) -> np.ndarray:
    """Central difference ``(f(theta + eps w) - f(theta - eps w)) / (2 eps)``."""
    omega = np.asarray(omega, dtype=np.float64)
    eps = relative_epsilon(fmap.theta, omega) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    out = (fmap.evaluate(fmap.theta + eps * omega) - fmap.evaluate(fmap.theta - eps * omega)) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite directional derivative (epsilon={eps:g})")
    return out


def vjp(fmap, cotangent) -> np.ndarray:
    return fmap.vjp(cotangent)


# -- dense linear algebra kernels ------------------------------------------------

def householder_qr(a: np.ndarray, rank_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of an ``m x l`` matrix (``m >= l``) by Householder reflections.

    Raises :class:`RankDeficientError` when a diagonal of ``R`` vanishes relative to the largest one.
    """
    r = np.array(a, dtype=np.float64)
    m, l = r.shape
    if m < l:
        raise ValueError(f"householder_qr needs rows >= columns, got {r.shape}")
    vs = []
    for k in range(l):
        x = r[k:, k]
        alpha = -math.copysign(float(np.linalg.norm(x)), x[0] if x[0] != 0 else 1.0)
        v = x.copy()
        v[0] -= alpha
        vn = float(np.linalg.norm(v))
        if vn > 0:
            v /= vn
            r[k:, k:] -= 2.0 * np.outer(v, v @ r[k:, k:])
        vs.append(v)
    diag = np.abs(np.diag(r[:l]))
    if diag.max() == 0 or np.any(diag <= rank_tol * diag.max()):
        raise RankDeficientError("range finder produced a rank-deficient basis")
    q = np.eye(m, l)
    for k in range(l - 1, -1, -1):
        v = vs[k]
        q[k:, :] -= 2.0 * np.outer(v, v @ q[k:, :])
    return q, np.triu(r[:l])


def jacobi_svd(b: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """SVD of a wide ``l x p`` matrix by one-sided Jacobi rotations on the columns of ``b.T``.

    Returns ``(u, s, vt)`` with singular values descending.
    """
    w = np.array(b, dtype=np.float64).T.copy()  # p x l
    l = w.shape[1]
    u = np.eye(l)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(l - 1):
            for j in range(i + 1, l):
                alpha = float(w[:, i] @ w[:, i])
                beta = float(w[:, j] @ w[:, j])
                gamma = float(w[:, i] @ w[:, j])
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wi, wj = w[:, i].copy(), w[:, j]
                w[:, i] = c * wi - s * wj
                w[:, j] = s * wi + c * wj
                ui, uj = u[:, i].copy(), u[:, j]
                u[:, i] = c * ui - s * uj
                u[:, j] = s * ui + c * uj
        if not rotated:
            break
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, u = sigma[order], w[:, order], u[:, order]
    safe = np.where(sigma > 0, sigma, 1.0)
    return u, sigma, (w / safe).T


# -- randomised SVD --------------------------------------------------------------

@dataclass(frozen=True)
class RsvdConfig:
    rank: int = 100
    oversampling: int = 5
    fd_scale: float = 1e-6  # epsilon = fd_scale * (1 + ||theta||) / ||omega||; larger steps cross activation kinks
    probe_seed: int = 0
    power_iterations: int = 0  # subspace iterations with F' F'^T; 0 is the plain range finder

    def __post_init__(self):
        if self.rank < 1 or self.oversampling < 0 or not self.fd_scale > 0 or self.power_iterations < 0:
            raise ValueError("RsvdConfig needs rank >= 1, oversampling >= 0, fd_scale > 0, power_iterations >= 0")

    @property
    def num_probes(self) -> int:
        return self.rank + self.oversampling


@dataclass
class SpectralReport:
    singular_values: np.ndarray
    right_singular_vectors: np.ndarray  # rank x p, unit rows
    block_names: list[str]
    block_tags: list[str]
    block_mass: np.ndarray  # rank x blocks, rows sum to 1
    hoyer_per_vector: np.ndarray
    checkpoint_tag: str = "init"
    q_orthogonality: float = field(default=math.nan)

    def write_sigma_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "sigma"])
            for i, s in enumerate(self.singular_values):
                w.writerow([i, repr(float(s))])

    def write_block_mass_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["vector_index", "block", "mass"])
            for i, row in enumerate(self.block_mass):
                for name, m in zip(self.block_names, row):
                    w.writerow([i, name, repr(float(m))])


def block_masses(vectors: np.ndarray, blocks: dict[str, slice]) -> np.ndarray:
    vectors = np.atleast_2d(vectors)
    sq = vectors ** 2
    mass = np.stack([sq[:, sl].sum(axis=1) for sl in blocks.values()], axis=1)
    return mass / mass.sum(axis=1, keepdims=True)


def _apply_jvp(fmap, directions: np.ndarray, fd_scale: float) -> np.ndarray:
    out = np.empty((fmap.num_measurements, directions.shape[1]))
    for j in range(directions.shape[1]):
        col = directions[:, j]
        out[:, j] = jvp(fmap, col, relative_epsilon(fmap.theta, col, fd_scale))
    return out


def _apply_vjp(fmap, cotangents: np.ndarray) -> np.ndarray:
    return np.stack([fmap.vjp(cotangents[:, j]) for j in range(cotangents.shape[1])], axis=1)


def rsvd(fmap, config: RsvdConfig, checkpoint_tag: str = "init") -> SpectralReport:
    """Top-``rank`` singular values and right vectors of the Jacobian of ``fmap``."""
    p, m = fmap.num_params, fmap.num_measurements
    l = config.num_probes
    if l > min(m, p):
        raise ValueError(f"rank + oversampling = {l} exceeds min(m, p) = {min(m, p)}")
    omega = np.random.default_rng(config.probe_seed).standard_normal((p, l))
    q, _ = householder_qr(_apply_jvp(fmap, omega, config.fd_scale))
    for _ in range(config.power_iterations):
        w, _ = householder_qr(_apply_vjp(fmap, q))
        q, _ = householder_qr(_apply_jvp(fmap, w, config.fd_scale))
    bt = _apply_vjp(fmap, q)
    _, sigma, vt = jacobi_svd(bt.T)
    k = config.rank
    vt = vt[:k]
    names = list(fmap.blocks)
    return SpectralReport(
        singular_values=sigma[:k].copy(),
        right_singular_vectors=vt,
        block_names=names,
        block_tags=[fmap.tags[n] for n in names],
        block_mass=block_masses(vt, fmap.blocks),
        hoyer_per_vector=np.array([hoyer(v) for v in vt]),
        checkpoint_tag=checkpoint_tag,
        q_orthogonality=float(np.max(np.abs(q.T @ q - np.eye(l)))),
    )


def explicit_jacobian(fmap) -> np.ndarray:
    """Dense ``m x p`` Jacobian assembled row by row from products with unit cotangents."""
    m = fmap.num_measurements
    return np.stack([fmap.vjp(np.eye(1, m, i).ravel()) for i in range(m)])


@dataclass
class BlockHistogram:
    group: str
    vector_indices: list[int]
    mean_mass: dict[str, float]
    tag_mass: dict[str, float]
    mean_hoyer: float


def block_histogram(report: SpectralReport, leading: int = 20, trailing: int = 20) -> list[BlockHistogram]:
    """Mean per-block mass and mean Hoyer for the leading and trailing singular vectors."""
    k = len(report.singular_values)
    groups = [("leading", list(range(min(leading, k))))]
    if trailing:
        groups.append(("trailing", list(range(max(0, k - trailing), k))))
    out = []
    for name, idx in groups:
        mass = report.block_mass[idx].mean(axis=0)
        per_block = dict(zip(report.block_names, map(float, mass)))
        tags = {ENCODER: 0.0, DECODER: 0.0}
        for tag, m in zip(report.block_tags, mass):
            tags[tag] += float(m)
        out.append(BlockHistogram(name, idx, per_block, tags, float(report.hoyer_per_vector[idx].mean())))
    return out


def write_histogram_csv(path, hists: list[BlockHistogram]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "block", "mean_mass"])
        for h in hists:
            for block, m in h.mean_mass.items():
                w.writerow([h.group, block, repr(m)])
        for h in hists:
            w.writerow([h.group, "mean_hoyer", repr(h.mean_hoyer)])
