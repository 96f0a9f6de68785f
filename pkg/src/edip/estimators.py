"""Estimator-style wrappers (``fit`` / ``transform`` / ``predict`` / ``get_params``)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import unet
from .baselines import baseline_tv_reconstruct
from .ct import FanBeamGeometry, RayTransform, build_ray_transform, named_geometry
from .dip import DipConfig, reconstruct, warmup_schedule
from .phantoms import EllipsesDistribution, NoiseModel
from .pretrain import PretrainConfig, pretrain
from .spectral import RsvdConfig, UNetForwardMap, rsvd
from .tensor import LearningRateSchedule
from .unet import UNetConfig


def check_images(x, image_size: int | None = None) -> np.ndarray:
    """Return ``x`` as a float64 ``(N, n, n)`` stack; accepts a single ``(n, n)`` image."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected square image(s) of shape (n, n) or (N, n, n), got {arr.shape}")
    if image_size is not None and arr.shape[1] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or Inf")
    return arr


def check_sinograms(y, op: RayTransform) -> np.ndarray:
    """Return ``y`` as a float64 ``(N, angles, detectors)`` stack; flat vectors are reshaped."""
    arr = np.asarray(y, dtype=np.float64)
    shape = op.sinogram_shape
    if arr.ndim == 1 and arr.size == op.shape[0]:
        arr = arr.reshape(shape)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != shape:
        raise ValueError(f"expected sinogram(s) of shape {shape}, got {np.shape(y)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("sinograms contain NaN or Inf")
    return arr


def resolve_geometry(geometry, image_size: int) -> FanBeamGeometry:
    if isinstance(geometry, FanBeamGeometry):
        return geometry
    if isinstance(geometry, dict):
        return FanBeamGeometry.from_dict(geometry)
    return named_geometry(str(geometry), image_size)


class _OperatorMixin:
    def _build_operator(self) -> RayTransform:
        geom = resolve_geometry(self.geometry, self.image_size)
        cached = getattr(self, "operator_", None)
        if cached is None or cached.geometry != geom:
            self.operator_ = build_ray_transform(geom)
        return self.operator_


class FBPReconstructor(_OperatorMixin, TransformerMixin, BaseEstimator):
    """Filtered back-projection as a stateless transformer."""

    def __init__(self, geometry="sparse20", image_size: int = 128):
        self.geometry = geometry
        self.image_size = image_size

    def fit(self, X=None, y=None):
        self._build_operator()
        return self

    def transform(self, X):
        check_is_fitted(self, "operator_")
        sino = check_sinograms(X, self.operator_)
        return self.operator_.fbp(sino)

    def project(self, images):
        """Forward projection of ``(N, n, n)`` images."""
        check_is_fitted(self, "operator_")
        return self.operator_.forward(check_images(images, self.image_size))


class TVReconstructor(_OperatorMixin, TransformerMixin, BaseEstimator):
    """TV-regularised least squares optimised over pixels with Adam."""

    def __init__(self, geometry="sparse20", image_size: int = 128, gamma_prime: float = 1e-4,
                 lr: float = 5e-4, iters: int = 5000):
        self.geometry = geometry
        self.image_size = image_size
        self.gamma_prime = gamma_prime
        self.lr = lr
        self.iters = iters

    def fit(self, X, y=None):
        """Reconstruct the first sinogram in ``X``; ``y`` is an optional ground truth for PSNR logging."""
        op = self._build_operator()
        sino = check_sinograms(X, op)[0]
        gt = None if y is None else check_images(y, self.image_size)[0]
        self.reconstruction_, self.history_ = baseline_tv_reconstruct(
            op, sino, self.gamma_prime, self.lr, self.iters, ground_truth=gt)
        return self

    def transform(self, X):
        op = self._build_operator()
        return np.stack([baseline_tv_reconstruct(op, s, self.gamma_prime, self.lr, self.iters)[0]
                         for s in check_sinograms(X, op)])

    def predict(self, X=None):
        check_is_fitted(self, "reconstruction_")
        return self.reconstruction_


class DeepImagePrior(_OperatorMixin, BaseEstimator):
    """DIP / EDIP fine-tuning on a single measurement.

    ``checkpoint=None`` gives DIP from a random initialisation; a checkpoint path gives EDIP,
    optionally with ``freeze_encoder``. ``warmup`` switches to the 5e-4 to 1e-4 warm-down
    schedule over ``warmup_iters`` steps.
    """

    def __init__(self, geometry="sparse20", image_size: int = 128, input_mode: str = "noise",
                 checkpoint: str | None = None, freeze_encoder: bool = False, gamma_prime: float = 1e-4,
                 lr: float = 1e-4, warmup: bool = False, warmup_iters: int = 5000, max_iters: int = 1000,
                 eval_every: int = 10, seed: int = 0, scales: int = 4, channels: int = 32,
                 skip_channels: int = 4, groups: int = 8):
        self.geometry = geometry
        self.image_size = image_size
        self.input_mode = input_mode
        self.checkpoint = checkpoint
        self.freeze_encoder = freeze_encoder
        self.gamma_prime = gamma_prime
        self.lr = lr
        self.warmup = warmup
        self.warmup_iters = warmup_iters
        self.max_iters = max_iters
        self.eval_every = eval_every
        self.seed = seed
        self.scales = scales
        self.channels = channels
        self.skip_channels = skip_channels
        self.groups = groups

    def unet_config(self) -> UNetConfig:
        return UNetConfig(scales=self.scales, channels=self.channels, skip_channels=self.skip_channels,
                          groups=self.groups)

    def dip_config(self) -> DipConfig:
        sched = (warmup_schedule(transition_iters=self.warmup_iters) if self.warmup
                 else LearningRateSchedule.constant(self.lr))
        return DipConfig(input_mode=self.input_mode,
                         init_mode="checkpoint" if self.checkpoint else "random",
                         checkpoint=self.checkpoint, seed=self.seed, freeze_encoder=self.freeze_encoder,
                         gamma_prime=self.gamma_prime, lr_schedule=sched, max_iters=self.max_iters,
                         eval_every=self.eval_every, unet=self.unet_config())

    def fit(self, X, y=None):
        """Fit the network to sinogram ``X``; ``y`` is an optional ground truth for PSNR logging."""
        op = self._build_operator()
        sino = check_sinograms(X, op)[0]
        gt = None if y is None else check_images(y, self.image_size)[0]
        result = reconstruct(self.dip_config(), op, sino, ground_truth=gt)
        self.history_ = result.history
        self.reconstruction_ = result.min_loss_output
        self.final_output_ = result.final_output
        self.params_ = result.params
        return self

    def predict(self, X=None):
        """Minimum-loss reconstruction of the fitted measurement."""
        check_is_fitted(self, "reconstruction_")
        return self.reconstruction_

    def fit_predict(self, X, y=None):
        return self.fit(X, y).predict()


class UNetPretrainer(_OperatorMixin, BaseEstimator):
    """Supervised pretraining on simulated ellipses; ``predict`` maps FBP images to reconstructions."""

    def __init__(self, geometry="sparse20", image_size: int = 128, epochs: int = 20,
                 samples_per_epoch: int = 3200, val_samples: int = 320, batch_size: int = 16,
                 lr: float = 1e-3, checkpoint_every_epochs: int = 20, seed: int = 0,
                 relative_noise: float = 0.05, scales: int = 4, channels: int = 32, skip_channels: int = 4,
                 groups: int = 8, out_dir: str | None = None):
        self.geometry = geometry
        self.image_size = image_size
        self.epochs = epochs
        self.samples_per_epoch = samples_per_epoch
        self.val_samples = val_samples
        self.batch_size = batch_size
        self.lr = lr
        self.checkpoint_every_epochs = checkpoint_every_epochs
        self.seed = seed
        self.relative_noise = relative_noise
        self.scales = scales
        self.channels = channels
        self.skip_channels = skip_channels
        self.groups = groups
        self.out_dir = out_dir

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.epochs, samples_per_epoch=self.samples_per_epoch, val_samples=self.val_samples,
            batch_size=self.batch_size, lr_schedule=LearningRateSchedule.constant(self.lr),
            checkpoint_every_epochs=self.checkpoint_every_epochs, seed=self.seed,
            ellipses=EllipsesDistribution(), noise=NoiseModel(self.relative_noise),
            unet=UNetConfig(scales=self.scales, channels=self.channels, skip_channels=self.skip_channels,
                            groups=self.groups))

    def fit(self, X=None, y=None):
        """Train on the simulated stream; ``X``/``y`` are ignored (data are generated on the fly)."""
        op = self._build_operator()
        self.record_ = pretrain(self.pretrain_config(), op, self.out_dir)
        self.params_ = self.record_.params
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        imgs = check_images(X, self.image_size)
        out = unet.predict(self.params_, imgs)
        return out[0] if np.ndim(X) == 2 else out


class JacobianSpectrum(BaseEstimator):
    """Randomised SVD of ``theta -> A phi_theta(z)`` at fixed parameters.

    ``fit(z)`` takes the network input; ``transform(v)`` projects parameter-space
    vectors onto the leading right singular vectors.
    """

    def __init__(self, params=None, operator=None, rank: int = 100, oversampling: int = 5,
                 power_iterations: int = 0, probe_seed: int = 0, checkpoint_tag: str = "init"):
        self.params = params
        self.operator = operator
        self.rank = rank
        self.oversampling = oversampling
        self.power_iterations = power_iterations
        self.probe_seed = probe_seed
        self.checkpoint_tag = checkpoint_tag

    def fit(self, X, y=None):
        if self.params is None or self.operator is None:
            raise ValueError("JacobianSpectrum needs params and operator")
        fmap = UNetForwardMap(self.params, X, self.operator)
        cfg = RsvdConfig(rank=self.rank, oversampling=self.oversampling, probe_seed=self.probe_seed,
                         power_iterations=self.power_iterations)
        self.report_ = rsvd(fmap, cfg, self.checkpoint_tag)
        self.singular_values_ = self.report_.singular_values
        self.components_ = self.report_.right_singular_vectors
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        v = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if v.shape[1] != self.components_.shape[1]:
            raise ValueError(f"expected vectors of length {self.components_.shape[1]}, got {v.shape[1]}")
        return v @ self.components_.T
