from .fbp import fan_beam_fbp, ram_lak_kernel, ramp_filter
from .geometry import (FanBeamGeometry, GeometryError, equispaced_angles, full_geometry,
                       limited_geometry, named_geometry, sparse_geometry)
from .operator import (RayTransform, build_ray_transform, load_csr, load_ray_transform,
                       ray_endpoints, save_csr, siddon_lengths)


def forward(op: RayTransform, image):
    return op.forward(image)


def adjoint(op: RayTransform, sinogram):
    return op.adjoint(sinogram)


def fbp(op: RayTransform, sinogram):
    return op.fbp(sinogram)


__all__ = [
    "FanBeamGeometry", "GeometryError", "RayTransform", "adjoint", "build_ray_transform",
    "equispaced_angles", "fan_beam_fbp", "fbp", "forward", "full_geometry", "limited_geometry",
    "load_csr", "load_ray_transform", "named_geometry", "ram_lak_kernel", "ramp_filter",
    "ray_endpoints", "save_csr", "siddon_lengths", "sparse_geometry",
]
