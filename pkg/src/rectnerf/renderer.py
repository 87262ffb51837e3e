"""Volume compositing and full-image rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import compositing_weights
from .geometry import CameraIntrinsics, CameraPose, RayBatch, generate_rays, image_pixels


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,) expected distance along the ray
    weights: torch.Tensor  # (R, N)
    transmittance: torch.Tensor  # (R, N)
    opacity: torch.Tensor  # (R,)


@dataclass
class RenderedImage:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) camera-frame depth
    opacity: np.ndarray  # (H, W)


def composite(sigma, colors, z, strict_delta=False, white_background=False) -> RenderOutput:
    """Alpha-composite per-sample colors front to back.

    ``sigma`` and ``z`` are ``(R, N)``, ``colors`` ``(R, N, 3)``.  Rays that do
    not saturate show black, or white with ``white_background``.
    """
    weights, transmittance = compositing_weights(sigma, z, strict_delta)
    color = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    if white_background:
        color = color + (1.0 - opacity).unsqueeze(-1)
    depth = (weights * z).sum(dim=-1)
    return RenderOutput(color, depth, weights, transmittance, opacity)


#: Chunks are padded to a multiple of this many rays.  Matrix kernels then
#: see the same tiling whatever the chunk size, which keeps results bitwise
#: independent of ``chunk_size``.
RAY_BLOCK = 64


def _pad_rays(rays: RayBatch, block: int) -> RayBatch:
    extra = -len(rays) % block
    if not extra:
        return rays
    idx = torch.cat([torch.arange(len(rays)), torch.full((extra,), len(rays) - 1)])
    return rays[idx]


def render_image(model, views, intrinsics: CameraIntrinsics, pose: CameraPose, near: float, far: float,
                 chunk_size: int = 1024, ref: int = 0, context=None) -> RenderedImage:
    """Render a full target image from source ``views``.

    Source features and the geometry volume are computed once; target rays
    are then evaluated ``chunk_size`` at a time.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if context is None:
                context = model.encode(views, ref)
            h, w = intrinsics.height, intrinsics.width
            rays = generate_rays(intrinsics, pose, image_pixels(h, w), near, far, dtype=model.dtype)
            axis = torch.as_tensor(pose.R[2], dtype=model.dtype)
            colors, depths, opacities = [], [], []
            for start in range(0, len(rays), chunk_size):
                chunk = rays[start : start + chunk_size]
                n = len(chunk)
                out, _ = model.render_rays(_pad_rays(chunk, RAY_BLOCK), context)
                colors.append(out.color[:n])
                depths.append(out.depth[:n] * (chunk.directions @ axis))
                opacities.append(out.opacity[:n])
    finally:
        model.train(was_training)
    return RenderedImage(
        torch.cat(colors).reshape(h, w, 3).double().numpy(),
        torch.cat(depths).reshape(h, w).double().numpy(),
        torch.cat(opacities).reshape(h, w).double().numpy(),
    )
