"""Plane-sweep variance cost volume and the encoded geometry volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import archive
from .errors import CheckpointError, DomainError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    SweepPlaneSet,
    apply_homography,
    bilinear_sample,
    homography_matrix,
    pixel_grid,
    to_ndc,
)
from .networks import UNet3D


@dataclass
class GeometryVolume:
    """Encoded volume ``values`` of shape ``(C, D, h, w)``.

    ``intrinsics`` describe the reference camera at the volume's ``h x w``
    resolution; together with ``pose``, ``near`` and ``far`` they define the
    NDC frame (depth index ``d`` sits at NDC depth ``d / (D - 1)``).
    """

    values: torch.Tensor
    intrinsics: CameraIntrinsics
    pose: CameraPose
    near: float
    far: float

    @property
    def channels(self):
        return self.values.shape[0]


def feature_scale(view: CameraView, feature_width: int) -> int:
    scale = view.intrinsics.width // feature_width
    if scale * feature_width != view.intrinsics.width:
        raise DomainError(f"feature width {feature_width} does not divide image width {view.intrinsics.width}")
    return scale


def build_plane_sweep(features: torch.Tensor, views, ref: int, planes: SweepPlaneSet) -> torch.Tensor:
    """Warp every view's ``(C, h, w)`` features onto the reference sweep planes.

    ``features`` is ``(M, C, h, w)``; the result is ``(M, D, C, h, w)``.  The
    reference view's entries are its own features at every depth.
    """
    M, C, h, w = features.shape
    if M < 2:
        raise DomainError("a plane sweep needs at least two views")
    if not 0 <= ref < M:
        raise DomainError(f"reference index {ref} out of range for {M} views")
    scale = feature_scale(views[ref], w)
    ref_k = views[ref].intrinsics.scaled(scale)
    u, v = pixel_grid(h, w, dtype=features.dtype)
    D = len(planes.depths)
    stack = []
    for i in range(M):
        if i == ref:
            stack.append(features[i].unsqueeze(0).expand(D, C, h, w))
            continue
        src_k = views[i].intrinsics.scaled(scale)
        Hs = np.stack(
            [
                homography_matrix(src_k, views[i].pose, ref_k, views[ref].pose, z, planes.normal)
                for z in planes.depths
            ]
        )
        us, vs = apply_homography(torch.as_tensor(Hs, dtype=features.dtype), u, v)
        stack.append(bilinear_sample(features[i], us, vs).permute(0, 3, 1, 2))
    return torch.stack(stack)


def variance_cost(stack: torch.Tensor) -> torch.Tensor:
    """Population variance across the view axis of an ``(M, ...)`` stack.

    Values are sorted along the view axis first so the result does not
    depend on view order, bit for bit.
    """
    M = stack.shape[0]
    if M < 2:
        raise DomainError("variance needs at least two views")
    ordered, _ = torch.sort(stack, dim=0)
    mean = ordered.sum(dim=0) / M
    return ((ordered - mean) ** 2).sum(dim=0) / M


def encode_volume(cost: torch.Tensor, net: UNet3D, ref_view: CameraView, near=None, far=None) -> GeometryVolume:
    """Encode a ``(D, C, h, w)`` cost volume with the 3D U-Net."""
    D, C, h, w = cost.shape
    values = net(cost.permute(1, 0, 2, 3).unsqueeze(0))[0]
    scale = feature_scale(ref_view, w)
    return GeometryVolume(
        values,
        ref_view.intrinsics.scaled(scale),
        ref_view.pose,
        float(ref_view.near if near is None else near),
        float(ref_view.far if far is None else far),
    )


def volume_coordinates(volume: GeometryVolume, x: torch.Tensor) -> torch.Tensor:
    """World points ``(..., 3)`` in the volume's NDC frame (not clamped)."""
    return to_ndc(x.to(volume.values.dtype), volume.intrinsics, volume.pose, volume.near, volume.far, strict=False)


def trilinear_sample(volume: GeometryVolume, x: torch.Tensor, ndc: torch.Tensor | None = None) -> torch.Tensor:
    """Interpolate the volume at world points ``(..., 3)``; returns ``(..., C)``.

    Points outside the frustum are clamped onto its boundary.  ``ndc`` may
    pass precomputed :func:`volume_coordinates` of ``x``.
    """
    C, D, h, w = volume.values.shape
    if ndc is None:
        ndc = volume_coordinates(volume, x)
    ndc = ndc.clamp(0.0, 1.0)
    coords = ndc * torch.tensor([w - 1, h - 1, D - 1], dtype=ndc.dtype)
    lead = coords.shape[:-1]
    coords = coords.reshape(-1, 3)
    base = coords.detach().floor()
    frac = coords - base
    base = base.long()
    hi = torch.minimum(base + 1, torch.tensor([w - 1, h - 1, D - 1]))
    flat = volume.values.reshape(C, -1).t()

    def at(iu, iv, iz):
        return flat[(iz * h + iv) * w + iu]

    fu, fv, fz = (frac[:, i : i + 1] for i in range(3))
    u0, v0, z0 = base.unbind(-1)
    u1, v1, z1 = hi.unbind(-1)

    def lerp(a, b, t):
        return a + (b - a) * t

    c00 = lerp(at(u0, v0, z0), at(u1, v0, z0), fu)
    c10 = lerp(at(u0, v1, z0), at(u1, v1, z0), fu)
    c01 = lerp(at(u0, v0, z1), at(u1, v0, z1), fu)
    c11 = lerp(at(u0, v1, z1), at(u1, v1, z1), fu)
    c0 = lerp(c00, c10, fv)
    c1 = lerp(c01, c11, fv)
    return lerp(c0, c1, fz).reshape(*lead, C)


def save_volume(path, volume: GeometryVolume, config: dict | None = None):
    k = volume.intrinsics
    meta = {
        "kind": "geometry_volume",
        "intrinsics": [k.fx, k.fy, k.cx, k.cy, k.width, k.height],
        "near": volume.near,
        "far": volume.far,
        "config_hash": archive.config_hash(config or {}),
    }
    archive.save(path, {"values": volume.values, "R": volume.pose.R, "t": volume.pose.t}, meta)


def load_volume(path, config: dict | None = None) -> GeometryVolume:
    arrays, meta = archive.load(path)
    if meta.get("kind") != "geometry_volume":
        raise CheckpointError(f"{path} does not hold a geometry volume")
    if meta["config_hash"] != archive.config_hash(config or {}):
        raise CheckpointError(f"{path}: config hash mismatch")
    fx, fy, cx, cy, width, height = meta["intrinsics"]
    return GeometryVolume(
        torch.from_numpy(arrays["values"].copy()),
        CameraIntrinsics(fx, fy, cx, cy, int(width), int(height)),
        CameraPose(arrays["R"], arrays["t"]),
        meta["near"],
        meta["far"],
    )
