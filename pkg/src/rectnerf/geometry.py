"""Pinhole multi-view geometry.

Conventions used throughout the package:

* poses are world-to-camera, ``x_cam = R @ x_world + t``;
* pixel coordinates are continuous with integer values at pixel centers,
  so a ``W``-pixel wide image spans ``[0, W - 1]``;
* feature maps and images handed to the samplers are channels-first
  ``(C, H, W)`` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BehindCameraError, DomainError, InvalidCameraError

#: Fronto-parallel sweep plane normal in the reference camera frame.
FRONTO_PARALLEL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCameraError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (3, 3):
            raise InvalidCameraError(f"intrinsic matrix must be 3x3, got {K.shape}")
        if abs(K[0, 1]) > 1e-9 or np.abs(K[2] - [0, 0, 1]).max() > 1e-9 or abs(K[1, 0]) > 1e-9:
            raise InvalidCameraError("only zero-skew pinhole intrinsics are supported")
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of a map downsampled by an integer ``factor``."""
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            self.width // factor,
            self.height // factor,
        )


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidCameraError("rotation must be orthonormal with det(R) = 1")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise InvalidCameraError("pose contains non-finite values")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Pose of a camera at ``eye`` whose optical axis points at ``target``.

        ``up`` defaults to -y because image rows grow downwards.
        """
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)


@dataclass
class CameraView:
    """One posed input image; ``image`` is ``(H, W, 3)`` in ``[0, 1]``."""

    image: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose
    near: float
    far: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise InvalidCameraError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.image is not None:
            h, w = self.image.shape[:2]
            if (h, w) != (self.intrinsics.height, self.intrinsics.width):
                raise InvalidCameraError(
                    f"image is {h}x{w} but intrinsics describe {self.intrinsics.height}x{self.intrinsics.width}"
                )


@dataclass
class RayBatch:
    """Rays ``origin + s * direction`` with unit directions, one row per ray."""

    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


@dataclass(frozen=True)
class SweepPlaneSet:
    reference_index: int
    depths: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: FRONTO_PARALLEL.copy())

    def __post_init__(self):
        if np.any(np.diff(self.depths) <= 0):
            raise DomainError("sweep plane depths must be strictly increasing")


def _as_tensor(a, like: torch.Tensor | None = None, dtype=None) -> torch.Tensor:
    if dtype is None:
        dtype = like.dtype if like is not None else torch.get_default_dtype()
    device = like.device if like is not None else None
    return torch.as_tensor(np.asarray(a), dtype=dtype, device=device)


# --------------------------------------------------------------------------
# homography warping


def homography_matrix(
    src_intrinsics: CameraIntrinsics,
    src_pose: CameraPose,
    ref_intrinsics: CameraIntrinsics,
    ref_pose: CameraPose,
    depth: float,
    normal=FRONTO_PARALLEL,
) -> np.ndarray:
    """Plane-induced homography from reference pixels to source pixels.

    The plane is ``normal . X_ref = depth`` in the reference camera frame.
    """
    if not depth > 0:
        raise DomainError(f"plane depth must be positive, got {depth}")
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    R_rel = src_pose.R @ ref_pose.R.T
    t_rel = src_pose.t - R_rel @ ref_pose.t
    return src_intrinsics.K @ (R_rel + np.outer(t_rel, n) / depth) @ ref_intrinsics.K_inv


def bilinear_sample(feat: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample a ``(C, H, W)`` map at continuous pixel coordinates.

    Coordinates outside the map are clamped to the border (edge padding).
    Returns ``(*u.shape, C)``.
    """
    C, H, W = feat.shape
    u = u.clamp(0, W - 1)
    v = v.clamp(0, H - 1)
    u0 = u.detach().floor()
    v0 = v.detach().floor()
    du = (u - u0).unsqueeze(-1)
    dv = (v - v0).unsqueeze(-1)
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=W - 1)
    v1 = (v0 + 1).clamp(max=H - 1)
    flat = feat.reshape(C, H * W).t()
    f00 = flat[v0 * W + u0]
    f01 = flat[v0 * W + u1]
    f10 = flat[v1 * W + u0]
    f11 = flat[v1 * W + u1]
    top = f00 + (f01 - f00) * du
    bottom = f10 + (f11 - f10) * du
    return top + (bottom - top) * dv


def pixel_grid(height: int, width: int, dtype=torch.float64):
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    return u, v


def apply_homography(H: torch.Tensor, u: torch.Tensor, v: torch.Tensor, big: float = 1e6):
    """Map pixel coordinates through a ``(..., 3, 3)`` homography.

    Pixels whose homogeneous coordinate vanishes are sent far outside the
    image so that the border clamp assigns them the edge value.
    """
    x = H[..., 0, 0, None, None] * u + H[..., 0, 1, None, None] * v + H[..., 0, 2, None, None]
    y = H[..., 1, 0, None, None] * u + H[..., 1, 1, None, None] * v + H[..., 1, 2, None, None]
    w = H[..., 2, 0, None, None] * u + H[..., 2, 1, None, None] * v + H[..., 2, 2, None, None]
    degenerate = w.abs() < 1e-12
    safe_w = torch.where(degenerate, torch.ones_like(w), w)
    us = torch.where(degenerate, torch.sign(x) * big, x / safe_w)
    vs = torch.where(degenerate, torch.sign(y) * big, y / safe_w)
    return us, vs


def warp_feature_map(feat: torch.Tensor, H) -> torch.Tensor:
    """Resample a source ``(C, H, W)`` map into the reference grid through ``H``."""
    H = _as_tensor(H, like=feat)
    if torch.equal(H, torch.eye(3, dtype=H.dtype)):
        return feat.clone()
    if abs(float(torch.linalg.det(H))) < 1e-12:
        raise DomainError("homography is not invertible")
    _, h, w = feat.shape
    u, v = pixel_grid(h, w, dtype=feat.dtype)
    us, vs = apply_homography(H, u, v)
    return bilinear_sample(feat, us, vs).permute(2, 0, 1)


# --------------------------------------------------------------------------
# projection


def world_to_camera(x: torch.Tensor, pose: CameraPose) -> torch.Tensor:
    R = _as_tensor(pose.R, like=x)
    t = _as_tensor(pose.t, like=x)
    return x @ R.T + t


def camera_to_world(x_cam: torch.Tensor, pose: CameraPose) -> torch.Tensor:
    R = _as_tensor(pose.R, like=x_cam)
    t = _as_tensor(pose.t, like=x_cam)
    return (x_cam - t) @ R


def project(x: torch.Tensor, intrinsics: CameraIntrinsics, pose: CameraPose, eps: float = 1e-9):
    """Project world points ``(..., 3)``; returns ``(u, v, depth)``."""
    xc = world_to_camera(x, pose)
    depth = xc[..., 2]
    safe = torch.where(depth.abs() < eps, torch.full_like(depth, eps), depth)
    u = intrinsics.fx * xc[..., 0] / safe + intrinsics.cx
    v = intrinsics.fy * xc[..., 1] / safe + intrinsics.cy
    return u, v, depth


def unproject(u, v, depth, intrinsics: CameraIntrinsics, pose: CameraPose) -> torch.Tensor:
    """World point at camera-frame ``depth`` behind pixel ``(u, v)``."""
    u, v, depth = torch.broadcast_tensors(*(torch.as_tensor(a, dtype=torch.float64) for a in (u, v, depth)))
    xc = torch.stack(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ],
        dim=-1,
    )
    return camera_to_world(xc, pose)


def reproject_point(x: torch.Tensor, view: CameraView):
    """Pixel coordinates of world points in ``view`` plus an in-bounds mask."""
    u, v, depth = project(x, view.intrinsics, view.pose)
    k = view.intrinsics
    inside = (depth > 0) & (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    return torch.stack([u, v], dim=-1), inside


# --------------------------------------------------------------------------
# normalized device coordinates of the reference frustum


def depth_to_ndc(depth, near: float, far: float):
    """Inverse-depth linear map with ``near -> 0`` and ``far -> 1``."""
    return (1.0 / depth - 1.0 / near) / (1.0 / far - 1.0 / near)


def ndc_to_depth(z, near: float, far: float):
    return 1.0 / (1.0 / near + z * (1.0 / far - 1.0 / near))


def to_ndc(x: torch.Tensor, intrinsics: CameraIntrinsics, pose: CameraPose, near: float, far: float,
           strict: bool = True) -> torch.Tensor:
    """World points ``(..., 3)`` to reference NDC ``(u, v, z)``.

    With ``strict`` a point at or behind the camera raises; otherwise its
    depth is clamped to a tiny positive value (used by volume lookups, which
    clamp to the volume anyway).
    """
    u, v, depth = project(x, intrinsics, pose)
    if strict and bool((depth <= 0).any()):
        raise BehindCameraError("point is at or behind the reference camera")
    depth = depth.clamp(min=1e-6)
    return torch.stack(
        [
            u / (intrinsics.width - 1),
            v / (intrinsics.height - 1),
            depth_to_ndc(depth, near, far),
        ],
        dim=-1,
    )


def from_ndc(ndc: torch.Tensor, intrinsics: CameraIntrinsics, pose: CameraPose, near: float, far: float):
    u = ndc[..., 0] * (intrinsics.width - 1)
    v = ndc[..., 1] * (intrinsics.height - 1)
    depth = ndc_to_depth(ndc[..., 2], near, far)
    return unproject(u, v, depth, intrinsics, pose)


def sweep_planes(near: float, far: float, count: int, reference_index: int = 0) -> SweepPlaneSet:
    """``count`` fronto-parallel planes uniform in NDC depth."""
    if count < 2:
        raise DomainError("need at least two sweep planes")
    z = np.linspace(0.0, 1.0, count)
    depths = ndc_to_depth(z, near, far)
    depths[0], depths[-1] = near, far
    return SweepPlaneSet(reference_index, depths)


# --------------------------------------------------------------------------
# rays


def generate_rays(intrinsics: CameraIntrinsics, pose: CameraPose, pixels, near: float, far: float,
                  dtype=torch.float32) -> RayBatch:
    """Rays from the camera center through pixel coordinates ``pixels`` ``(P, 2)``."""
    pixels = torch.as_tensor(pixels, dtype=torch.float64)
    k = intrinsics
    dirs_cam = torch.stack(
        [(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, torch.ones(len(pixels), dtype=torch.float64)],
        dim=-1,
    )
    dirs = dirs_cam @ torch.as_tensor(pose.R, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = torch.as_tensor(pose.center, dtype=torch.float64).expand_as(dirs)
    n = len(pixels)
    return RayBatch(
        origins.to(dtype).contiguous(),
        dirs.to(dtype),
        torch.full((n,), float(near), dtype=dtype),
        torch.full((n,), float(far), dtype=dtype),
    )


def image_pixels(height: int, width: int) -> np.ndarray:
    """All pixel centers in row-major order as ``(H * W, 2)`` ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)


def sample_ray(rays: RayBatch, count: int, generator: torch.Generator | None = None,
               jitter: bool = False):
    """Sample depths uniform in inverse depth between each ray's near and far.

    Returns ``(depths, points)`` of shapes ``(R, N)`` and ``(R, N, 3)``.  With
    ``jitter`` each depth is drawn uniformly inside its stratum, whose bounds
    are the midpoints between neighbouring nodes.
    """
    if count < 2:
        raise DomainError("need at least two samples per ray")
    dtype = rays.origins.dtype
    near = rays.near[:, None]
    far = rays.far[:, None]
    s = torch.linspace(0.0, 1.0, count, dtype=dtype)
    if jitter:
        mids = 0.5 * (s[1:] + s[:-1])
        lower = torch.cat([s[:1], mids])
        upper = torch.cat([mids, s[-1:]])
        r = torch.rand((len(rays), count), generator=generator, dtype=dtype)
        s = lower + (upper - lower) * r
    else:
        s = s.expand(len(rays), count)
    depths = 1.0 / (1.0 / near + s * (1.0 / far - 1.0 / near))
    if not jitter:
        depths = depths.clone()
        depths[:, 0] = rays.near
        depths[:, -1] = rays.far
    points = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    return depths, points
