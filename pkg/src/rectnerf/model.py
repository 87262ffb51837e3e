"""The full sparse-view model: 2D encoder, cost volume, U-Net and field."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
import torch.nn as nn

from .costvolume import build_plane_sweep, encode_volume, variance_cost
from .errors import ConfigError
from .field import GEOMETRY_FIRST, FieldConfig, RadianceField, SourceContext
from .geometry import CameraView, RayBatch, sample_ray, sweep_planes
from .networks import FeatureExtractor2D, UNet3D


@dataclass(frozen=True)
class ModelConfig:
    num_planes: int = 128
    num_samples: int = 128
    feature_channels: int = 32
    volume_channels: int = 8
    unet_channels: int = 8
    radiance_dim: int = 64
    model_dim: int = 64
    num_heads: int = 4
    hidden_dim: int = 128
    use_geometry: bool = True
    use_appearance: bool = True
    order: str = GEOMETRY_FIRST
    query: str = "VD"
    residual: bool = True
    appearance_skip: bool = True
    density_cue: bool = True
    color_anchor: bool = True
    normalized_density: bool = True
    strict_delta: bool = False
    appearance_mean: str = "all"
    white_background: bool = False

    def __post_init__(self):
        if self.num_planes % 8:
            raise ConfigError("num_planes must be a multiple of 8 (3-level U-Net)")
        if self.num_samples < 2:
            raise ConfigError("num_samples must be at least 2")
        self.field_config()

    def field_config(self) -> FieldConfig:
        names = {f.name for f in fields(FieldConfig)}
        return FieldConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small configuration for tests and desk-scale experiments."""
        base = dict(
            num_planes=8,
            num_samples=8,
            feature_channels=8,
            volume_channels=4,
            unet_channels=4,
            radiance_dim=16,
            model_dim=16,
            num_heads=4,
            hidden_dim=32,
        )
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def images_tensor(views, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([v.image for v in views]), dtype=dtype).permute(0, 3, 1, 2).contiguous()


class SparseViewNeRF(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.extractor = FeatureExtractor2D(config.feature_channels)
        self.encoder = UNet3D(config.feature_channels, config.volume_channels, config.unet_channels)
        self.field = RadianceField(config.field_config())

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def parameter_groups(self) -> dict:
        """Named groups of parameters, one per network block."""
        f = self.field
        groups = {
            "feature_extractor": list(self.extractor.parameters()),
            "volume_encoder": list(self.encoder.parameters()),
            "m1": list(f.m1.parameters()),
            "m2": list(f.m2.parameters()),
            "m3": list(f.m3.parameters()),
            "m4": list(f.m4.parameters()),
            "geometric_attention": list(f.geometric.parameters()),
            "appearance_attention": list(f.appearance.parameters()),
        }
        if f.appearance_proj is not None:
            groups["appearance_skip"] = list(f.appearance_proj.parameters())
        return groups

    def encode(self, views: list[CameraView], ref: int = 0) -> SourceContext:
        images = images_tensor(views, self.dtype)
        features = self.extractor(images)
        planes = sweep_planes(views[ref].near, views[ref].far, self.config.num_planes, ref)
        cost = variance_cost(build_plane_sweep(features, views, ref, planes))
        volume = encode_volume(cost, self.encoder, views[ref])
        return SourceContext(list(views), images, features, volume)

    def render_rays(self, rays: RayBatch, context: SourceContext, jitter=False, generator=None):
        from .renderer import composite

        depths, points = sample_ray(rays, self.config.num_samples, generator=generator, jitter=jitter)
        samples = self.field(rays, depths, points, context)
        out = composite(samples.sigma, samples.colors, depths, self.config.strict_delta, self.config.white_background)
        return out, samples
