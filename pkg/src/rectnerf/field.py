"""Radiance field with geometric and appearance rectification.

Per sample the field computes volume-conditioned radiance features and a
density; the transmittance-weighted depth of each ray, together with the ray
direction, forms an attention query that re-weights the samples' features
before the color head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .costvolume import GeometryVolume, trilinear_sample, volume_coordinates
from .errors import ConfigError, DomainError
from .geometry import bilinear_sample, reproject_point
from .networks import (
    DEPTH_EMBEDDING,
    DIRECTION_EMBEDDING,
    POSITION_EMBEDDING,
    MLP,
    AttentionConfig,
    MultiHeadAttention,
    frequency_embed,
)

GEOMETRY_FIRST = "geometry_first"
APPEARANCE_FIRST = "appearance_first"

#: How far outside the unit NDC cube embedded positions may stray.
NDC_MARGIN = 0.5

#: Anchor colors are clamped this far inside (0, 1) before the logit.
ANCHOR_EPS = 1e-3

#: Variance floor of the photo-consistency cue.
CUE_FLOOR = 1e-4


@dataclass(frozen=True)
class FieldConfig:
    volume_channels: int = 8
    feature_channels: int = 32
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

    def __post_init__(self):
        if self.order not in (GEOMETRY_FIRST, APPEARANCE_FIRST):
            raise ConfigError(f"unknown module order {self.order!r}")
        if self.query not in ("V", "VD"):
            raise ConfigError(f"query must be 'V' or 'VD', got {self.query!r}")
        if self.appearance_mean not in ("all", "visible"):
            raise ConfigError(f"appearance_mean must be 'all' or 'visible', got {self.appearance_mean!r}")
        AttentionConfig(self.num_heads, self.model_dim)

    def to_dict(self):
        return asdict(self)


@dataclass
class QueryEmbedding:
    depth_embedding: torch.Tensor  # (B, 11)
    direction_embedding: torch.Tensor  # (B, 33)
    query: torch.Tensor  # (B, model_dim)


@dataclass
class AppearanceFeature:
    per_view: torch.Tensor  # (B, N, M, C + 3)
    in_bounds: torch.Tensor  # (B, N, M)
    mean: torch.Tensor  # (B, N, C + 3)


@dataclass
class SampleFeatures:
    positions: torch.Tensor
    depths: torch.Tensor
    volume_features: torch.Tensor
    radiance_features: torch.Tensor
    sigma: torch.Tensor
    rendered_depth: torch.Tensor
    query: QueryEmbedding
    corrected: torch.Tensor | None
    final: torch.Tensor
    colors: torch.Tensor
    appearance: AppearanceFeature | None = None


@dataclass
class SourceContext:
    """Everything the field needs from the source views of one scene."""

    views: list
    images: torch.Tensor  # (M, 3, H, W)
    features: torch.Tensor  # (M, C, h, w)
    volume: GeometryVolume


# --------------------------------------------------------------------------
# density and depth


def density(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw)


def sample_intervals(z: torch.Tensor, strict: bool = False) -> torch.Tensor:
    """Per-sample intervals; the last sample reuses the previous interval."""
    if strict:
        return torch.ones_like(z)
    dz = z[..., 1:] - z[..., :-1]
    return torch.cat([dz, dz[..., -1:]], dim=-1)


def compositing_weights(sigma: torch.Tensor, z: torch.Tensor, strict: bool = False):
    """Returns ``(weights, transmittance)`` for densities along each ray."""
    tau = sigma * sample_intervals(z, strict)
    optical_depth = torch.cumsum(tau, dim=-1)
    before = torch.cat([torch.zeros_like(tau[..., :1]), optical_depth[..., :-1]], dim=-1)
    transmittance = torch.exp(-before)
    weights = transmittance * -torch.expm1(-tau)
    return weights, transmittance


def density_unit(rays, count: int) -> torch.Tensor:
    """Per-ray factor ``count / (far - near)``, shape ``(B, 1)``.

    Multiplying the activation by it measures density per sample interval,
    so a unit output has an optical depth of about one per sample whatever
    the world scale of the scene.
    """
    return (count / (rays.far - rays.near)).unsqueeze(-1)


def render_depth(sigma: torch.Tensor, z: torch.Tensor, strict: bool = False) -> torch.Tensor:
    weights, _ = compositing_weights(sigma, z, strict)
    return (weights * z).sum(dim=-1)


def normalize_depth(depth, near, far):
    near = torch.as_tensor(near, dtype=depth.dtype)
    far = torch.as_tensor(far, dtype=depth.dtype)
    if bool((far <= near).any()):
        raise DomainError("far must exceed near")
    return ((depth - near) / (far - near)).clamp(0.0, 1.0)


def build_query(depth, directions, near, far, m3: MLP, mode: str = "VD") -> QueryEmbedding:
    """Query from the normalized rendered depth and the ray direction."""
    depth_emb = frequency_embed(normalize_depth(depth, near, far).unsqueeze(-1), DEPTH_EMBEDDING)
    dir_emb = frequency_embed(directions, DIRECTION_EMBEDDING)
    inputs = torch.cat([depth_emb, dir_emb], dim=-1) if mode == "VD" else dir_emb
    return QueryEmbedding(depth_emb, dir_emb, m3(inputs))


# --------------------------------------------------------------------------
# rectification


def _broadcast_query(query: torch.Tensor, count: int) -> torch.Tensor:
    return query.unsqueeze(1).expand(query.shape[0], count, query.shape[-1])


def geometric_rectify(radiance_features, volume_features, query, attention: MultiHeadAttention,
                      return_weights=False):
    """Attend over the samples of each ray: volume features as keys,
    radiance features as values, the ray query broadcast to every sample."""
    if radiance_features.shape[:2] != volume_features.shape[:2]:
        raise DomainError("radiance and volume features disagree on the sample count")
    q = query.query if isinstance(query, QueryEmbedding) else query
    return attention(_broadcast_query(q, radiance_features.shape[1]), volume_features, radiance_features,
                     return_weights=return_weights)


def appearance_rectify(corrected, appearance_mean, query, attention: MultiHeadAttention, return_weights=False):
    """Same attention with mean appearance features as keys and ``corrected`` as values."""
    if corrected.shape[:2] != appearance_mean.shape[:2]:
        raise DomainError("corrected and appearance features disagree on the sample count")
    q = query.query if isinstance(query, QueryEmbedding) else query
    return attention(_broadcast_query(q, corrected.shape[1]), appearance_mean, corrected,
                     return_weights=return_weights)


def appearance_features(points: torch.Tensor, views, feature_maps: torch.Tensor, images: torch.Tensor,
                        mean: str = "all") -> AppearanceFeature:
    """Gather ``feature ++ rgb`` from every source view at each point.

    Points that project outside a view (or behind it) get a zero vector from
    that view.  ``feature_maps`` may be at a lower resolution than ``images``;
    pixel coordinates are rescaled accordingly.
    """
    per_view, masks = [], []
    for i, view in enumerate(views):
        uv, inside = reproject_point(points.to(images.dtype), view)
        scale = images.shape[-1] / feature_maps.shape[-1]
        feat = bilinear_sample(feature_maps[i], uv[..., 0] / scale, uv[..., 1] / scale)
        rgb = bilinear_sample(images[i], uv[..., 0], uv[..., 1])
        both = torch.cat([feat, rgb], dim=-1) * inside.unsqueeze(-1).to(feat.dtype)
        per_view.append(both)
        masks.append(inside)
    per_view = torch.stack(per_view, dim=-2)
    in_bounds = torch.stack(masks, dim=-1)
    if mean == "visible":
        count = in_bounds.sum(dim=-1, keepdim=True).clamp(min=1).to(per_view.dtype)
        avg = per_view.sum(dim=-2) / count
    else:
        avg = per_view.mean(dim=-2)
    return AppearanceFeature(per_view, in_bounds, avg)


def photo_consistency(app: AppearanceFeature) -> torch.Tensor:
    """Per-channel variance of the source appearance over the views that see each point.

    Low values mark points where the sources agree, which is where surfaces
    are.  The variance is returned on a log scale (floored at
    ``CUE_FLOOR``) so small but decisive differences reach the MLP at unit
    magnitude.  Points seen by fewer than two views get the floor value.
    """
    w = app.in_bounds.to(app.per_view.dtype).unsqueeze(-1)
    count = w.sum(dim=-2).clamp(min=1.0)
    mean = (app.per_view * w).sum(dim=-2) / count
    var = (((app.per_view - mean.unsqueeze(-2)) ** 2) * w).sum(dim=-2) / count
    return torch.log(var + CUE_FLOOR) - math.log(CUE_FLOOR)


def visible_color(app: AppearanceFeature) -> torch.Tensor:
    """Mean source RGB over the views that see each point; mid grey where none does."""
    w = app.in_bounds.to(app.per_view.dtype).unsqueeze(-1)
    count = w.sum(dim=-2)
    total = (app.per_view[..., -3:] * w).sum(dim=-2)
    return torch.where(count > 0, total / count.clamp(min=1.0), torch.full_like(total, 0.5))


# --------------------------------------------------------------------------
# the field


class RadianceField(nn.Module):
    def __init__(self, config: FieldConfig = FieldConfig()):
        super().__init__()
        self.config = c = config
        attn = AttentionConfig(c.num_heads, c.model_dim)
        query_in = DEPTH_EMBEDDING.output_dim + DIRECTION_EMBEDDING.output_dim if c.query == "VD" else DIRECTION_EMBEDDING.output_dim
        cue = c.feature_channels + 3 if c.density_cue else 0
        self.m1 = MLP([POSITION_EMBEDDING.output_dim + c.volume_channels + cue, c.hidden_dim, c.hidden_dim, c.radiance_dim])
        self.m2 = MLP([c.radiance_dim, c.hidden_dim // 2, 1])
        self.m3 = MLP([query_in, c.model_dim, c.model_dim])
        head_in = c.radiance_dim + DEPTH_EMBEDDING.output_dim + DIRECTION_EMBEDDING.output_dim
        self.m4 = MLP([head_in, c.hidden_dim // 2, 3])
        self.geometric = MultiHeadAttention(c.model_dim, c.volume_channels, c.radiance_dim, c.radiance_dim, attn)
        self.appearance = MultiHeadAttention(c.model_dim, c.feature_channels + 3, c.radiance_dim, c.radiance_dim, attn)
        # per-sample path for the mean source appearance; attention alone only
        # re-weights values that carry no source color
        self.appearance_proj = (
            nn.Linear(c.feature_channels + 3, c.radiance_dim) if c.appearance_skip and c.use_appearance else None
        )

    def radiance_features(self, points, volume: GeometryVolume, cue=None):
        # Positions are embedded in the volume's NDC frame, where the scene
        # spans roughly the unit cube whatever its world scale.
        ndc = volume_coordinates(volume, points)
        s = trilinear_sample(volume, points, ndc)
        position = ndc.clamp(-NDC_MARGIN, 1.0 + NDC_MARGIN)
        parts = [frequency_embed(position, POSITION_EMBEDDING), s]
        if cue is not None:
            parts.append(cue)
        return self.m1(torch.cat(parts, dim=-1)), s

    def radiance(self, final, query: QueryEmbedding, anchor=None):
        """Per-sample color; ``anchor`` colors, when given, set the zero point of the logits."""
        n = final.shape[1]
        extra = torch.cat([query.depth_embedding, query.direction_embedding], dim=-1)
        extra = extra.unsqueeze(1).expand(extra.shape[0], n, extra.shape[-1])
        logits = self.m4(torch.cat([final, extra], dim=-1))
        if anchor is not None:
            logits = logits + torch.logit(anchor.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS))
        return torch.sigmoid(logits)

    def _geometric(self, features, s, query):
        out = geometric_rectify(features, s, query, self.geometric)
        return features + out if self.config.residual else out

    def _appearance(self, features, app, query):
        out = appearance_rectify(features, app.mean, query, self.appearance)
        if self.config.residual:
            out = features + out
        if self.appearance_proj is not None:
            out = out + self.appearance_proj(app.mean)
        return out

    def forward(self, rays, depths, points, context: SourceContext) -> SampleFeatures:
        c = self.config
        # the cue and the anchor belong to the shared backbone, so every
        # ablation preset gets them; only the attention stages differ
        app = None
        if c.use_appearance or c.density_cue or c.color_anchor:
            app = appearance_features(points, context.views, context.features, context.images, c.appearance_mean)
        cue = photo_consistency(app) if c.density_cue else None
        anchor = visible_color(app) if c.color_anchor else None
        F_r, s = self.radiance_features(points, context.volume, cue)
        sigma = density(self.m2(F_r)).squeeze(-1)
        if c.normalized_density:
            sigma = sigma * density_unit(rays, depths.shape[-1])
        D_hat = render_depth(sigma, depths, c.strict_delta)
        query = build_query(D_hat, rays.directions, rays.near, rays.far, self.m3, c.query)
        stages = []
        if c.use_geometry:
            stages.append("g")
        if c.use_appearance:
            stages.append("a")
        if c.order == APPEARANCE_FIRST:
            stages.reverse()
        features, corrected = F_r, None
        for stage in stages:
            if stage == "g":
                features = self._geometric(features, s, query)
            else:
                features = self._appearance(features, app, query)
            if corrected is None:
                corrected = features
        colors = self.radiance(features, query, anchor)
        return SampleFeatures(points, depths, s, F_r, sigma, D_hat, query, corrected, features, colors, app)
