"""Differentiable building blocks: embeddings, MLPs, attention, CNN encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import DomainError


@dataclass(frozen=True)
class FrequencyEmbeddingSpec:
    input_dim: int
    num_frequencies: int
    include_input: bool = True

    @property
    def output_dim(self) -> int:
        return self.input_dim * (2 * self.num_frequencies + int(self.include_input))


POSITION_EMBEDDING = FrequencyEmbeddingSpec(3, 10)  # 63
DIRECTION_EMBEDDING = FrequencyEmbeddingSpec(3, 5)  # 33
DEPTH_EMBEDDING = FrequencyEmbeddingSpec(1, 5)  # 11


def frequency_embed(x: torch.Tensor, spec: FrequencyEmbeddingSpec) -> torch.Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``."""
    if x.shape[-1] != spec.input_dim:
        raise DomainError(f"expected last dimension {spec.input_dim}, got {x.shape[-1]}")
    parts = [x] if spec.include_input else []
    for i in range(spec.num_frequencies):
        scaled = (2.0**i * math.pi) * x
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


class FrequencyEmbedding(nn.Module):
    def __init__(self, spec: FrequencyEmbeddingSpec):
        super().__init__()
        self.spec = spec

    @property
    def output_dim(self):
        return self.spec.output_dim

    def forward(self, x):
        return frequency_embed(x, self.spec)


_ACTIVATIONS = {
    "relu": nn.ReLU,
    "none": nn.Identity,
    "sigmoid": nn.Sigmoid,
    "softplus": nn.Softplus,
}


def kaiming_init_(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MLP(nn.Module):
    """Affine layers with ``activation`` between them and ``output_activation`` last."""

    def __init__(self, widths, activation="relu", output_activation="none"):
        super().__init__()
        if len(widths) < 2:
            raise DomainError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        layers = []
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            layers.append(nn.Linear(a, b))
            last = i == len(self.widths) - 2
            layers.append(_ACTIVATIONS[output_activation if last else activation]())
        self.net = nn.Sequential(*layers)
        kaiming_init_(self)

    @property
    def in_features(self):
        return self.widths[0]

    def forward(self, x):
        if x.shape[-1] != self.widths[0]:
            raise DomainError(f"MLP expects width {self.widths[0]}, got {x.shape[-1]}")
        return self.net(x)


def mlp_forward(x: torch.Tensor, mlp: MLP) -> torch.Tensor:
    return mlp(x)


# --------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    model_dim: int = 64

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise DomainError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def multi_head_attention(q, k, v, w_q, w_k, w_v, w_o, num_heads: int, return_weights: bool = False):
    """Scaled dot-product attention with ``num_heads`` heads.

    ``q`` is ``(B, Nq, dq)``, ``k`` ``(B, Nk, dk)``, ``v`` ``(B, Nk, dv)``.
    Projection matrices act on the right (``q @ w_q``); ``w_q`` and ``w_k``
    map to ``num_heads * d_k`` and ``w_v`` to ``num_heads * d_v``.  Softmax is
    taken over the ``Nk`` key tokens.  Returns ``(B, Nq, out)`` and, when
    asked, the ``(B, heads, Nq, Nk)`` weights.
    """
    if q.shape[-1] != w_q.shape[0] or k.shape[-1] != w_k.shape[0] or v.shape[-1] != w_v.shape[0]:
        raise DomainError("token widths do not match the projection matrices")
    if k.shape[-2] != v.shape[-2] or k.shape[-2] < 1:
        raise DomainError("keys and values need the same non-zero token count")
    if w_q.shape[1] != w_k.shape[1] or w_q.shape[1] % num_heads or w_v.shape[1] % num_heads:
        raise DomainError("projection widths must split evenly across heads")
    B, Nq, _ = q.shape
    Nk = k.shape[1]
    d_k = w_q.shape[1] // num_heads
    d_v = w_v.shape[1] // num_heads
    qh = (q @ w_q).view(B, Nq, num_heads, d_k).transpose(1, 2)
    kh = (k @ w_k).view(B, Nk, num_heads, d_k).transpose(1, 2)
    vh = (v @ w_v).view(B, Nk, num_heads, d_v).transpose(1, 2)
    weights = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d_k), dim=-1)
    heads = (weights @ vh).transpose(1, 2).reshape(B, Nq, num_heads * d_v)
    out = heads @ w_o
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    """Bias-free multi-head attention with separate query/key/value widths."""

    def __init__(self, query_dim, key_dim, value_dim, out_dim, config: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.w_q = nn.Parameter(torch.empty(query_dim, d))
        self.w_k = nn.Parameter(torch.empty(key_dim, d))
        self.w_v = nn.Parameter(torch.empty(value_dim, d))
        self.w_o = nn.Parameter(torch.empty(d, out_dim))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.xavier_uniform_(w)

    def forward(self, q, k, v, return_weights=False):
        return multi_head_attention(
            q, k, v, self.w_q, self.w_k, self.w_v, self.w_o, self.config.num_heads, return_weights
        )


# --------------------------------------------------------------------------
# convolutional encoders


def _conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(),
    )


class FeatureExtractor2D(nn.Module):
    """Three conv stages (strides 1, 2, 2) and a linear 3x3 output conv.

    Maps ``(B, 3, H, W)`` images to ``(B, C, H/4, W/4)`` features.
    """

    def __init__(self, out_channels: int = 32, base_channels: int | None = None):
        super().__init__()
        b = base_channels or max(out_channels // 4, 4)
        self.out_channels = out_channels
        self.stages = nn.Sequential(
            _conv_block(3, b, 1),
            _conv_block(b, 2 * b, 2),
            _conv_block(2 * b, out_channels, 2),
        )
        self.head = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        kaiming_init_(self)

    def forward(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(0)
        h, w = images.shape[-2:]
        if h % 4 or w % 4:
            raise DomainError(f"image size {h}x{w} is not divisible by 4")
        return self.head(self.stages(images))


def feature_extractor_2d(images: torch.Tensor, net: FeatureExtractor2D) -> torch.Tensor:
    return net(images)


def _conv3d(cin, cout, stride=1):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, stride=stride, padding=1), nn.ReLU())


class UNet3D(nn.Module):
    """Three-level 3D U-Net with additive skip connections.

    ``(B, C_in, D, H, W)`` to ``(B, C_out, D, H, W)``; every spatial size must
    be divisible by 8.
    """

    levels = 3

    def __init__(self, in_channels: int = 32, out_channels: int = 8, base_channels: int = 8):
        super().__init__()
        b = base_channels
        self.inc = _conv3d(in_channels, b)
        self.down1 = nn.Sequential(_conv3d(b, 2 * b, 2), _conv3d(2 * b, 2 * b))
        self.down2 = nn.Sequential(_conv3d(2 * b, 4 * b, 2), _conv3d(4 * b, 4 * b))
        self.down3 = nn.Sequential(_conv3d(4 * b, 8 * b, 2), _conv3d(8 * b, 8 * b))
        self.up3 = nn.Sequential(nn.ConvTranspose3d(8 * b, 4 * b, 3, stride=2, padding=1, output_padding=1), nn.ReLU())
        self.up2 = nn.Sequential(nn.ConvTranspose3d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1), nn.ReLU())
        self.up1 = nn.Sequential(nn.ConvTranspose3d(2 * b, b, 3, stride=2, padding=1, output_padding=1), nn.ReLU())
        self.out = nn.Conv3d(b, out_channels, 3, padding=1)
        self.out_channels = out_channels
        kaiming_init_(self)

    def forward(self, x):
        if x.dim() == 4:
            x = x.unsqueeze(0)
        factor = 2**self.levels
        if any(s % factor for s in x.shape[-3:]):
            raise DomainError(f"volume size {tuple(x.shape[-3:])} is not divisible by {factor}")
        x0 = self.inc(x)
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        y = self.up3(x3) + x2
        y = self.up2(y) + x1
        y = self.up1(y) + x0
        return self.out(y)


def unet_3d(cost: torch.Tensor, net: UNet3D) -> torch.Tensor:
    return net(cost)
