"""Visual encoders: a residual CNN and a patch vision transformer.

Both map a batch of images to d-dimensional embeddings through a final
linear projection. Encoders contain no stochastic layers, so their forward
pass is deterministic given parameters and input; normalization is
GroupNorm/LayerNorm so a frozen encoder is frozen in every respect (no
running statistics drift).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ValidationError
from .seeding import torch_generator

# Per-channel standardization applied at the encoder input; dataset pixels
# are [0, 1], so this maps them to [-1, 1].
INPUT_MEAN = 0.5
INPUT_STD = 0.5


@dataclass(frozen=True)
class ResidualSpec:
    """Residual CNN shape: stem conv, then one stage per width entry."""

    widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: int = 2
    stem_stride: int = 2
    stem_pool: bool = True


@dataclass(frozen=True)
class VitSpec:
    """Patch transformer shape."""

    patch_size: int = 8
    depth: int = 6
    heads: int = 4
    token_dim: int = 128
    mlp_dim: int = 256


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "residual_cnn"  # "residual_cnn" | "vit"
    input_size: tuple[int, int] = (64, 64)
    embed_dim: int = 64
    residual: ResidualSpec = field(default_factory=ResidualSpec)
    vit: VitSpec = field(default_factory=VitSpec)

    def __post_init__(self):
        if self.kind not in ("residual_cnn", "vit"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.kind == "vit":
            h, w = self.input_size
            if h % self.vit.patch_size or w % self.vit.patch_size:
                raise ConfigError(
                    f"input size {self.input_size} not divisible by patch size {self.vit.patch_size}"
                )
            if self.vit.token_dim % self.vit.heads:
                raise ConfigError("token_dim must be divisible by heads")
        if self.kind == "residual_cnn":
            if not self.residual.widths:
                raise ConfigError("residual widths must be non-empty")
            if self.residual.blocks_per_stage < 1:
                raise ConfigError("blocks_per_stage must be >= 1")


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        # convs feeding a norm carry no bias; it would be cancelled anyway
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _group_norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """Stem conv + residual stages + global average pool + linear projection."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        spec = config.residual
        stem = [
            nn.Conv2d(3, spec.widths[0], 3, spec.stem_stride, 1, bias=False),
            _group_norm(spec.widths[0]),
            nn.ReLU(),
        ]
        if spec.stem_pool:
            stem.append(nn.MaxPool2d(2))
        self.stem = nn.Sequential(*stem)

        blocks = []
        cin = spec.widths[0]
        for stage, width in enumerate(spec.widths):
            for b in range(spec.blocks_per_stage):
                stride = 2 if (b == 0 and stage > 0) else 1
                blocks.append(ResidualBlock(cin, width, stride))
                cin = width
        self.stages = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.project = nn.Linear(cin, config.embed_dim)

    def forward(self, x):
        x = (x - INPUT_MEAN) / INPUT_STD
        h = self.stages(self.stem(x))
        h = self.pool(h).flatten(1)
        return self.project(h)


class TransformerEncoderBlock(nn.Module):
    """Pre-norm block: self-attention then GELU feedforward, residual paths."""

    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x):
        b, s, d = x.shape
        hd = d // self.heads
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, s, self.heads, hd).transpose(1, 2)
        k = k.view(b, s, self.heads, hd).transpose(1, 2)
        v = v.view(b, s, self.heads, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, d)
        x = x + self.attn_out(out)
        x = x + self.mlp(self.norm2(x))
        return x


class VitEncoder(nn.Module):
    """Patch embedding + class token + positional encodings + transformer."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        spec = config.vit
        h, w = config.input_size
        self.n_patches = (h // spec.patch_size) * (w // spec.patch_size)
        self.patch_embed = nn.Conv2d(3, spec.token_dim, spec.patch_size, spec.patch_size)
        self.class_token = nn.Parameter(torch.zeros(1, 1, spec.token_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_patches + 1, spec.token_dim))
        self.blocks = nn.ModuleList(
            [TransformerEncoderBlock(spec.token_dim, spec.heads, spec.mlp_dim) for _ in range(spec.depth)]
        )
        self.norm = nn.LayerNorm(spec.token_dim)
        self.project = nn.Linear(spec.token_dim, config.embed_dim)

    @property
    def sequence_length(self) -> int:
        return self.n_patches + 1

    def forward(self, x):
        x = (x - INPUT_MEAN) / INPUT_STD
        h = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, patches, token_dim)
        cls = self.class_token.expand(h.shape[0], -1, -1)
        h = torch.cat([cls, h], dim=1) + self.pos_embed
        for block in self.blocks:
            h = block(h)
        return self.project(self.norm(h)[:, 0])


Encoder = ResidualEncoder | VitEncoder


def _init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Deterministic init: fan-in-scaled uniform weights, zero biases.

    The ViT class token and positional encodings are standard normal
    scaled by 1/sqrt(dim). Iteration order over named modules is fixed,
    so the result depends only on the generator seed.
    """
    for name, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0][0].numel() if m.weight.dim() > 2 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    if isinstance(module, VitEncoder):
        dim = module.config.vit.token_dim
        with torch.no_grad():
            module.class_token.normal_(0.0, 1.0, generator=gen).mul_(1.0 / math.sqrt(dim))
            module.pos_embed.normal_(0.0, 1.0, generator=gen).mul_(1.0 / math.sqrt(dim))


def build_encoder(config: EncoderConfig, init_seed: int) -> Encoder:
    """Construct and deterministically initialize an encoder."""
    if config.kind == "residual_cnn":
        enc = ResidualEncoder(config)
    else:
        enc = VitEncoder(config)
    _init_parameters(enc, torch_generator(init_seed, "encoder-init"))
    enc.init_seed = init_seed
    return enc


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, H, W, C) numpy in [0,1] -> (B, C, H, W) torch tensor."""
    if images.ndim != 4:
        raise ValidationError(f"expected a (B, H, W, C) batch, got shape {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype)


def encode(encoder: Encoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Embed a batch of images; validates shape and finiteness first.

    `images` is (B, H, W, C) float in [0, 1]; returns (B, d). The forward is
    run under no_grad in eval mode; the encoder is not mutated.
    """
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ValidationError(f"expected (B, H, W, C) images, got shape {images.shape}")
    expected = tuple(encoder.config.input_size)
    if images.shape[1:3] != expected:
        raise ValidationError(f"image size {images.shape[1:3]} does not match encoder input {expected}")
    if images.shape[3] != 3:
        raise ValidationError(f"expected 3 channels, got {images.shape[3]}")
    if not np.isfinite(images).all():
        raise ValidationError("images contain non-finite values")

    dtype = next(encoder.parameters()).dtype
    was_training = encoder.training
    encoder.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images_to_tensor(images[start : start + batch_size], dtype)
            outs.append(encoder(chunk).cpu().numpy())
    if was_training:
        encoder.train()
    return np.concatenate(outs, axis=0)
