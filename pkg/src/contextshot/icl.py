"""The in-context classifier.

Support images become tokens [image embedding ; label embedding]; the query
becomes [image embedding ; 0]. The token sequence runs through a transformer
encoder under an asymmetric mask: supports attend among themselves, the
query attends to everything (itself included), and supports never attend to
the query. The classification head reads only the query position's final
hidden state.

There are no positional encodings over the token sequence, so the query
logits are invariant to support order by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoders import Encoder, images_to_tensor
from .episodes import EpisodeBatch
from .errors import ConfigError, ValidationError
from .seeding import torch_generator


@dataclass(frozen=True)
class IclModelConfig:
    n_max: int = 10
    embed_dim: int = 64
    heads: int = 8
    layers: int = 4
    feedforward_dim: int = 256
    dropout: float = 0.1
    precision: str = "single"  # "single" | "double"

    def __post_init__(self):
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @property
    def model_dim(self) -> int:
        # joint tokens are [image embedding ; label embedding]
        return 2 * self.embed_dim

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


def attention_mask(m: int) -> torch.Tensor:
    """(m+1, m+1) boolean mask; entry (i, j) is True iff token i may attend to j.

    Tokens 0..m-1 are supports, token m is the query. Supports attend to all
    supports and never to the query; the query attends to every token.
    """
    if m < 1:
        raise ValidationError(f"support count must be >= 1, got {m}")
    mask = torch.ones(m + 1, m + 1, dtype=torch.bool)
    mask[:m, m] = False
    return mask


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask):
        b, s, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, s, self.heads, hd).transpose(1, 2)
        k = k.view(b, s, self.heads, hd).transpose(1, 2)
        v = v.view(b, s, self.heads, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(out)


class IclBlock(nn.Module):
    """Pre-norm transformer block with dropout on attention and FF outputs."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.norm1(x), mask))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x


class IclModel(nn.Module):
    """Label embedding table + masked transformer stack + classification head."""

    def __init__(self, config: IclModelConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        self.init_seed = init_seed
        d = config.model_dim
        self.label_embedding = nn.Parameter(torch.zeros(config.n_max, config.embed_dim))
        self.blocks = nn.ModuleList(
            [IclBlock(d, config.heads, config.feedforward_dim, config.dropout) for _ in range(config.layers)]
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_max)
        self._init_parameters(init_seed)
        if config.precision == "double":
            self.double()

    def _init_parameters(self, init_seed: int) -> None:
        gen = torch_generator(init_seed, "icl-init")
        with torch.no_grad():
            for name, m in self.named_modules():
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.weight.shape[1])
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
            self.label_embedding.normal_(0.0, 1.0, generator=gen).mul_(
                1.0 / math.sqrt(self.config.embed_dim)
            )

    def embed_labels(self, slots) -> torch.Tensor:
        """Label embeddings for a tensor of slot indices (row lookup)."""
        slots = torch.as_tensor(slots, dtype=torch.long)
        if slots.numel() and (slots.min() < 0 or slots.max() >= self.config.n_max):
            raise ValidationError(f"slots must lie in [0, {self.config.n_max})")
        return self.label_embedding[slots]

    def build_tokens(self, support_embeddings, support_slots, query_embedding) -> torch.Tensor:
        """Assemble the (B, m+1, 2d) token sequence [t_1 .. t_m, t_q].

        Support tokens concatenate image and label embeddings; the query token
        pads its label half with zeros.
        """
        v = torch.as_tensor(support_embeddings)
        if v.dim() == 2:
            v = v[None]
        vq = torch.as_tensor(query_embedding)
        if vq.dim() == 1:
            vq = vq[None]
        slots = torch.as_tensor(support_slots, dtype=torch.long)
        if slots.dim() == 1:
            slots = slots[None]
        d = self.config.embed_dim
        if v.shape[-1] != d or vq.shape[-1] != d:
            raise ValidationError(f"embedding dimension must be {d}")
        labels = self.embed_labels(slots).to(v.dtype)
        support_tokens = torch.cat([v, labels], dim=-1)
        query_token = torch.cat([vq, torch.zeros_like(vq)], dim=-1)[:, None, :]
        return torch.cat([support_tokens, query_token], dim=1)

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the transformer over (B, m+1, 2d) tokens; return (B, n_max) logits."""
        m = tokens.shape[1] - 1
        mask = attention_mask(m).to(tokens.device)
        h = tokens
        for block in self.blocks:
            h = block(h, mask)
        return self.head(self.final_norm(h[:, -1]))

    def forward(self, support_embeddings, support_slots, query_embedding) -> torch.Tensor:
        tokens = self.build_tokens(support_embeddings, support_slots, query_embedding)
        return self.forward_tokens(tokens)

    def layer_activations(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        """Hidden states after every block, for causality checks."""
        m = tokens.shape[1] - 1
        mask = attention_mask(m).to(tokens.device)
        states = []
        h = tokens
        for block in self.blocks:
            h = block(h, mask)
            states.append(h)
        return states


def icl_forward(model: IclModel, batch: EpisodeBatch, encoder: Encoder) -> torch.Tensor:
    """Encode a batch of episodes and return (B, n_max) query logits.

    Support and query images are embedded in one encoder forward; the model
    must be in eval mode for deterministic results (dropout off).
    """
    if batch.n_max > model.config.n_max:
        raise ValidationError(f"episode n_max {batch.n_max} exceeds model n_max {model.config.n_max}")
    slots = batch.stacked_support_slots()
    if slots.max() >= model.config.n_max:
        raise ValidationError("episode slots exceed the model's label slots")

    b, m = slots.shape
    supports = batch.stacked_support_pixels()
    queries = batch.stacked_query_pixels()
    if supports.shape[2:4] != tuple(encoder.config.input_size):
        raise ValidationError(
            f"episode image size {supports.shape[2:4]} does not match encoder input {encoder.config.input_size}"
        )

    dtype = next(model.parameters()).dtype
    flat = np.concatenate([supports.reshape(b * m, *supports.shape[2:]), queries], axis=0)
    embeddings = encoder(images_to_tensor(flat, dtype))
    support_emb = embeddings[: b * m].reshape(b, m, -1)
    query_emb = embeddings[b * m :]
    logits = model(support_emb, torch.from_numpy(slots), query_emb)
    if not torch.isfinite(logits).all():
        raise ValidationError("model produced non-finite logits")
    return logits


def predict(logits, active_slots) -> int:
    """Argmax over `active_slots` only; ties break toward the lowest slot."""
    logits = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValidationError(f"predict expects a single logit vector, got shape {logits.shape}")
    active = sorted(int(s) for s in set(active_slots))
    if not active:
        raise ValidationError("active_slots must be non-empty")
    if active[0] < 0 or active[-1] >= logits.shape[0]:
        raise ValidationError(f"active slots must lie in [0, {logits.shape[0]})")
    best = active[0]
    for slot in active[1:]:
        if logits[slot] > logits[best]:
            best = slot
    return best
