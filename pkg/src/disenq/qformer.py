"""Disentangling querying transformer.

Three learnable query sets — biometrics, motion, non-biometrics — are
refined by a stack of shared layers. Within a layer each stream:

1. self-attends over its own queries only (isolation: other streams never
   appear in the attention context),
2. cross-attends over the projected visual tokens concatenated with that
   stream's projected text embedding (training) or the visual tokens alone
   (inference),
3. passes through a shared feed-forward block.

All layer parameters are shared across streams; the streams are run as
three separate passes through the same modules, which gives exact
activation isolation without masking. Final per-stream outputs are
mean-pooled over the queries into one vector per stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

STREAMS = ("biometrics", "motion", "nonbiometrics")


@dataclass
class DisenQConfig:
    """Size and wiring of the querying transformer."""

    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    queries_per_stream: int = 4
    visual_dim: int = 64
    text_dim: int = 64
    ffn_dim: Optional[int] = None  # defaults to 4 * model_dim
    share_input_projection: bool = True
    streams: tuple = STREAMS

    def __post_init__(self):
        self.streams = tuple(self.streams)
        self.validate()

    def validate(self):
        for name in ("layers", "heads", "model_dim", "queries_per_stream",
                     "visual_dim", "text_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a count >= 1, got {value!r}")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim ({self.model_dim}) must be divisible by heads ({self.heads})")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ValueError("ffn_dim must be >= 1")
        if not self.streams:
            raise ValueError("at least one query stream is required")
        unknown = set(self.streams) - set(STREAMS)
        if unknown:
            raise ValueError(f"unknown streams {sorted(unknown)}; valid: {STREAMS}")
        if len(set(self.streams)) != len(self.streams):
            raise ValueError("duplicate stream names")

    @property
    def resolved_ffn_dim(self) -> int:
        return 4 * self.model_dim if self.ffn_dim is None else self.ffn_dim

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DisenQConfig":
        d = dict(d)
        d["streams"] = tuple(d.get("streams", STREAMS))
        return cls(**d)


@dataclass
class DisentangledFeatures:
    """Pooled per-stream feature vectors for a batch of clips."""

    biometrics: Optional[np.ndarray] = None
    motion: Optional[np.ndarray] = None
    nonbiometrics: Optional[np.ndarray] = None

    def get(self, stream: str) -> np.ndarray:
        value = getattr(self, stream)
        if value is None:
            raise ValueError(f"stream {stream!r} was not produced (ablated model?)")
        return value

    @classmethod
    def from_dict(cls, d: dict) -> "DisentangledFeatures":
        return cls(**{k: v for k, v in d.items() if k in STREAMS})


def _linear(in_dim: int, out_dim: int) -> nn.Linear:
    return nn.Linear(in_dim, out_dim, dtype=torch.float64)


class MultiHeadAttention(nn.Module):
    """Standard multi-head attention; query and context may differ."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = _linear(dim, dim)
        self.k_proj = _linear(dim, dim)
        self.v_proj = _linear(dim, dim)
        self.out_proj = _linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, length, _ = x.shape
        return x.view(b, length, self.heads, self.head_dim).transpose(1, 2)

    def attention_weights(self, query: torch.Tensor, context: torch.Tensor,
                          context_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(batch, heads, len_q, len_ctx) softmax weights; True entries of
        ``context_mask`` (batch, len_ctx) are excluded from the context."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if context_mask is not None:
            scores = scores.masked_fill(
                context_mask[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, query: torch.Tensor, context: torch.Tensor,
                context_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if query.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ValueError(
                f"attention expects dim {self.dim}, got query {query.shape[-1]} "
                f"/ context {context.shape[-1]}")
        weights = self.attention_weights(query, context, context_mask)
        v = self._split(self.v_proj(context))
        out = weights @ v
        b, _, lq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, lq, self.dim)
        return self.out_proj(out)


class DisenQLayer(nn.Module):
    """One shared layer: isolated self-attention, cross-attention, FFN,
    each with residual + post-norm."""

    def __init__(self, config: DisenQConfig):
        super().__init__()
        d = config.model_dim
        self.self_attn = MultiHeadAttention(d, config.heads)
        self.cross_attn = MultiHeadAttention(d, config.heads)
        self.ffn = nn.Sequential(
            _linear(d, config.resolved_ffn_dim),
            nn.GELU(),
            _linear(config.resolved_ffn_dim, d),
        )
        self.norm_self = nn.LayerNorm(d, dtype=torch.float64)
        self.norm_cross = nn.LayerNorm(d, dtype=torch.float64)
        self.norm_ffn = nn.LayerNorm(d, dtype=torch.float64)

    def self_attend(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm_self(x + self.self_attn(x, x))

    def cross_attend(self, x: torch.Tensor, context: torch.Tensor,
                     context_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.norm_cross(x + self.cross_attn(x, context, context_mask))

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm_ffn(x + self.ffn(x))


def _stream_text(texts, stream: str):
    if isinstance(texts, dict):
        return texts[stream]
    return getattr(texts, stream)


class DisenQ(nn.Module):
    """The disentangling querying transformer over pooled visual tokens."""

    def __init__(self, config: DisenQConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.model_dim
        self.queries = nn.ParameterDict({
            stream: nn.Parameter(torch.zeros(config.queries_per_stream, d,
                                             dtype=torch.float64))
            for stream in config.streams
        })
        if config.share_input_projection:
            self.visual_proj = _linear(config.visual_dim, d)
            # One projection over the concatenated [F, T_x] sequence: when
            # the dims agree, text tokens go through the *same* map as
            # visual tokens, so text-tuned queries match visual keys too.
            self.text_proj = (self.visual_proj if config.text_dim == config.visual_dim
                              else _linear(config.text_dim, d))
        else:
            self.visual_proj = nn.ModuleDict(
                {s: _linear(config.visual_dim, d) for s in config.streams})
            self.text_proj = nn.ModuleDict(
                {s: _linear(config.text_dim, d) for s in config.streams})
        self.layers = nn.ModuleList(
            DisenQLayer(config) for _ in range(config.layers))

    def initialize(self, rng):
        """Queries ~ N(0, 0.02^2); linear weights N(0, 0.02^2), zero biases."""
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim >= 2:
                    p.copy_(0.02 * torch.from_numpy(rng.standard_normal(tuple(p.shape))))
                else:
                    p.zero_()
            for module in self.modules():
                if isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def _project_visual(self, stream: str, visual: torch.Tensor) -> torch.Tensor:
        proj = self.visual_proj if self.config.share_input_projection else self.visual_proj[stream]
        return proj(visual)

    def _project_text(self, stream: str, text: torch.Tensor) -> torch.Tensor:
        proj = self.text_proj if self.config.share_input_projection else self.text_proj[stream]
        return proj(text)

    def self_attend_isolated(self, stream_queries: torch.Tensor,
                             layer_index: int = 0) -> torch.Tensor:
        """Self-attention restricted to one stream's queries: keys and values
        come only from that stream."""
        x, squeeze = _ensure_batched(stream_queries)
        out = self.layers[layer_index].self_attend(x)
        return out.squeeze(0) if squeeze else out

    def cross_attend(self, stream_queries: torch.Tensor, visual: torch.Tensor,
                     text: Optional[torch.Tensor] = None, stream: str = "biometrics",
                     layer_index: int = 0) -> torch.Tensor:
        """Cross-attention over [visual tokens; text token] (text optional)."""
        if visual is None:
            raise ValueError("cross_attend requires the pooled visual feature")
        x, squeeze = _ensure_batched(stream_queries)
        vis, _ = _ensure_batched(visual)
        context = self._project_visual(stream, vis)
        if text is not None:
            t = text if text.ndim == 2 else text.unsqueeze(0)
            context = torch.cat([context, self._project_text(stream, t).unsqueeze(1)], dim=1)
        out = self.layers[layer_index].cross_attend(x, context)
        return out.squeeze(0) if squeeze else out

    def forward(self, visual: torch.Tensor, texts=None, mode: str = "train",
                text_drop=None, collect_attention: bool = False):
        """Run all streams; returns {stream: (batch, model_dim)} pooled features.

        Train mode requires a text embedding per active stream; inference
        mode never touches ``texts``. ``text_drop`` optionally masks the
        text token out of the cross-attention context per sample
        ({stream: (batch,) bool}, True = drop) — training-time modality
        dropout that forces the visual path to carry the signal.
        With ``collect_attention`` the return value is
        (features, {stream: [per-layer cross-attention weights]}).
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if visual is None:
            raise ValueError("visual feature is required")
        vis, _ = _ensure_batched(visual)
        if vis.shape[-1] != self.config.visual_dim:
            raise ValueError(
                f"visual dim {vis.shape[-1]} does not match config ({self.config.visual_dim})")
        if mode == "train" and texts is None:
            raise ValueError("train mode requires text embeddings for every stream")

        outputs = {}
        attention = {}
        for stream in self.config.streams:
            context = self._project_visual(stream, vis)
            mask = None
            if mode == "train":
                text = _stream_text(texts, stream)
                if not torch.is_tensor(text):
                    text = torch.as_tensor(np.asarray(text), dtype=torch.float64)
                if text.ndim == 1:
                    text = text.unsqueeze(0)
                if text.shape[-1] != self.config.text_dim:
                    raise ValueError(
                        f"text dim {text.shape[-1]} does not match config "
                        f"({self.config.text_dim})")
                context = torch.cat(
                    [context, self._project_text(stream, text).unsqueeze(1)], dim=1)
                if text_drop is not None and stream in text_drop:
                    drop = torch.as_tensor(np.asarray(text_drop[stream]), dtype=torch.bool)
                    mask = torch.zeros(context.shape[:2], dtype=torch.bool)
                    mask[:, -1] = drop
            x = self.queries[stream].unsqueeze(0).expand(vis.shape[0], -1, -1)
            maps = []
            for layer in self.layers:
                x = layer.self_attend(x)
                if collect_attention:
                    maps.append(layer.cross_attn.attention_weights(
                        x, context, mask).detach())
                x = layer.cross_attend(x, context, mask)
                x = layer.feed_forward(x)
            outputs[stream] = x.mean(dim=1)
            attention[stream] = maps
        return (outputs, attention) if collect_attention else outputs


def _ensure_batched(x: torch.Tensor):
    """Add a batch axis to a single (len, dim) input; report if it was added."""
    if x.ndim == 2:
        return x.unsqueeze(0), True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected 2-d or 3-d tensor, got shape {tuple(x.shape)}")
