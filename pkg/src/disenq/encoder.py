"""Clip encoder: frame-order position embedding and temporal attention pooling.

A clip arrives as (frames, tokens, dim) token features. Each frame's tokens
go through a shared linear projection plus an additive learned position
embedding indexed by frame order. Temporal attention pooling then collapses
the frame axis independently at every token position:

    F[n] = sum_t a_t[n] * f_t[n],    a[:, n] = softmax_t(q . f_t[n])

so the pooled clip feature keeps the token axis (tokens, dim) and each
pooled token is a convex combination of that token position across frames.
"""

from __future__ import annotations

import torch
from torch import nn


class VideoEncoder(nn.Module):
    """Position-aware frame embedding followed by temporal attention pooling.

    Parameters are float64. ``max_frames`` bounds the number of position
    embeddings; clips must not exceed it.
    """

    def __init__(self, token_dim: int, max_frames: int = 8):
        super().__init__()
        if token_dim < 1 or max_frames < 1:
            raise ValueError("token_dim and max_frames must be >= 1")
        self.token_dim = token_dim
        self.max_frames = max_frames
        self.projection = nn.Parameter(torch.eye(token_dim, dtype=torch.float64))
        self.position = nn.Parameter(torch.zeros(max_frames, token_dim, dtype=torch.float64))
        # Zero score vector => exactly uniform temporal attention at init.
        self.pool_query = nn.Parameter(torch.zeros(token_dim, dtype=torch.float64))

    def initialize(self, rng):
        """Near-identity projection, small random positions and pool query."""
        with torch.no_grad():
            eye = torch.eye(self.token_dim, dtype=torch.float64)
            self.projection.copy_(eye + 0.02 * torch.from_numpy(
                rng.standard_normal((self.token_dim, self.token_dim))))
            self.position.copy_(0.02 * torch.from_numpy(
                rng.standard_normal((self.max_frames, self.token_dim))))
            self.pool_query.copy_(0.02 * torch.from_numpy(
                rng.standard_normal(self.token_dim)))

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Project tokens and add the per-frame position embedding.

        frames: (..., frames, tokens, dim) -> same shape.
        """
        if frames.ndim < 3:
            raise ValueError("frames must have shape (..., frames, tokens, dim)")
        n_frames = frames.shape[-3]
        if n_frames == 0:
            raise ValueError("clip has no frames")
        if n_frames > self.max_frames:
            raise ValueError(f"clip has {n_frames} frames, encoder supports {self.max_frames}")
        if frames.shape[-1] != self.token_dim:
            raise ValueError(
                f"token dim {frames.shape[-1]} does not match encoder dim {self.token_dim}")
        projected = frames @ self.projection.T
        return projected + self.position[:n_frames].unsqueeze(-2)

    def temporal_attention(self, embedded: torch.Tensor) -> torch.Tensor:
        """Attention weights over frames, per token position. Sums to 1 over
        the frame axis."""
        scores = embedded @ self.pool_query  # (..., frames, tokens)
        return torch.softmax(scores, dim=-2)

    def temporal_pool(self, embedded: torch.Tensor) -> torch.Tensor:
        """(..., frames, tokens, dim) -> (..., tokens, dim)."""
        if embedded.ndim < 3 or embedded.shape[-3] == 0:
            raise ValueError("temporal_pool needs at least one frame")
        weights = self.temporal_attention(embedded)
        return (weights.unsqueeze(-1) * embedded).sum(dim=-3)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """Full encoder: (..., frames, tokens, dim) -> (..., tokens, dim)."""
        return self.temporal_pool(self.embed_frames(frames))
