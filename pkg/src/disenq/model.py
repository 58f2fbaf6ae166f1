"""Full identification model: clip encoder, querying transformer,
identity/action classifier heads, and the adaptive fusion weigher.

The heads exist only to drive training; retrieval uses the pooled stream
features and the weigher. Everything runs in float64 on CPU.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import nn

from .encoder import VideoEncoder
from .qformer import DisenQ, DisenQConfig, DisentangledFeatures
from .retrieval import AdaptiveWeigher


class DisenQModel(nn.Module):
    """Composite model over (frames, tokens, dim) clips."""

    def __init__(self, disenq_config: DisenQConfig, num_identities: int,
                 num_actions: int, frames_per_clip: int = 8):
        super().__init__()
        if num_identities < 1 or num_actions < 1:
            raise ValueError("num_identities and num_actions must be >= 1")
        self.disenq_config = disenq_config
        self.num_identities = num_identities
        self.num_actions = num_actions
        self.frames_per_clip = frames_per_clip
        self.encoder = VideoEncoder(disenq_config.visual_dim, max_frames=frames_per_clip)
        self.qformer = DisenQ(disenq_config)
        d = disenq_config.model_dim
        self.identity_head = (nn.Linear(d, num_identities, dtype=torch.float64)
                              if "biometrics" in disenq_config.streams else None)
        self.action_head = (nn.Linear(d, num_actions, dtype=torch.float64)
                            if "motion" in disenq_config.streams else None)
        self.weigher = AdaptiveWeigher()

    def initialize(self, seed: int = 0):
        """Deterministic init of every parameter group from one numpy seed."""
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD15E)))
        self.encoder.initialize(rng)
        self.qformer.initialize(rng)
        with torch.no_grad():
            for head in (self.identity_head, self.action_head):
                if head is not None:
                    head.weight.copy_(0.02 * torch.from_numpy(
                        rng.standard_normal(tuple(head.weight.shape))))
                    head.bias.zero_()
        self.weigher.initialize(rng)
        return self

    def forward_features(self, frames: torch.Tensor, texts=None,
                         mode: str = "train", **kwargs) -> dict:
        """Encode clips and return {stream: (batch, model_dim)} features."""
        pooled = self.encoder(frames)
        return self.qformer(pooled, texts=texts, mode=mode, **kwargs)

    @torch.no_grad()
    def embed_clips(self, frames: np.ndarray, batch_size: int = 128) -> dict:
        """Text-free inference features for a clip array (n, T, N, D)."""
        frames = np.asarray(frames, dtype=np.float64)
        outputs = {s: [] for s in self.disenq_config.streams}
        for start in range(0, frames.shape[0], batch_size):
            chunk = torch.as_tensor(frames[start:start + batch_size])
            feats = self.forward_features(chunk, texts=None, mode="infer")
            for stream, value in feats.items():
                outputs[stream].append(value.numpy())
        return {s: np.concatenate(v) for s, v in outputs.items()}

    def embed_dataset(self, dataset, indices=None, batch_size: int = 128) -> DisentangledFeatures:
        """Inference features for dataset clips as a DisentangledFeatures."""
        frames = dataset.frames_array(indices)
        return DisentangledFeatures.from_dict(self.embed_clips(frames, batch_size))

    def named_parameter_arrays(self) -> dict:
        """Parameters as float64 numpy arrays keyed by their torch names."""
        return {name: p.detach().numpy().copy()
                for name, p in sorted(self.named_parameters())}

    def load_parameter_arrays(self, arrays: dict):
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        with torch.no_grad():
            for name, p in params.items():
                value = np.asarray(arrays[name])
                if value.shape != tuple(p.shape):
                    raise ValueError(
                        f"parameter {name}: shape {value.shape} != {tuple(p.shape)}")
                p.copy_(torch.as_tensor(value, dtype=p.dtype))
        return self
