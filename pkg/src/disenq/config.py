"""Run configuration: one nested JSON document that pins every knob of a
run (world, model sizes, loss weights, optimizer schedule, protocols).

Round-trip contract: ``RunConfig.from_dict(cfg.to_dict()) == cfg`` and the
JSON file form reparses to an equal object. The canonical JSON encoding
also defines the config hash that checkpoints embed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .qformer import DisenQConfig
from .world import WorldSpec


@dataclass
class OptimizerConfig:
    """AdamW schedule and batch geometry."""

    lr: float = 1e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 60
    batch_p: int = 8  # identities per batch
    batch_k: int = 4  # clips per identity
    pairwise_weight: float = 0.01
    pairwise_temperature: float = 5.0
    text_dropout: float = 0.5  # per-clip, per-stream text-token dropout
    num_threads: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ValueError("batch_p and batch_k must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.text_dropout <= 1.0:
            raise ValueError("text_dropout must be in [0, 1]")
        if self.num_threads < 1:
            raise ValueError("num_threads must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_k

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


DEFAULT_PROTOCOLS = (
    "same_activity/include_view",
    "same_activity/exclude_view",
    "cross_activity/include_view",
    "cross_activity/exclude_view",
)


@dataclass
class RunConfig:
    """Everything a generate/train/evaluate/diagnose pipeline needs."""

    world: WorldSpec = field(default_factory=lambda: WorldSpec(
        num_identities=10, num_actions=4, num_clothing=2, num_views=2,
        clips_per_combination=2))
    disenq: DisenQConfig = field(default_factory=DisenQConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    protocols: tuple = DEFAULT_PROTOCOLS
    orthogonality_mode: str = "cosine"
    text_mode: str = "per_stream"  # "pooled" feeds every stream the mean text
    adaptive_fusion: bool = True
    split_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.protocols = tuple(self.protocols)
        if self.orthogonality_mode not in ("cosine", "raw"):
            raise ValueError("orthogonality_mode must be 'cosine' or 'raw'")
        if self.text_mode not in ("per_stream", "pooled"):
            raise ValueError("text_mode must be 'per_stream' or 'pooled'")
        if self.disenq.visual_dim != self.world.token_dim:
            raise ValueError(
                f"disenq.visual_dim ({self.disenq.visual_dim}) must equal "
                f"world.token_dim ({self.world.token_dim})")
        if self.disenq.text_dim != self.world.resolved_text_dim:
            raise ValueError(
                f"disenq.text_dim ({self.disenq.text_dim}) must equal the world "
                f"text dimension ({self.world.resolved_text_dim})")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "disenq": self.disenq.to_dict(),
            "losses": self.losses.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "protocols": list(self.protocols),
            "orthogonality_mode": self.orthogonality_mode,
            "text_mode": self.text_mode,
            "adaptive_fusion": self.adaptive_fusion,
            "split_seed": self.split_seed,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            world=WorldSpec.from_dict(d["world"]),
            disenq=DisenQConfig.from_dict(d["disenq"]),
            losses=LossWeights.from_dict(d["losses"]),
            optimizer=OptimizerConfig.from_dict(d["optimizer"]),
            protocols=tuple(d.get("protocols", DEFAULT_PROTOCOLS)),
            orthogonality_mode=d.get("orthogonality_mode", "cosine"),
            text_mode=d.get("text_mode", "per_stream"),
            adaptive_fusion=d.get("adaptive_fusion", True),
            split_seed=d.get("split_seed", 0),
            seed=d.get("seed", 0),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
