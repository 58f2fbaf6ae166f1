"""Training objective: identity/action cross-entropy, batch-hard triplet on
biometrics features, |cosine| orthogonality between biometrics and
non-biometrics features, and their weighted sum. Also the P-identities x
K-clips batch sampler that makes in-batch triplet mining well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

_EPS_SQ = 1e-24  # squared-distance floor; keeps sqrt gradients finite


@dataclass
class LossWeights:
    """Loss-term weights and the triplet margin."""

    lambda_identity: float = 0.01
    lambda_triplet: float = 0.01
    lambda_orthogonality: float = 0.01
    lambda_action: float = 0.01
    margin: float = 0.3

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean -log softmax(logits)[label]; accepts one sample or a batch."""
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim == 0:
        labels = labels.unsqueeze(0)
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("labels and logits batch sizes differ")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    log_probs = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_probs[torch.arange(logits.shape[0]), labels].mean()


def pairwise_distances(features: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix with a tiny floor under the sqrt."""
    sq = (features * features).sum(dim=1)
    d2 = sq.unsqueeze(0) + sq.unsqueeze(1) - 2.0 * features @ features.T
    return torch.sqrt(d2.clamp_min(_EPS_SQ))


def triplet_loss(features: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss.

    Per anchor: hardest positive = max distance over same-label others,
    hardest negative = min distance over different labels; hinge at the
    margin, averaged over anchors. Requires >= 2 identities and >= 2
    samples for every identity present (the PK sampler guarantees this).
    """
    if features.ndim != 2:
        raise ValueError("features must be (batch, dim)")
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.shape[0] != features.shape[0]:
        raise ValueError("labels and features batch sizes differ")
    unique, counts = torch.unique(labels, return_counts=True)
    if unique.numel() < 2:
        raise ValueError("triplet loss needs >= 2 identities in the batch")
    if counts.min() < 2:
        bad = unique[counts.argmin()].item()
        raise ValueError(f"identity {bad} has a single sample in the batch")

    dist = pairwise_distances(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    neg_inf = torch.tensor(-np.inf, dtype=dist.dtype)
    pos_inf = torch.tensor(np.inf, dtype=dist.dtype)
    hardest_pos = torch.where(pos_mask, dist, neg_inf).max(dim=1).values
    hardest_neg = torch.where(neg_mask, dist, pos_inf).min(dim=1).values
    return torch.clamp(hardest_pos - hardest_neg + margin, min=0.0).mean()


def orthogonality_loss(features_a: torch.Tensor, features_b: torch.Tensor,
                       mode: str = "cosine") -> torch.Tensor:
    """Mean |cos| between row-aligned feature batches.

    mode="raw" uses the absolute inner product instead (the literal
    unnormalized constraint); the cosine form is the default because the
    raw norm can be minimized by shrinking feature norms.
    Rows with near-zero norm contribute 0.
    """
    if features_a.shape != features_b.shape:
        raise ValueError(
            f"shape mismatch: {tuple(features_a.shape)} vs {tuple(features_b.shape)}")
    if features_a.ndim == 1:
        features_a = features_a.unsqueeze(0)
        features_b = features_b.unsqueeze(0)
    dots = (features_a * features_b).sum(dim=1)
    if mode == "raw":
        return dots.abs().mean()
    if mode != "cosine":
        raise ValueError(f"unknown orthogonality mode {mode!r}")
    norm_a = features_a.norm(dim=1)
    norm_b = features_b.norm(dim=1)
    cos = dots / (norm_a * norm_b).clamp_min(1e-300)
    valid = (norm_a > 1e-12) & (norm_b > 1e-12)
    return torch.where(valid, cos.abs(), torch.zeros_like(cos)).mean()


def total_loss(components: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the loss components present.

    components maps {"identity", "triplet", "orthogonality", "action"} to
    scalar tensors; a NaN component is reported by name.
    """
    weight_map = {
        "identity": weights.lambda_identity,
        "triplet": weights.lambda_triplet,
        "orthogonality": weights.lambda_orthogonality,
        "action": weights.lambda_action,
    }
    unknown = set(components) - set(weight_map)
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    total = None
    for name, value in components.items():
        if not torch.is_tensor(value):
            value = torch.as_tensor(value, dtype=torch.float64)
        if torch.isnan(value).any():
            raise FloatingPointError(f"loss component {name!r} is NaN")
        term = weight_map[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components given")
    return total


def pk_sample(identity_labels, p: int, k: int,
              rng: np.random.Generator) -> np.ndarray:
    """Sample a batch of P distinct identities x K clips each.

    Returns indices into ``identity_labels``. Raises if fewer than P
    identities have at least K clips.
    """
    labels = np.asarray(identity_labels)
    if p < 2 or k < 2:
        raise ValueError("PK sampling needs p >= 2 and k >= 2")
    by_identity = {}
    for idx, label in enumerate(labels):
        by_identity.setdefault(int(label), []).append(idx)
    eligible = sorted(i for i, idxs in by_identity.items() if len(idxs) >= k)
    if len(eligible) < p:
        raise ValueError(
            f"PK sampling needs {p} identities with >= {k} clips; "
            f"only {len(eligible)} available")
    chosen = rng.choice(np.array(eligible), size=p, replace=False)
    batch = []
    for identity in chosen:
        idxs = np.array(by_identity[int(identity)])
        batch.extend(rng.choice(idxs, size=k, replace=False).tolist())
    return np.array(batch, dtype=np.int64)
