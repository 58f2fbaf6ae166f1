"""Retrieval head and protocol evaluation.

Identification is retrieval: for every probe clip, gallery clips are
ranked by similarity and scored with CMC Rank-k and mAP. The similarity
between two clips fuses the biometrics and motion cosine similarities with
weights from a small two-layer softmax scorer (or a fixed 0.5/0.5
baseline), so motion contributes exactly when it is informative.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

FEATURE_MODES = ("adaptive", "fixed", "biometrics", "motion", "nonbiometrics")


class AdaptiveWeigher(nn.Module):
    """Maps (sim_biometrics, sim_motion) to convex fusion weights.

    One hidden layer of width 16 with ReLU, two output logits, softmax.
    The output always lies on the probability simplex.
    """

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2, hidden, dtype=torch.float64),
            nn.ReLU(),
            nn.Linear(hidden, 2, dtype=torch.float64),
        )

    def initialize(self, rng):
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim >= 2:
                    p.copy_(0.1 * torch.from_numpy(rng.standard_normal(tuple(p.shape))))
                else:
                    p.zero_()

    def forward(self, sims: torch.Tensor) -> torch.Tensor:
        """sims (..., 2) -> weights (..., 2) on the simplex."""
        return torch.softmax(self.net(sims), dim=-1)


def safe_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 if either vector has (near-)zero norm."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-to-row cosine similarity matrix with zero-norm rows mapped to 0."""
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    sims = (A @ B.T) / np.clip(na, 1e-300, None) / np.clip(nb.T, 1e-300, None)
    sims[(na < 1e-12).ravel(), :] = 0.0
    sims[:, (nb < 1e-12).ravel()] = 0.0
    return sims


def fusion_weights(weigher: Optional[AdaptiveWeigher], sims: np.ndarray) -> np.ndarray:
    """Fusion weights per similarity pair; fixed (0.5, 0.5) without a weigher."""
    if weigher is None:
        return np.full(sims.shape, 0.5)
    with torch.no_grad():
        return weigher(torch.as_tensor(sims, dtype=torch.float64)).numpy()


def _stream_vector(features, stream: str) -> np.ndarray:
    value = features[stream] if isinstance(features, dict) else getattr(features, stream)
    return np.asarray(value, dtype=np.float64)


def pair_similarity(features_a, features_b, weigher: Optional[AdaptiveWeigher] = None) -> float:
    """Fused similarity of two clips' disentangled features.

    sim = alpha1 * cos(biometrics) + alpha2 * cos(motion); the weights come
    from the weigher (or 0.5/0.5). Always in [-1, 1].
    """
    sims = np.array([
        safe_cosine(_stream_vector(features_a, "biometrics"),
                    _stream_vector(features_b, "biometrics")),
        safe_cosine(_stream_vector(features_a, "motion"),
                    _stream_vector(features_b, "motion")),
    ])
    alphas = fusion_weights(weigher, sims)
    return float(alphas @ sims)


def similarity_scores(probe_features: dict, gallery_features: dict,
                      mode: str = "adaptive",
                      weigher: Optional[AdaptiveWeigher] = None) -> np.ndarray:
    """(n_probe, n_gallery) similarity matrix under a feature mode.

    Modes: "adaptive" (weigher fusion), "fixed" (0.5/0.5 fusion),
    or a single stream name.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}; valid: {FEATURE_MODES}")
    if mode in ("biometrics", "motion", "nonbiometrics"):
        return cosine_matrix(probe_features[mode], gallery_features[mode])
    sim_b = cosine_matrix(probe_features["biometrics"], gallery_features["biometrics"])
    sim_m = cosine_matrix(probe_features["motion"], gallery_features["motion"])
    sims = np.stack([sim_b, sim_m], axis=-1)
    alphas = fusion_weights(weigher if mode == "adaptive" else None, sims)
    return np.einsum("pgk,pgk->pg", alphas, sims)


def rank_gallery(scores: np.ndarray, allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """Order gallery indices by descending score; ties broken by ascending
    index (stable). ``allowed`` is an optional boolean candidate mask."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.arange(scores.shape[0])
    if allowed is not None:
        candidates = candidates[np.asarray(allowed, dtype=bool)]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


@dataclass
class RetrievalReport:
    """Per-protocol retrieval metrics plus per-probe ranking lists."""

    protocol: str
    feature_mode: str
    rank_k: dict  # {k: accuracy}
    mean_ap: float
    num_probes: int
    num_skipped: int
    per_probe: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "feature_mode": self.feature_mode,
            "rank1": self.rank_k.get(1),
            "rank5": self.rank_k.get(5),
            "rank10": self.rank_k.get(10),
            "mAP": self.mean_ap,
            "num_probes": self.num_probes,
            "num_skipped": self.num_skipped,
            "per_probe": self.per_probe,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def compute_cmc_map(rankings: Sequence[np.ndarray], probe_labels,
                    gallery_labels, ks=(1, 5, 10), protocol: str = "",
                    feature_mode: str = "", probe_ids=None) -> RetrievalReport:
    """CMC Rank-k and mAP over ranked gallery lists.

    Rank-k: fraction of scored probes whose top-k contains a correct
    identity. AP per probe: mean over correct positions i (1-based) of
    (#correct in top-i) / i. Probes with no correct candidate in their
    ranking are excluded from the metrics and counted as skipped.
    """
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    if len(rankings) != len(probe_labels):
        raise ValueError("one ranking per probe required")
    if len(probe_labels) == 0:
        raise ValueError("empty probe set")

    hits_at_k = {k: 0 for k in ks}
    average_precisions = []
    per_probe = []
    skipped = 0
    for p, ranking in enumerate(rankings):
        ranking = np.asarray(ranking, dtype=np.int64)
        correct = gallery_labels[ranking] == probe_labels[p]
        n_correct = int(correct.sum())
        record = {
            "probe": int(probe_ids[p]) if probe_ids is not None else p,
            "label": int(probe_labels[p]),
            "ranking": ranking.tolist(),
            "num_candidates": int(ranking.size),
        }
        if n_correct == 0:
            skipped += 1
            record["skipped"] = True
            per_probe.append(record)
            continue
        cum_correct = np.cumsum(correct)
        positions = np.flatnonzero(correct) + 1
        ap = float(np.mean(cum_correct[positions - 1] / positions))
        average_precisions.append(ap)
        for k in ks:
            if correct[:k].any():
                hits_at_k[k] += 1
        record["ap"] = ap
        record["first_correct_rank"] = int(positions[0])
        per_probe.append(record)

    num_scored = len(average_precisions)
    if num_scored == 0:
        raise ValueError("no probe has a correct gallery match")
    rank_k = {k: hits_at_k[k] / num_scored for k in ks}
    return RetrievalReport(
        protocol=protocol, feature_mode=feature_mode, rank_k=rank_k,
        mean_ap=float(np.mean(average_precisions)),
        num_probes=num_scored, num_skipped=skipped, per_probe=per_probe)


def evaluate_split(probe_features: dict, gallery_features: dict,
                   probe_labels, gallery_labels, probe_views=None,
                   gallery_views=None, exclude_same_view: bool = False,
                   mode: str = "adaptive", weigher=None, protocol: str = "",
                   probe_ids=None) -> RetrievalReport:
    """Rank every probe against the gallery and score the protocol."""
    scores = similarity_scores(probe_features, gallery_features, mode, weigher)
    rankings = []
    keep = []
    n_empty = 0
    for p in range(scores.shape[0]):
        allowed = None
        if exclude_same_view:
            allowed = np.asarray(gallery_views) != np.asarray(probe_views)[p]
            if not allowed.any():
                n_empty += 1
                logger.warning("probe %d: gallery empty after view exclusion, skipped", p)
                continue
        rankings.append(rank_gallery(scores[p], allowed))
        keep.append(p)
    if not rankings:
        raise ValueError("every probe was excluded by the view rule")
    report = compute_cmc_map(
        rankings, np.asarray(probe_labels)[keep], gallery_labels,
        protocol=protocol, feature_mode=mode,
        probe_ids=None if probe_ids is None else np.asarray(probe_ids)[keep])
    report.num_skipped += n_empty
    return report


def _inference_frames(dataset, indices, frames_per_clip: int) -> np.ndarray:
    """Clip frames for inference; longer ingested clips are subsampled
    deterministically (center start, stride 4)."""
    from .world import sample_frame_indices

    frames = dataset.frames_array(indices)
    if frames.shape[1] != frames_per_clip:
        sel = sample_frame_indices(frames.shape[1], frames_per_clip, stride=4)
        frames = frames[:, sel]
    return frames


def evaluate_protocol(model, dataset, split, mode: str = "adaptive",
                      batch_size: int = 128) -> RetrievalReport:
    """Embed probe and gallery clips text-free and score the protocol.

    Deterministic: the same checkpoint and split produce an identical
    report.
    """
    probe_idx = np.asarray(split.probe_indices)
    gallery_idx = np.asarray(split.gallery_indices)
    if probe_idx.size == 0 or gallery_idx.size == 0:
        raise ValueError("split has an empty probe or gallery set")
    probe_features = model.embed_clips(
        _inference_frames(dataset, probe_idx, model.frames_per_clip), batch_size)
    gallery_features = model.embed_clips(
        _inference_frames(dataset, gallery_idx, model.frames_per_clip), batch_size)
    identities = dataset.labels("identity")
    views = dataset.labels("view")
    weigher = model.weigher if mode == "adaptive" else None
    return evaluate_split(
        probe_features, gallery_features,
        probe_labels=identities[probe_idx], gallery_labels=identities[gallery_idx],
        probe_views=views[probe_idx], gallery_views=views[gallery_idx],
        exclude_same_view=split.protocol.exclude_same_view,
        mode=mode, weigher=weigher, protocol=split.protocol.name,
        probe_ids=probe_idx)
