"""Disentanglement diagnostics.

Quantifies what each feature stream actually carries:

* InfoNCE mutual-information lower bounds between stream pairs (a bilinear
  critic trained on aligned pairs; the bound is ln(batch) minus the final
  contrastive loss, with the shuffled-pair loss as an independence
  reference),
* cross-feature leakage probes (k-fold linear classifiers vs chance),
* orthogonality statistics between biometrics and non-biometrics features,
* embedding export for external projection tools.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .optim import AdamW

EXPORT_VERSION = 1


@dataclass
class MIEstimate:
    """InfoNCE mutual-information estimate for one feature pair (nats)."""

    pair: str
    lower_bound: float
    matched_loss: float
    mismatched_loss: float
    batch_size: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ProbeResult:
    """Cross-validated linear-probe accuracy against its chance level."""

    feature: str
    target: str
    accuracy: float
    chance: float
    fold_accuracies: list

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _infonce_loss(scores: torch.Tensor) -> torch.Tensor:
    """-mean log softmax diagonal; >= 0, and ln(batch) for an uninformative critic."""
    log_probs = scores - torch.logsumexp(scores, dim=1, keepdim=True)
    return -log_probs.diagonal().mean()


def infonce_mi(X, Y, batch_size: int = 64, steps: int = 400, lr: float = 1e-2,
               eval_batches: int = 50, seed: int = 0, pair: str = "") -> MIEstimate:
    """Train a bilinear critic x^T W y with InfoNCE on aligned pairs and
    report the resulting MI lower bound, ln(batch_size) - loss.

    The mismatched loss (same critic, shuffled pairs) should sit near
    ln(batch_size): it is the independence reference.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must be 2-d with equal sample counts")
    n = X.shape[0]
    if n < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} samples, got {n}")

    rng = np.random.default_rng(seed)
    # Normalize per-dimension so the critic's learning rate is scale-free.
    def standardize(A):
        std = A.std(axis=0)
        return (A - A.mean(axis=0)) / np.where(std < 1e-12, 1.0, std)

    Xs = torch.as_tensor(standardize(X))
    Ys = torch.as_tensor(standardize(Y))
    critic = torch.zeros(X.shape[1], Y.shape[1], dtype=torch.float64, requires_grad=True)
    opt = AdamW({"critic": critic}, lr=lr, weight_decay=0.0)
    for _ in range(steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        scores = Xs[idx] @ critic @ Ys[idx].T
        loss = _infonce_loss(scores)
        opt.zero_grad()
        loss.backward()
        opt.step()

    @torch.no_grad()
    def mean_eval_loss(perm=None) -> float:
        total = 0.0
        for _ in range(eval_batches):
            idx = rng.choice(n, size=batch_size, replace=False)
            rows = Xs[idx]
            cols = Ys[perm[idx]] if perm is not None else Ys[idx]
            total += float(_infonce_loss(rows @ critic @ cols.T))
        return total / eval_batches

    matched = mean_eval_loss()
    mismatched = mean_eval_loss(perm=rng.permutation(n))
    return MIEstimate(
        pair=pair, lower_bound=math.log(batch_size) - matched,
        matched_loss=matched, mismatched_loss=mismatched, batch_size=batch_size)


def leakage_probe(features, labels, folds: int = 5, seed: int = 0,
                  feature_name: str = "", target_name: str = "",
                  max_iter: int = 1000) -> ProbeResult:
    """k-fold cross-validated multinomial logistic-regression accuracy.

    Chance is the frequency of the majority class. A stream is "leaking"
    a label exactly when this accuracy clears chance by a margin.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, d) aligned with labels")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("leakage probe needs >= 2 classes")
    if counts.min() < 5:
        raise ValueError(
            f"leakage probe needs >= 5 samples per class; class {classes[counts.argmin()]} "
            f"has {counts.min()}")

    chance = counts.max() / y.shape[0]
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    fold_accuracies = []
    for train_idx, test_idx in skf.split(X, y):
        clf = LogisticRegression(max_iter=max_iter)
        clf.fit(X[train_idx], y[train_idx])
        fold_accuracies.append(float(clf.score(X[test_idx], y[test_idx])))
    return ProbeResult(
        feature=feature_name, target=target_name,
        accuracy=float(np.mean(fold_accuracies)), chance=float(chance),
        fold_accuracies=fold_accuracies)


def orthogonality_stats(features_a, features_b) -> dict:
    """Mean and max |cosine| over aligned rows."""
    A = np.asarray(features_a, dtype=np.float64)
    B = np.asarray(features_b, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError("aligned feature sets required")
    norms = np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1)
    cos = np.where(norms > 1e-12, np.abs((A * B).sum(axis=1)) / np.clip(norms, 1e-300, None), 0.0)
    return {"mean_abs_cos": float(cos.mean()), "max_abs_cos": float(cos.max())}


def export_embeddings(model, dataset, path) -> Path:
    """Write per-clip stream features (float32 block format) plus a JSON
    labels sidecar for external projection tools."""
    if len(dataset) == 0:
        raise ValueError("cannot export embeddings for an empty dataset")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features = model.embed_clips(dataset.frames_array())
    streams = list(model.disenq_config.streams)
    stacked = np.stack([features[s] for s in streams], axis=1).astype("<f4")
    header = np.array([stacked.shape[0], stacked.shape[1], stacked.shape[2],
                       EXPORT_VERSION], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(stacked).tobytes())
    sidecar = {
        "streams": streams,
        "clips": [{
            "clip_id": s.clip_id, "identity": int(s.identity), "action": int(s.action),
            "clothing": int(s.clothing), "view": int(s.view),
        } for s in dataset.samples],
    }
    with open(path.with_suffix(path.suffix + ".labels.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_embeddings(path):
    """Reload an embedding export: (array (n, streams, dim), sidecar dict)."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(16), dtype="<i4")
        n, n_streams, dim, version = (int(x) for x in header)
        if version != EXPORT_VERSION:
            raise ValueError(f"unsupported embedding export version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * n_streams * dim:
        raise ValueError("embedding export payload does not match its header")
    with open(path.with_suffix(path.suffix + ".labels.json")) as fh:
        sidecar = json.load(fh)
    return data.reshape(n, n_streams, dim).copy(), sidecar


def run_diagnostics(model, dataset, batch_size: int = 64, steps: int = 200,
                    folds: int = 5, seed: int = 0, max_samples: int = 4000) -> dict:
    """Full diagnostic suite against a model checkpoint: MI estimates for
    every stream pair (plus the self-MI ceiling reference), identity and
    action probes per stream, and orthogonality statistics."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    indices = np.arange(n) if n <= max_samples else np.sort(
        rng.choice(n, size=max_samples, replace=False))
    features = model.embed_clips(dataset.frames_array(indices))
    identities = dataset.labels("identity")[indices]
    actions = dataset.labels("action")[indices]
    streams = list(model.disenq_config.streams)

    report = {"num_clips": int(indices.size), "streams": streams}

    mi_pairs = [(a, b) for i, a in enumerate(streams) for b in streams[i:]]
    report["mutual_information"] = [
        infonce_mi(features[a], features[b], batch_size=batch_size, steps=steps,
                   seed=seed, pair=f"{a}~{b}").to_dict()
        for a, b in mi_pairs
    ]
    report["probes"] = [
        leakage_probe(features[s], target_labels, folds=folds, seed=seed,
                      feature_name=s, target_name=target_name).to_dict()
        for s in streams
        for target_name, target_labels in (("identity", identities), ("action", actions))
    ]
    if "biometrics" in features and "nonbiometrics" in features:
        report["orthogonality"] = orthogonality_stats(
            features["biometrics"], features["nonbiometrics"])
    return report
