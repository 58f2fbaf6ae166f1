"""sklearn-style wrapper around the training pipeline.

``DisenQEmbedder`` is a fit/transform representation learner: fit on clip
arrays with identity labels (plus action labels and text triplets), then
transform clips into concatenated disentangled features or predict the
training identities directly. It composes with sklearn tooling via
``BaseEstimator`` (``get_params``/``set_params``/cloning).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import OptimizerConfig, RunConfig
from .losses import LossWeights
from .qformer import STREAMS, DisenQConfig
from .train import Trainer
from .validation import check_clips_array, check_labels, check_text_array
from .world import Dataset, TextTriplet, VideoSample, WorldSpec


class DisenQEmbedder(BaseEstimator, TransformerMixin):
    """Disentangling clip embedder with an sklearn estimator surface.

    Parameters mirror the run-config defaults (60 epochs of AdamW at the
    published settings); pass smaller ``epochs`` / larger ``lr`` for toy
    data. ``fit`` requires per-clip text triplets — the model trains with
    language guidance and embeds without it.
    """

    def __init__(self, layers=2, heads=4, model_dim=64, queries_per_stream=4,
                 streams=STREAMS, epochs=60, lr=1e-4, weight_decay=5e-2,
                 batch_p=8, batch_k=4, margin=0.3, lambda_identity=0.01,
                 lambda_triplet=0.01, lambda_orthogonality=0.01,
                 lambda_action=0.01, orthogonality_mode="cosine",
                 adaptive_fusion=True, text_mode="per_stream", seed=0):
        self.layers = layers
        self.heads = heads
        self.model_dim = model_dim
        self.queries_per_stream = queries_per_stream
        self.streams = streams
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_p = batch_p
        self.batch_k = batch_k
        self.margin = margin
        self.lambda_identity = lambda_identity
        self.lambda_triplet = lambda_triplet
        self.lambda_orthogonality = lambda_orthogonality
        self.lambda_action = lambda_action
        self.orthogonality_mode = orthogonality_mode
        self.adaptive_fusion = adaptive_fusion
        self.text_mode = text_mode
        self.seed = seed

    def _build_dataset(self, X, y_enc, actions_enc, texts) -> Dataset:
        n, frames, tokens, dim = X.shape
        samples = [VideoSample(
            clip_id=f"clip_{i:06d}", frames=X[i].astype(np.float32),
            identity=int(y_enc[i]), action=int(actions_enc[i]),
            clothing=0, view=0, key_frame_index=frames // 2,
        ) for i in range(n)]
        triplets = [TextTriplet(
            biometrics=texts[i, 0].astype(np.float32),
            motion=texts[i, 1].astype(np.float32),
            nonbiometrics=texts[i, 2].astype(np.float32),
        ) for i in range(n)]
        return Dataset(
            samples=samples, texts=triplets, frames_per_clip=frames,
            tokens_per_frame=tokens, token_dim=dim, text_dim=texts.shape[2],
            num_identities=int(y_enc.max()) + 1,
            num_actions=int(actions_enc.max()) + 1,
            num_clothing=1, num_views=1)

    def fit(self, X, y, actions=None, texts=None):
        """Train on clips X (n, frames, tokens, dim) with identity labels y.

        actions: per-clip action labels (required when the motion stream is
        active). texts: (n, 3, text_dim) embeddings ordered biometrics /
        motion / non-biometrics.
        """
        X = check_clips_array(X)
        n = X.shape[0]
        if texts is None:
            raise ValueError(
                "fit requires text triplets (n, 3, text_dim); inference-only "
                "data cannot train the model")
        texts = check_text_array(texts, n)
        y = np.asarray(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        y_enc = check_labels(y_enc, n, name="y")
        streams = tuple(self.streams)
        if actions is None:
            if "motion" in streams:
                raise ValueError("actions are required when the motion stream is active")
            actions_enc = np.zeros(n, dtype=np.int64)
            self.action_classes_ = np.array([0])
        else:
            self.action_classes_, actions_enc = np.unique(np.asarray(actions),
                                                          return_inverse=True)
            actions_enc = check_labels(actions_enc, n, name="actions")

        dataset = self._build_dataset(X, y_enc, actions_enc, texts)
        config = RunConfig(
            world=WorldSpec(
                num_identities=dataset.num_identities, num_actions=dataset.num_actions,
                num_clothing=1, num_views=1, clips_per_combination=1,
                frames_per_clip=dataset.frames_per_clip,
                tokens_per_frame=dataset.tokens_per_frame,
                token_dim=dataset.token_dim, text_dim=dataset.text_dim,
                seed=self.seed),
            disenq=DisenQConfig(
                layers=self.layers, heads=self.heads, model_dim=self.model_dim,
                queries_per_stream=self.queries_per_stream,
                visual_dim=dataset.token_dim, text_dim=dataset.text_dim,
                streams=streams),
            losses=LossWeights(
                lambda_identity=self.lambda_identity, lambda_triplet=self.lambda_triplet,
                lambda_orthogonality=self.lambda_orthogonality,
                lambda_action=self.lambda_action, margin=self.margin),
            optimizer=OptimizerConfig(
                lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                batch_p=self.batch_p, batch_k=self.batch_k),
            orthogonality_mode=self.orthogonality_mode,
            text_mode=self.text_mode,
            adaptive_fusion=self.adaptive_fusion,
            seed=self.seed)

        trainer = Trainer(config, dataset)
        self.history_ = trainer.run()
        self.model_ = trainer.model
        self.config_ = config
        self.n_features_in_ = X.shape[1] * X.shape[2] * X.shape[3]
        self.clip_shape_ = X.shape[1:]
        return self

    def _check_clips(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return check_clips_array(X, frames=self.clip_shape_[0],
                                 tokens=self.clip_shape_[1], dim=self.clip_shape_[2])

    def embed(self, X) -> dict:
        """Text-free inference features, {stream: (n, model_dim)}."""
        return self.model_.embed_clips(self._check_clips(X))

    def transform(self, X) -> np.ndarray:
        """Concatenated stream features (n, n_streams * model_dim), ordered
        biometrics, motion, non-biometrics (active streams only)."""
        features = self.embed(X)
        return np.hstack([features[s] for s in self.config_.disenq.streams])

    def predict(self, X) -> np.ndarray:
        """Identity prediction via the trained identity head on the
        biometrics features (labels are the classes seen in fit)."""
        check_is_fitted(self, "model_")
        if self.model_.identity_head is None:
            raise ValueError("predict requires the biometrics stream")
        features = self.embed(X)
        with torch.no_grad():
            logits = self.model_.identity_head(
                torch.as_tensor(features["biometrics"], dtype=torch.float64))
        return self.classes_[logits.numpy().argmax(axis=1)]

    def score(self, X, y) -> float:
        """Mean identity-prediction accuracy."""
        return float(np.mean(self.predict(X) == np.asarray(y)))
