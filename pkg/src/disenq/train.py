"""Training loop: PK-sampled batches, the four-term objective, the
pairwise verification loss that gives the fusion weigher its gradients,
hand-rolled AdamW, NDJSON epoch logs, and per-epoch checkpoints.

Single-writer over parameters; all randomness flows from one numpy
generator whose state is checkpointed, so a resumed run continues the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .config import RunConfig
from .losses import cross_entropy, orthogonality_loss, pk_sample, total_loss, triplet_loss
from .model import DisenQModel
from .optim import AdamW
from .world import Dataset, sample_frame_indices

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.ndjson"
CHECKPOINT_NAME = "checkpoint.bin"

_TEXT_COLUMNS = {"biometrics": 0, "motion": 1, "nonbiometrics": 2}


class TrainingDiverged(RuntimeError):
    """Raised when a loss component goes non-finite; the last completed
    epoch's checkpoint is left on disk."""


def pairwise_verification_loss(features_b: torch.Tensor, features_m: torch.Tensor,
                               labels: torch.Tensor, weigher,
                               temperature: float = 5.0) -> torch.Tensor:
    """BCE on sigmoid(temperature * fused similarity) against same-identity
    labels over all within-batch pairs.

    Features are detached: only the weigher receives gradients, so the main
    objective's gradient field is untouched.
    """
    def pair_cosines(f):
        f = f.detach()
        f = f / f.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return f @ f.T

    n = labels.shape[0]
    iu, ju = torch.triu_indices(n, n, offset=1)
    sims = torch.stack([pair_cosines(features_b)[iu, ju],
                        pair_cosines(features_m)[iu, ju]], dim=-1)
    alphas = weigher(sims)
    fused = (alphas * sims).sum(dim=-1)
    targets = (labels[iu] == labels[ju]).to(fused.dtype)
    # PK batches have far more different-identity pairs; reweight so the
    # same-identity side carries equal mass.
    n_pos = targets.sum().clamp_min(1.0)
    n_neg = (targets.numel() - targets.sum()).clamp_min(1.0)
    return F.binary_cross_entropy_with_logits(
        temperature * fused, targets, pos_weight=n_neg / n_pos)


class Trainer:
    """Owns the model, optimizer, and RNG for one training run."""

    def __init__(self, config: RunConfig, dataset: Dataset,
                 train_indices=None, out_dir=None):
        if not dataset.has_texts:
            raise ValueError(
                "training requires text embeddings; this dataset is inference-only")
        if dataset.token_dim != config.disenq.visual_dim:
            raise ValueError(
                f"dataset token_dim {dataset.token_dim} does not match "
                f"config visual_dim {config.disenq.visual_dim}")
        if dataset.text_dim != config.disenq.text_dim:
            raise ValueError(
                f"dataset text_dim {dataset.text_dim} does not match "
                f"config text_dim {config.disenq.text_dim}")
        torch.set_num_threads(config.optimizer.num_threads)

        self.config = config
        self.dataset = dataset
        self.train_indices = (np.arange(len(dataset)) if train_indices is None
                              else np.asarray(train_indices, dtype=np.int64))
        if self.train_indices.size == 0:
            raise ValueError("empty training set")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        self.model = DisenQModel(
            config.disenq, dataset.num_identities, dataset.num_actions,
            frames_per_clip=config.world.frames_per_clip,
        ).initialize(config.seed)
        opt = config.optimizer
        self.optimizer = AdamW(dict(self.model.named_parameters()), lr=opt.lr,
                               betas=(opt.beta1, opt.beta2), eps=opt.eps,
                               weight_decay=opt.weight_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xBA7C)))
        self.epoch = 0
        self.history = []

        self._identity_labels = self.dataset.labels("identity")[self.train_indices]
        self._action_labels = self.dataset.labels("action")[self.train_indices]

    # -- persistence ---------------------------------------------------

    @property
    def checkpoint_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / CHECKPOINT_NAME

    def checkpoint_data(self) -> CheckpointData:
        return CheckpointData(
            config=self.config.to_dict(),
            config_hash=self.config.config_hash(),
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            model_state=self.model.named_parameter_arrays(),
            optimizer_state=self.optimizer.state_dict(),
        )

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.checkpoint_path
        if path is None:
            raise ValueError("no checkpoint path: trainer has no out_dir")
        return save_checkpoint(path, self.checkpoint_data())

    def restore(self, data: CheckpointData):
        if data.config_hash != self.config.config_hash():
            raise ValueError("checkpoint config hash does not match this trainer's config")
        self.model.load_parameter_arrays(data.model_state)
        self.optimizer.load_state_dict(data.optimizer_state)
        self.rng.bit_generator.state = data.rng_state
        self.epoch = data.epoch
        return self

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset, train_indices=None,
                        out_dir=None, config: Optional[RunConfig] = None) -> "Trainer":
        data = load_checkpoint(
            path, expected_config_hash=None if config is None else config.config_hash())
        cfg = RunConfig.from_dict(data.config) if config is None else config
        trainer = cls(cfg, dataset, train_indices=train_indices, out_dir=out_dir)
        return trainer.restore(data)

    # -- training ------------------------------------------------------

    def _batch_tensors(self, batch_relative: np.ndarray):
        idx = self.train_indices[batch_relative]
        frames = self.dataset.frames_array(idx).astype(np.float64)
        if frames.shape[1] != self.config.world.frames_per_clip:
            sel = sample_frame_indices(frames.shape[1],
                                       self.config.world.frames_per_clip,
                                       stride=4, rng=self.rng)
            frames = frames[:, sel]
        texts_arr = self.dataset.texts_array(idx).astype(np.float64)
        texts = {stream: torch.as_tensor(texts_arr[:, col])
                 for stream, col in _TEXT_COLUMNS.items()
                 if stream in self.config.disenq.streams}
        if self.config.text_mode == "pooled":
            pooled = torch.as_tensor(texts_arr.mean(axis=1))
            texts = {stream: pooled for stream in texts}
        return (torch.as_tensor(frames), texts,
                torch.as_tensor(self._identity_labels[batch_relative]),
                torch.as_tensor(self._action_labels[batch_relative]))

    def _step(self, batch_relative: np.ndarray) -> dict:
        frames, texts, id_labels, act_labels = self._batch_tensors(batch_relative)
        drop_p = self.config.optimizer.text_dropout
        text_drop = None
        if drop_p > 0:
            text_drop = {stream: self.rng.random(len(batch_relative)) < drop_p
                         for stream in self.config.disenq.streams}
        feats = self.model.forward_features(frames, texts=texts, mode="train",
                                            text_drop=text_drop)
        streams = set(self.config.disenq.streams)
        weights = self.config.losses

        components = {}
        if "biometrics" in streams:
            components["identity"] = cross_entropy(
                self.model.identity_head(feats["biometrics"]), id_labels)
            components["triplet"] = triplet_loss(
                feats["biometrics"], id_labels, margin=weights.margin)
        if "motion" in streams:
            components["action"] = cross_entropy(
                self.model.action_head(feats["motion"]), act_labels)
        if {"biometrics", "nonbiometrics"} <= streams:
            components["orthogonality"] = orthogonality_loss(
                feats["biometrics"], feats["nonbiometrics"],
                mode=self.config.orthogonality_mode)

        loss = total_loss(components, weights)
        record = {name: float(value.detach()) for name, value in components.items()}
        record["total"] = float(loss.detach())

        if (self.config.adaptive_fusion and {"biometrics", "motion"} <= streams):
            aux = pairwise_verification_loss(
                feats["biometrics"], feats["motion"], id_labels,
                self.model.weigher, temperature=self.config.optimizer.pairwise_temperature)
            if not torch.isfinite(aux):
                raise FloatingPointError("loss component 'pairwise' is non-finite")
            record["pairwise"] = float(aux.detach())
            loss = loss + self.config.optimizer.pairwise_weight * aux

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return record

    def batches_per_epoch(self) -> int:
        return max(1, self.train_indices.size // self.config.optimizer.batch_size)

    def train_epoch(self) -> dict:
        opt = self.config.optimizer
        sums, count = {}, 0
        for _ in range(self.batches_per_epoch()):
            batch = pk_sample(self._identity_labels, opt.batch_p, opt.batch_k, self.rng)
            record = self._step(batch)
            for key, value in record.items():
                sums[key] = sums.get(key, 0.0) + value
            count += 1
        record = {key: value / count for key, value in sums.items()}
        record["epoch"] = self.epoch
        record["num_batches"] = count
        return record

    def run(self, epochs: Optional[int] = None) -> list:
        """Train up to the configured epoch count, checkpointing and logging
        after every epoch. On divergence the previous checkpoint is kept."""
        target = self.config.optimizer.epochs if epochs is None else epochs
        log_path = None if self.out_dir is None else self.out_dir / LOG_NAME
        while self.epoch < target:
            try:
                record = self.train_epoch()
            except FloatingPointError as exc:
                logger.error("aborting at epoch %d: %s", self.epoch, exc)
                raise TrainingDiverged(
                    f"training diverged at epoch {self.epoch}: {exc}; "
                    f"last-good checkpoint: {self.checkpoint_path}") from exc
            self.epoch += 1
            record["epoch"] = self.epoch
            self.history.append(record)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            if self.checkpoint_path is not None:
                self.save()
            logger.info("epoch %d: %s", self.epoch,
                        {k: round(v, 6) for k, v in record.items() if k != "epoch"})
        return self.history
