"""Minimal AdamW with decoupled weight decay.

Hand-rolled so the optimizer state is a plain dict of arrays: checkpoints
of it round-trip byte-exactly, which torch.optim state dicts do not
guarantee across serialization formats.
"""

from __future__ import annotations

import numpy as np
import torch


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameters.

    Parameters with ``grad is None`` are skipped for the step (their
    moments stay untouched), matching torch.optim semantics.
    """

    def __init__(self, named_params: dict, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 5e-2):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        beta1, beta2 = self.betas
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            update = (m / bias1) / ((v / bias2).sqrt() + self.eps)
            p.add_(update + self.weight_decay * p, alpha=-self.lr)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "exp_avg": {n: t.detach().numpy().copy() for n, t in self.exp_avg.items()},
            "exp_avg_sq": {n: t.detach().numpy().copy() for n, t in self.exp_avg_sq.items()},
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        for name in self.params:
            self.exp_avg[name] = torch.as_tensor(
                np.array(state["exp_avg"][name]), dtype=self.params[name].dtype)
            self.exp_avg_sq[name] = torch.as_tensor(
                np.array(state["exp_avg_sq"][name]), dtype=self.params[name].dtype)
