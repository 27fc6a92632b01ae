"""AdamW with decoupled weight decay, and the warm-up + reduce-on-plateau schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import NonFiniteError, ShapeError


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def zeros_like(cls, params, **hyper) -> "OptimizerState":
        return cls(m=[p * 0 for p in params], v=[p * 0 for p in params], **hyper)


def _update(theta, grad, m, v, step, lr, beta1, beta2, eps, wd):
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    theta = theta - lr * (m_hat / (v_hat ** 0.5 + eps) + wd * theta)
    return theta, m, v


def adamw_step(params: list, grads: list, state: OptimizerState) -> tuple[list, OptimizerState]:
    """One AdamW update. Works on numpy arrays or torch tensors; inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must align")
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for theta, g, m, v in zip(params, grads, state.m, state.v):
        if tuple(theta.shape) != tuple(g.shape):
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(theta.shape)}")
        if not _finite(g):
            raise NonFiniteError(f"non-finite gradient at optimizer step {step}")
        theta, m, v = _update(theta, g, m, v, step, state.lr, state.beta1, state.beta2,
                              state.eps, state.weight_decay)
        new_params.append(theta)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, step=step)


def _finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


class AdamW(torch.optim.Optimizer):
    """``torch.optim`` front end over :func:`adamw_step`, so training loops stay idiomatic."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        self.step_count = 0

    @torch.no_grad()
    def step(self, closure=None):
        self.step_count += 1
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                if not torch.isfinite(p.grad).all():
                    raise NonFiniteError(f"non-finite gradient at optimizer step {self.step_count}")
                st = self.state[p]
                if not st:
                    st["m"] = torch.zeros_like(p)
                    st["v"] = torch.zeros_like(p)
                theta, st["m"], st["v"] = _update(p, p.grad, st["m"], st["v"], self.step_count,
                                                  group["lr"], b1, b2, group["eps"], group["weight_decay"])
                p.copy_(theta)

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr


@dataclass
class LRState:
    base_lr: float = 3e-4
    warmup_epochs: int = 0
    factor: float = 0.5
    patience: int = 10
    threshold: float = 1e-4
    current: float | None = None
    best: float = field(default=math.inf)
    bad_epochs: int = 0


def lr_at(epoch: int, val_metric: float | None, state: LRState) -> tuple[float, LRState]:
    """Learning rate for ``epoch`` given the monitored loss of the previous epoch.

    Linear warm-up over the first ``warmup_epochs`` epochs, then plateau
    reduction: ``patience`` consecutive epochs without an improvement of at
    least ``threshold`` multiply the rate by ``factor``.
    """
    if epoch < state.warmup_epochs:
        return state.base_lr * ((epoch + 1) / state.warmup_epochs), state
    state = replace(state)
    if state.current is None:
        state.current = state.base_lr
    if val_metric is not None:
        if val_metric < state.best - state.threshold:
            state.best = val_metric
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= state.patience:
                state.current *= state.factor
                state.bad_epochs = 0
    return state.current, state
