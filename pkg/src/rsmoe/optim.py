from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import torch
from torch import nn
from torch.optim import AdamW

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 over `warmup_epochs`, then cosine decay to `min_lr` at the last step."""

    base_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 1
    total_epochs: int = 5

    def __post_init__(self) -> None:
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 <= min_lr <= base_lr, got {self.min_lr} / {self.base_lr}")
        if self.warmup_epochs < 0 or self.total_epochs < 1:
            raise ConfigError(f"invalid schedule epochs: warmup {self.warmup_epochs}, total {self.total_epochs}")


def lr_at(schedule: Schedule, step: int, steps_per_epoch: int) -> float:
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if steps_per_epoch < 1:
        raise ConfigError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    warmup = schedule.warmup_epochs * steps_per_epoch
    total = schedule.total_epochs * steps_per_epoch
    if step < warmup:
        return schedule.base_lr * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total - 1 - warmup))
    return schedule.base_lr - (schedule.base_lr - schedule.min_lr) * (1.0 - math.cos(math.pi * progress)) / 2.0


@dataclass
class OptimizerState:
    """torch AdamW over the named trainable parameters; frozen parameters never enter it."""

    names: List[str]
    params: List[nn.Parameter]
    optimizer: AdamW
    grad_clip: float = 0.0
    steps: int = field(default=0)


def make_optimizer(
    named_params: Iterable[Tuple[str, nn.Parameter]],
    *,
    weight_decay: float = 0.05,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    grad_clip: float = 1.0,
) -> OptimizerState:
    names, params, seen = [], [], set()
    for name, p in named_params:
        if not p.requires_grad or id(p) in seen:
            continue
        seen.add(id(p))
        names.append(name)
        params.append(p)
    if not params:
        raise ConfigError("optimizer has no trainable parameters")
    opt = AdamW(params, lr=0.0, betas=betas, eps=eps, weight_decay=weight_decay)
    return OptimizerState(names=names, params=params, optimizer=opt, grad_clip=grad_clip)


def adamw_step(state: OptimizerState, lr: float) -> Optional[float]:
    """
    One AdamW update at `lr` using the gradients currently stored on the
    parameters, then clears them. Returns the pre-clip gradient norm when
    clipping is on.
    """
    for name, p in zip(state.names, state.params):
        if p.grad is None:
            # Decay applies even without a gradient.
            p.grad = torch.zeros_like(p)
        elif not bool(torch.isfinite(p.grad).all()):
            raise NumericError(f"non-finite gradient in parameter {name}")
    norm = None
    if state.grad_clip > 0:
        norm = float(torch.nn.utils.clip_grad_norm_(state.params, state.grad_clip))
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.steps += 1
    return norm
