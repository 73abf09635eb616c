"""
Float64 tensor primitives shared by every model component.

Tensors are torch tensors and the gradient tape is torch autograd; this module
pins the contracts the rest of the package relies on (shape errors, stable
softmax, pad-masked cross-entropy) and the finite-difference checker used to
verify them.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Mapping, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from .errors import ConfigError, DataError, DimensionError, NumericError

DTYPE = torch.float64
PAD_ID = 0


def tensor(data, *, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product a[..., m, k] @ b[..., k, n]."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def _check_axis(x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"axis {axis} out of range for shape {tuple(x.shape)}")
    return axis % x.dim()


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    # The shift is a constant per slice; detaching it leaves the gradient exact.
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if tuple(gamma.shape) != (d,) or tuple(beta.shape) != (d,):
        raise DimensionError(
            f"layer_norm affine shape mismatch: gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}, last dim {d}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def cross_entropy(logits: torch.Tensor, targets, *, pad_id: int = PAD_ID) -> torch.Tensor:
    """
    Mean over non-pad positions of -log softmax(logits)[target].
    logits: [..., V]; targets: matching leading shape of token ids.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    vocab = logits.shape[-1]
    if tuple(targets.shape) != tuple(logits.shape[:-1]):
        raise DimensionError(
            f"cross_entropy shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
        )
    flat_logits = logits.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    keep = flat_targets != pad_id
    if not bool(keep.any()):
        raise DataError("cross_entropy: every position is padding")
    kept = flat_targets[keep]
    bad = (kept < 0) | (kept >= vocab)
    if bool(bad.any()):
        raise DataError(f"cross_entropy: target id {int(kept[bad][0])} outside vocabulary of size {vocab}")
    logp = log_softmax(flat_logits[keep], axis=-1)
    picked = logp.gather(1, kept.unsqueeze(1)).squeeze(1)
    return -picked.mean()


def _relative_errors(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, 1e-8))
    return (analytic - numeric).abs() / denom


def _scalar(value: torch.Tensor) -> float:
    if value.numel() != 1:
        raise DimensionError(f"gradient check needs a scalar function, got shape {tuple(value.shape)}")
    v = float(value.detach())
    if not math.isfinite(v):
        raise NumericError(f"gradient check: function value is not finite ({v})")
    return v


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> float:
    """
    Max relative error between autograd and central differences
    (f(x+h) - f(x-h)) / 2h, elementwise over x.
    """
    if h <= 0:
        raise ConfigError(f"grad_check step must be > 0, got {h}")
    xa = x.detach().clone().to(DTYPE).requires_grad_(True)
    y = f(xa)
    _scalar(y)
    y.backward()
    analytic = xa.grad.detach().clone() if xa.grad is not None else torch.zeros_like(xa)

    numeric = torch.zeros_like(analytic)
    base = x.detach().clone().to(DTYPE)
    flat = base.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            fp = _scalar(f(base))
            flat[i] = orig - h
            fm = _scalar(f(base))
            flat[i] = orig
            numeric.view(-1)[i] = (fp - fm) / (2.0 * h)
    return float(_relative_errors(analytic, numeric).max()) if analytic.numel() else 0.0


def grad_check_tensors(
    f: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    *,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    select: str = "random",
) -> float:
    """
    Gradient check over tensors captured by the closure f (model parameters,
    leaf inputs). Entries are perturbed in place; at most `max_entries` entries
    per tensor are checked, chosen at random or, with select="largest", those
    with the largest analytic gradient.
    """
    if h <= 0:
        raise ConfigError(f"grad_check step must be > 0, got {h}")
    if select not in ("random", "largest"):
        raise ConfigError(f"unknown entry selection {select!r}")
    for t in tensors:
        if not t.requires_grad:
            raise ConfigError("grad_check_tensors: every checked tensor must require grad")
        t.grad = None
    y = f()
    _scalar(y)
    y.backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]

    worst = 0.0
    with torch.no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.data.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries and select == "largest":
                picks = torch.argsort(grad.view(-1).abs(), descending=True)[:max_entries].tolist()
            elif max_entries is not None and n > max_entries:
                picks = torch.randperm(n, generator=generator)[:max_entries].tolist()
            else:
                picks = range(n)
            for i in picks:
                orig = float(flat[i])
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
                flat[i] = orig
                num = torch.tensor((fp - fm) / (2.0 * h), dtype=DTYPE)
                err = float(_relative_errors(grad.view(-1)[i], num))
                worst = max(worst, err)
    for t in tensors:
        t.grad = None
    return worst


NamedTensors = Union[nn.Module, Mapping[str, torch.Tensor], torch.Tensor, Iterable[Tuple[str, torch.Tensor]]]


def digest(obj: NamedTensors) -> str:
    """sha256 over tensor names and float64 bytes, in name order."""
    if isinstance(obj, nn.Module):
        items = list(obj.state_dict().items())
    elif isinstance(obj, torch.Tensor):
        items = [("", obj)]
    elif isinstance(obj, Mapping):
        items = list(obj.items())
    else:
        items = list(obj)
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("ascii"))
        h.update(t.detach().to(DTYPE).contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
