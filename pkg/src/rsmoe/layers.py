"""
Transformer building blocks over the float64 primitives in `rsmoe.tensor`.

Every constructor takes the torch.Generator used for initialisation so that
models built on different threads never share RNG state.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .tensor import DTYPE, gelu, layer_norm, matmul, softmax


def _uniform(shape, bound: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return (torch.rand(*shape, dtype=DTYPE, generator=generator) * 2.0 - 1.0) * bound


def _normal(shape, std: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return torch.randn(*shape, dtype=DTYPE, generator=generator) * std


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, *, bias: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(_uniform((d_out, d_in), bound, generator))
        self.bias = nn.Parameter(_uniform((d_out,), bound, generator)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = matmul(x, self.weight.transpose(0, 1))
        return y + self.bias if self.bias is not None else y


class Embedding(nn.Module):
    def __init__(self, num: int, dim: int, *, generator: Optional[torch.Generator] = None, std: float = 0.02):
        super().__init__()
        self.weight = nn.Parameter(_normal((num, dim), std, generator))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.weight[ids]


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.beta = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(nn.Module):
    def __init__(
        self, dim: int, hidden: int, *, out_dim: Optional[int] = None, generator: Optional[torch.Generator] = None
    ):
        super().__init__()
        self.fc1 = Linear(dim, hidden, generator=generator)
        self.fc2 = Linear(hidden, out_dim or dim, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Attention(nn.Module):
    """
    Multi-head attention. Queries come from x, keys/values from `memory`
    (x itself when omitted). q/k/v projections carry no bias.

    mask: bool, broadcastable to [B, Tq, Tk]; True marks visible keys.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        *,
        kv_dim: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = Linear(dim, dim, bias=False, generator=generator)
        self.k_proj = Linear(kv_dim, dim, bias=False, generator=generator)
        self.v_proj = Linear(kv_dim, dim, bias=False, generator=generator)
        self.out_proj = Linear(dim, dim, generator=generator)
        self.last_weights: Optional[torch.Tensor] = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
        *,
        keep_weights: bool = False,
    ) -> torch.Tensor:
        memory = x if memory is None else memory
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.detach() if keep_weights else None
        out = matmul(weights, v).transpose(1, 2)
        b, t = out.shape[:2]
        return self.out_proj(out.reshape(b, t, self.num_heads * self.head_dim))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + FFN block (image encoder and decoders)."""

    def __init__(self, dim: int, num_heads: int, hidden: int, *, eps: float, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.ln1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, num_heads, generator=generator)
        self.ln2 = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, hidden, generator=generator)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ffn(self.ln2(x))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def count_parameters(module: nn.Module, *, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
