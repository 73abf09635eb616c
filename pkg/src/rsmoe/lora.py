"""
Low-rank adapters for the projection layers of the captioning model.

An adapted layer computes base(x) + (alpha / r) * (x A^T) B^T. B starts at zero,
so a freshly wrapped layer reproduces its base bitwise; the base weights are
frozen on wrap and never receive gradient.
"""

from __future__ import annotations

import logging
import math
from fnmatch import fnmatchcase
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn

from .errors import LoraError
from .layers import Linear, _uniform
from .tensor import DTYPE, matmul

logger = logging.getLogger(__name__)

# Module-name patterns adapted in each training stage.
STAGE_SITES: Dict[str, Tuple[str, ...]] = {
    "I": (
        "vlm.blocks.*.self_attn.q_proj",
        "vlm.blocks.*.self_attn.v_proj",
        "vlm.blocks.*.cross_attn.q_proj",
        "vlm.blocks.*.cross_attn.k_proj",
        "vlm.blocks.*.cross_attn.v_proj",
        "vlm.blocks.*.cross_attn.out_proj",
        "vlm.blocks.*.ffn.fc1",
        "vlm.blocks.*.ffn.fc2",
        "vlm.head_ffn.fc1",
        "vlm.head_ffn.fc2",
        "llm.blocks.*.attn.q_proj",
        "llm.blocks.*.attn.v_proj",
        "llm.blocks.*.ffn.fc1",
        "llm.blocks.*.ffn.fc2",
    ),
    "II": (
        "experts.*.blocks.*.attn.q_proj",
        "experts.*.blocks.*.attn.v_proj",
        "experts.*.blocks.*.ffn.fc1",
        "experts.*.blocks.*.ffn.fc2",
    ),
}


class LoraLinear(nn.Module):
    def __init__(
        self,
        base: Linear,
        rank: int,
        alpha: float,
        *,
        site: str = "",
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if isinstance(base, LoraLinear):
            raise LoraError(f"site {site or '?'} is already adapted")
        if not 1 <= rank < min(base.d_in, base.d_out):
            raise LoraError(
                f"LoRA rank must satisfy 1 <= r < min(d_in, d_out) = {min(base.d_in, base.d_out)}, got {rank}"
            )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.d_in = base.d_in
        self.d_out = base.d_out
        self.rank = rank
        self.alpha = float(alpha)
        self.scaling = self.alpha / rank
        self.site = site
        self.merged = False
        self.lora_A = nn.Parameter(_uniform((rank, base.d_in), 1.0 / math.sqrt(base.d_in), generator))
        self.lora_B = nn.Parameter(torch.zeros(base.d_out, rank, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = matmul(matmul(x, self.lora_A.transpose(0, 1)), self.lora_B.transpose(0, 1))
        return self.base(x) + self.scaling * delta

    @property
    def adapter_parameter_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def merge(self) -> Linear:
        """Plain Linear with the update folded in: W + (alpha/r) B A."""
        if self.merged:
            raise LoraError(f"site {self.site or '?'} is already merged")
        # Init values are overwritten below; a private generator keeps the global RNG untouched.
        out = Linear(self.d_in, self.d_out, bias=self.base.bias is not None, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * matmul(self.lora_B, self.lora_A))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        for p in out.parameters():
            p.requires_grad_(False)
        self.merged = True
        return out


def wrap(layer: Linear, rank: int, alpha: float, *, site: str = "", generator: Optional[torch.Generator] = None) -> LoraLinear:
    return LoraLinear(layer, rank, alpha, site=site, generator=generator)


def _parent(model: nn.Module, name: str) -> Tuple[nn.Module, str]:
    *path, leaf = name.split(".")
    parent = model
    for part in path:
        parent = getattr(parent, part)
    return parent, leaf


def _matches(name: str, patterns) -> bool:
    return any(fnmatchcase(name, p) for p in patterns)


def apply_lora_sites(
    model: nn.Module,
    patterns,
    *,
    rank: int,
    alpha: float,
    generator: Optional[torch.Generator] = None,
    prefix: str = "",
) -> int:
    """Wraps every Linear whose qualified name matches one of `patterns`."""
    targets: List[str] = []
    for name, module in model.named_modules():
        if not name or not _matches(name, patterns):
            continue
        if isinstance(module, LoraLinear):
            raise LoraError(f"site {prefix}{name} is already adapted")
        if isinstance(module, Linear):
            targets.append(name)
    for name in targets:
        parent, leaf = _parent(model, name)
        setattr(parent, leaf, LoraLinear(getattr(parent, leaf), rank, alpha, site=prefix + name, generator=generator))
    return len(targets)


def apply_lora_plan(
    model: nn.Module,
    stage: str,
    *,
    rank: int,
    alpha: float,
    generator: Optional[torch.Generator] = None,
) -> int:
    """Adapts the sites of training stage "I" or "II"; returns the number of adapted sites."""
    if stage not in STAGE_SITES:
        raise LoraError(f"unknown LoRA stage {stage!r}; expected one of {sorted(STAGE_SITES)}")
    count = apply_lora_sites(model, STAGE_SITES[stage], rank=rank, alpha=alpha, generator=generator)
    if count == 0:
        raise LoraError(f"stage {stage} plan matched no layers")
    logger.debug("stage %s LoRA plan adapted %d sites", stage, count)
    return count


def adapters(model: nn.Module) -> List[Tuple[str, LoraLinear]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, LoraLinear)]


def adapter_parameters(model: nn.Module) -> List[nn.Parameter]:
    params: List[nn.Parameter] = []
    for _, m in adapters(model):
        params.extend((m.lora_A, m.lora_B))
    return params


def adapter_parameter_count(model: nn.Module) -> int:
    return sum(m.adapter_parameter_count for _, m in adapters(model))


def merge_all(model: nn.Module) -> int:
    """Replaces every adapted layer in `model` by its merged Linear."""
    found = adapters(model)
    for name, m in found:
        parent, leaf = _parent(model, name)
        setattr(parent, leaf, m.merge())
    return len(found)
