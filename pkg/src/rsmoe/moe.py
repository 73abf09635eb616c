"""
Instruction router and role-specialised expert decoders.

Every expert runs on every image: the router turns (instruction, F_VLM) into
one soft prompt per expert, each expert decodes its own caption aspect, and
the aspects are joined in fixed role order.
"""

from __future__ import annotations

import copy
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .config import ModelConfig
from .dataset import Batch
from .decoder import DecoderModel, PrefixAssembly, forward_loss, generate
from .errors import ConfigError
from .layers import Embedding, FeedForward, Linear
from .scenes import SEP
from .vision import ImageEncoder, VlmEncoder
from .vocab import Vocab


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over dim 1 of the rows flagged in mask; all-masked rows pool to zero."""
    m = mask.to(x.dtype).unsqueeze(-1)
    count = m.sum(dim=1).clamp(min=1.0)
    return (x * m).sum(dim=1) / count


class InstructionRouter(nn.Module):
    def __init__(self, cfg: ModelConfig, *, num_experts: Optional[int] = None, generator: Optional[torch.Generator] = None):
        super().__init__()
        n = num_experts or cfg.num_experts
        self.num_experts = n
        self.prompt_len = cfg.prompt_len
        self.embed_dim = cfg.embed_dim
        self.instr_embed = Embedding(cfg.vocab_size, cfg.router_dim, generator=generator)
        # FFN over [pool(instruction); pool(F_VLM)]
        self.trunk = FeedForward(
            cfg.router_dim + cfg.embed_dim, cfg.router_dim, out_dim=cfg.router_dim, generator=generator
        )
        self.heads = nn.ModuleList(
            Linear(cfg.router_dim, cfg.prompt_len * cfg.embed_dim, generator=generator) for _ in range(n)
        )

    def shared_parameters(self) -> List[nn.Parameter]:
        return list(self.instr_embed.parameters()) + list(self.trunk.parameters())

    def forward(self, instr_ids: torch.Tensor, instr_mask: torch.Tensor, fv: torch.Tensor) -> List[torch.Tensor]:
        pooled = torch.cat([masked_mean(self.instr_embed(instr_ids), instr_mask), fv.mean(dim=1)], dim=-1)
        h = self.trunk(pooled)
        b = fv.shape[0]
        return [head(h).reshape(b, self.prompt_len, self.embed_dim) for head in self.heads]


def route(router: InstructionRouter, instr_ids: torch.Tensor, instr_mask: torch.Tensor, fv: torch.Tensor) -> List[torch.Tensor]:
    """One soft prompt [B, K, D] per expert."""
    return router(instr_ids, instr_mask, fv)


class MoeModel(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        image_encoder: ImageEncoder,
        vlm: VlmEncoder,
        experts: Sequence[DecoderModel],
        router: Optional[InstructionRouter],
        roles: Optional[Tuple[str, ...]] = None,
    ):
        super().__init__()
        roles = tuple(roles or cfg.roles)
        if len(experts) != len(roles):
            raise ConfigError(f"{len(experts)} experts for {len(roles)} roles {roles}")
        if len(set(roles)) != len(roles):
            raise ConfigError(f"expert roles must be distinct, got {roles}")
        if router is not None and router.num_experts != len(experts):
            raise ConfigError(f"router has {router.num_experts} heads for {len(experts)} experts")
        self.cfg = cfg
        self.roles = roles
        self.image_encoder = image_encoder
        self.vlm = vlm
        self.experts = nn.ModuleList(experts)
        self.router = router

    @classmethod
    def build(cls, cfg: ModelConfig, *, use_router: bool = True, generator: Optional[torch.Generator] = None) -> "MoeModel":
        """Freshly initialised model; every expert starts from the same decoder weights."""
        image_encoder = ImageEncoder(cfg, generator=generator).freeze()
        vlm = VlmEncoder(cfg, generator=generator)
        base = DecoderModel(cfg, generator=generator)
        experts = [copy.deepcopy(base) for _ in cfg.roles]
        router = InstructionRouter(cfg, generator=generator) if use_router else None
        return cls(cfg, image_encoder, vlm, experts, router)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def vlm_features(self, images: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor) -> torch.Tensor:
        return self.vlm(self.image_encoder(images), instr_ids, instr_mask)

    def prompts(
        self, instr_ids: torch.Tensor, instr_mask: torch.Tensor, fv: torch.Tensor, experts: Optional[Sequence[int]] = None
    ) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """(prompt, prompt mask) per requested expert."""
        wanted = range(self.num_experts) if experts is None else experts
        if self.router is None:
            return [(self.experts[i].embed_tokens(instr_ids), instr_mask) for i in wanted]
        soft = route(self.router, instr_ids, instr_mask, fv)
        keep = torch.ones(fv.shape[0], self.cfg.prompt_len, dtype=torch.bool)
        return [(soft[i], keep) for i in wanted]

    def prefix(self, fv: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor, i: int) -> PrefixAssembly:
        prompt, mask = self.prompts(instr_ids, instr_mask, fv, experts=[i])[0]
        return PrefixAssembly(fv, prompt, mask)


def expert_forward_loss(model: MoeModel, batch: Batch, i: int, fv: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Loss of expert i against its role's sentence; `fv` may be passed in to share the encoder pass."""
    if not 0 <= i < model.num_experts:
        raise ConfigError(f"expert index {i} out of range for {model.num_experts} experts")
    role = model.roles[i]
    if role not in batch.targets:
        raise ConfigError(f"batch carries no {role!r} reference for expert {i}; has {sorted(batch.targets)}")
    if fv is None:
        fv = model.vlm_features(batch.images, batch.instr_ids, batch.instr_mask)
    return forward_loss(model.experts[i], model.prefix(fv, batch.instr_ids, batch.instr_mask, i), batch.targets[role])


@torch.no_grad()
def moe_generate_ids(
    model: MoeModel, images: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor
) -> List[List[List[int]]]:
    """Per image, the greedy token ids of every expert in role order."""
    fv = model.vlm_features(images, instr_ids, instr_mask)
    per_expert = [
        generate(model.experts[i], PrefixAssembly(fv, prompt, mask))
        for i, (prompt, mask) in enumerate(model.prompts(instr_ids, instr_mask, fv))
    ]
    return [[ids[row] for ids in per_expert] for row in range(images.shape[0])]


def aggregate(segments: Sequence[str]) -> str:
    return f" {SEP} ".join(s.strip() for s in segments)


def moe_generate(
    model: MoeModel, images: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor, vocab: Vocab
) -> List[str]:
    """Aggregated caption per image: expert outputs joined by SEP in role order."""
    return [aggregate(vocab.decode(ids) for ids in row) for row in moe_generate_ids(model, images, instr_ids, instr_mask)]


def build_no_router_variant(model: MoeModel) -> MoeModel:
    """Copy of `model` without a router: every expert is prompted with the raw instruction embeddings."""
    return MoeModel(
        model.cfg,
        copy.deepcopy(model.image_encoder),
        copy.deepcopy(model.vlm),
        [copy.deepcopy(e) for e in model.experts],
        None,
        model.roles,
    )
