"""
Decoder-only caption model conditioned on a prefix.

Sequence layout: [F_VLM rows (L) | prompt rows (K) | BOS, caption tokens].
Prefix positions see each other; caption positions see the prefix and the
caption up to themselves. Prompt rows flagged false in the prompt mask are
hidden from every query.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import nn

from .config import ModelConfig
from .dataset import Batch, teacher_inputs
from .errors import ConfigError, InputError
from .layers import Embedding, LayerNorm, Linear, TransformerBlock, _normal
from .tensor import cross_entropy
from .vision import ImageEncoder, VlmEncoder
from .vocab import BOS, EOS, PAD


@dataclass
class PrefixAssembly:
    vlm_features: torch.Tensor  # [B, L, D]
    prompt: torch.Tensor  # [B, K, D]
    prompt_mask: torch.Tensor  # [B, K] bool

    @property
    def batch_size(self) -> int:
        return self.vlm_features.shape[0]

    @property
    def length(self) -> int:
        return self.vlm_features.shape[1] + self.prompt.shape[1]

    @classmethod
    def build(
        cls, vlm_features: torch.Tensor, prompt: Optional[torch.Tensor] = None, prompt_mask: Optional[torch.Tensor] = None
    ) -> "PrefixAssembly":
        b, _, d = vlm_features.shape
        if prompt is None:
            prompt = vlm_features.new_zeros(b, 0, d)
        if prompt_mask is None:
            prompt_mask = torch.ones(prompt.shape[:2], dtype=torch.bool)
        return cls(vlm_features, prompt, prompt_mask)


def attention_mask(prefix: PrefixAssembly, caption_len: int) -> torch.Tensor:
    """[B, S, S] bool, True where query i may attend to key j."""
    p = prefix.length
    s = p + caption_len
    i = torch.arange(s).unsqueeze(1)
    j = torch.arange(s).unsqueeze(0)
    allowed = (j < p) | (j <= i)
    b = prefix.batch_size
    keys = torch.cat(
        [
            torch.ones(b, prefix.vlm_features.shape[1], dtype=torch.bool),
            prefix.prompt_mask,
            torch.ones(b, caption_len, dtype=torch.bool),
        ],
        dim=1,
    )
    return allowed.unsqueeze(0) & keys.unsqueeze(1)


class DecoderModel(nn.Module):
    def __init__(self, cfg: ModelConfig, *, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = Embedding(cfg.vocab_size, cfg.embed_dim, generator=generator)
        self.pos_embed = nn.Parameter(_normal((cfg.max_positions, cfg.embed_dim), 0.02, generator))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.embed_dim * cfg.ffn_mult, eps=cfg.ln_eps, generator=generator)
            for _ in range(cfg.decoder_layers)
        )
        self.norm = LayerNorm(cfg.embed_dim, cfg.ln_eps)
        self.head = Linear(cfg.embed_dim, cfg.vocab_size, generator=generator)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embed(ids)

    def forward(self, prefix: PrefixAssembly, tokens: torch.Tensor) -> torch.Tensor:
        """Logits over the caption positions, [B, T, V]."""
        p, t = prefix.length, tokens.shape[1]
        if p + t > self.cfg.max_positions:
            raise InputError(f"sequence of {p + t} positions exceeds the decoder limit of {self.cfg.max_positions}")
        x = torch.cat([prefix.vlm_features, prefix.prompt, self.tok_embed(tokens)], dim=1)
        x = x + self.pos_embed[: p + t]
        mask = attention_mask(prefix, t)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.norm(x[:, p:]))


def forward_loss(model: DecoderModel, prefix: PrefixAssembly, targets: torch.Tensor) -> torch.Tensor:
    """
    Teacher-forced next-token cross-entropy over caption positions.
    targets: [B, T] caption ids ending in EOS, PAD padded.
    """
    if targets.shape[1] == 0 or not bool((targets != PAD).any()):
        raise InputError("empty caption target: nothing to supervise")
    logits = model(prefix, teacher_inputs(targets))
    return cross_entropy(logits, targets, pad_id=PAD)


@torch.no_grad()
def generate(model: DecoderModel, prefix: PrefixAssembly, max_len: Optional[int] = None) -> List[List[int]]:
    """Greedy decoding; ties go to the lowest token id. EOS is not included in the output."""
    limit = model.cfg.max_caption_len if max_len is None else max_len
    limit = min(limit, model.cfg.max_positions - prefix.length)
    b = prefix.batch_size
    tokens = torch.full((b, 1), BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    out: List[List[int]] = [[] for _ in range(b)]
    for _ in range(max(limit, 0)):
        logits = model(prefix, tokens)[:, -1]
        nxt = torch.argmax(logits, dim=-1)
        for row in range(b):
            if done[row]:
                continue
            if int(nxt[row]) == EOS:
                done[row] = True
            else:
                out[row].append(int(nxt[row]))
        if bool(done.all()):
            break
        tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
    return out


def clone_weights(src: DecoderModel, cfg: Optional[ModelConfig] = None) -> DecoderModel:
    """Independent deep copy of a decoder; `cfg`, when given, must match the source config."""
    if cfg is not None and cfg != src.cfg:
        raise ConfigError("clone_weights: target config differs from the source decoder config")
    return copy.deepcopy(src)


class CaptionModel(nn.Module):
    """Image encoder + VLM encoder + a single decoder (the Stage I model)."""

    def __init__(self, cfg: ModelConfig, *, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg, generator=generator).freeze()
        self.vlm = VlmEncoder(cfg, generator=generator)
        self.llm = DecoderModel(cfg, generator=generator)

    def vlm_features(self, images: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor) -> torch.Tensor:
        return self.vlm(self.image_encoder(images), instr_ids, instr_mask)

    def prefix(self, images: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor) -> PrefixAssembly:
        fv = self.vlm_features(images, instr_ids, instr_mask)
        return PrefixAssembly(fv, self.llm.embed_tokens(instr_ids), instr_mask)

    def loss(self, batch: Batch, role: str = "caption") -> torch.Tensor:
        return forward_loss(self.llm, self.prefix(batch.images, batch.instr_ids, batch.instr_mask), batch.targets[role])

    def caption_ids(self, images: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor) -> List[List[int]]:
        with torch.no_grad():
            prefix = self.prefix(images, instr_ids, instr_mask)
        return generate(self.llm, prefix)
