"""
Image side of the captioner.

ImageEncoder: patch embedding + learned positions + pre-norm transformer
blocks; frozen for the whole of training.

VlmEncoder: learnable query embeddings that attend jointly with the
instruction tokens, then cross-attend into the image features, block by
block, before a feed-forward head and a projection to decoder width.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigError, InputError
from .layers import Attention, Embedding, FeedForward, LayerNorm, Linear, TransformerBlock, _normal, freeze
from .scenes import SceneImage
from .tensor import DTYPE

ImageLike = Union[SceneImage, np.ndarray, torch.Tensor]


def as_image_batch(images: Union[ImageLike, Sequence[ImageLike]]) -> Tuple[torch.Tensor, bool]:
    """[B, H, W, 3] float64 plus whether the input was a single image."""
    if isinstance(images, SceneImage):
        return torch.from_numpy(images.pixels).to(DTYPE).unsqueeze(0), True
    if isinstance(images, (list, tuple)):
        return torch.stack([as_image_batch(img)[0][0] for img in images]), False
    t = torch.as_tensor(images)
    if t.dtype != DTYPE:
        t = t.to(DTYPE)
    if t.dim() == 3:
        return t.unsqueeze(0), True
    return t, False


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, *, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.num_patches = cfg.num_patches
        self.patch_embed = Linear(cfg.patch_size * cfg.patch_size * 3, cfg.channels, generator=generator)
        self.pos_embed = nn.Parameter(_normal((cfg.num_patches, cfg.channels), 0.02, generator))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.channels, cfg.num_heads, cfg.channels * cfg.ffn_mult, eps=cfg.ln_eps, generator=generator)
            for _ in range(cfg.encoder_layers)
        )
        self.norm = LayerNorm(cfg.channels, cfg.ln_eps)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """[B, H, W, 3] -> [B, P, p*p*3], patches in row-major order."""
        if images.dim() != 4 or tuple(images.shape[1:]) != (self.image_size, self.image_size, 3):
            raise ConfigError(
                f"image shape {tuple(images.shape[1:])} does not match configured "
                f"({self.image_size}, {self.image_size}, 3)"
            )
        b, p = images.shape[0], self.patch_size
        g = self.image_size // p
        x = images.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * 3)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(self.patchify(images)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def freeze(self) -> "ImageEncoder":
        freeze(self)
        return self


class QFormerBlock(nn.Module):
    """Post-norm block: joint self-attention, cross-attention into the image, FFN."""

    def __init__(self, cfg: ModelConfig, *, generator: Optional[torch.Generator] = None):
        super().__init__()
        dim = cfg.query_dim
        self.self_attn = Attention(dim, cfg.num_heads, generator=generator)
        self.ln_self = LayerNorm(dim, cfg.ln_eps)
        self.cross_attn = Attention(dim, cfg.num_heads, kv_dim=cfg.channels, generator=generator)
        self.ln_cross = LayerNorm(dim, cfg.ln_eps)
        self.ffn = FeedForward(dim, dim * cfg.ffn_mult, generator=generator)
        self.ln_ffn = LayerNorm(dim, cfg.ln_eps)

    def self_attend(
        self, queries: torch.Tensor, instr: torch.Tensor, instr_mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        b, ti = instr.shape[:2]
        x = torch.cat([instr, queries], dim=1)
        keys = torch.cat([instr_mask, torch.ones(b, queries.shape[1], dtype=torch.bool)], dim=1)
        out = self.ln_self(x + self.self_attn(x, mask=keys.unsqueeze(1)))
        return out[:, ti:], out[:, :ti]

    def cross_attend(self, fsa: torch.Tensor, fi: torch.Tensor, *, keep_weights: bool = False) -> torch.Tensor:
        return self.ln_cross(fsa + self.cross_attn(fsa, memory=fi, keep_weights=keep_weights))

    def feed_forward(self, fca: torch.Tensor) -> torch.Tensor:
        return self.ln_ffn(fca + self.ffn(fca))


class VlmEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, *, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        self.query_tokens = nn.Parameter(_normal((cfg.num_queries, cfg.query_dim), 0.02, generator))
        self.instr_embed = Embedding(cfg.vocab_size, cfg.query_dim, generator=generator)
        self.instr_pos = nn.Parameter(_normal((cfg.max_instruction_len, cfg.query_dim), 0.02, generator))
        self.blocks = nn.ModuleList(QFormerBlock(cfg, generator=generator) for _ in range(cfg.qformer_layers))
        self.head_ffn = FeedForward(cfg.query_dim, cfg.query_dim * cfg.ffn_mult, generator=generator)
        self.head_norm = LayerNorm(cfg.query_dim, cfg.ln_eps)
        self.proj = Linear(cfg.query_dim, cfg.embed_dim, generator=generator)

    def embed_instruction(self, instr_ids: torch.Tensor) -> torch.Tensor:
        ti = instr_ids.shape[1]
        if ti > self.cfg.max_instruction_len:
            raise InputError(f"instruction has {ti} tokens, limit is {self.cfg.max_instruction_len}")
        return self.instr_embed(instr_ids) + self.instr_pos[:ti]

    def self_attend_queries(
        self, block: QFormerBlock, queries: torch.Tensor, instr: torch.Tensor, instr_mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (F_SA over the L query positions, instruction stream for the next block)."""
        return block.self_attend(queries, instr, instr_mask)

    def cross_attend(self, block: QFormerBlock, fsa: torch.Tensor, fi: torch.Tensor) -> torch.Tensor:
        return block.cross_attend(fsa, fi)

    def project_vlm(self, fca: torch.Tensor) -> torch.Tensor:
        """[B, L, C'] -> [B, L, D]."""
        return self.proj(self.head_norm(fca + self.head_ffn(fca)))

    def forward(self, fi: torch.Tensor, instr_ids: torch.Tensor, instr_mask: torch.Tensor) -> torch.Tensor:
        b = fi.shape[0]
        queries = self.query_tokens.unsqueeze(0).expand(b, -1, -1)
        instr = self.embed_instruction(instr_ids)
        for block in self.blocks:
            fsa, instr = self.self_attend_queries(block, queries, instr, instr_mask)
            queries = block.feed_forward(self.cross_attend(block, fsa, fi))
        return self.project_vlm(queries)


def encode_image(encoder: ImageEncoder, image: ImageLike) -> torch.Tensor:
    """F_I for one image [P, C], or for a batch [B, P, C]."""
    batch, single = as_image_batch(image)
    fi = encoder(batch)
    return fi[0] if single else fi


def instruction_tensors(ids: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    """One tokenised instruction as a [1, T] batch; empty instructions become a single masked slot."""
    if len(ids) == 0:
        return torch.zeros(1, 1, dtype=torch.long), torch.zeros(1, 1, dtype=torch.bool)
    t = torch.as_tensor(list(ids), dtype=torch.long).unsqueeze(0)
    return t, torch.ones_like(t, dtype=torch.bool)


def encode(encoder: ImageEncoder, vlm: VlmEncoder, image: ImageLike, instruction: Sequence[int]) -> torch.Tensor:
    """F_VLM [L, D] for one image and one tokenised instruction."""
    batch, _ = as_image_batch(image)
    ids, mask = instruction_tensors(instruction)
    return vlm(encoder(batch), ids, mask)[0]
