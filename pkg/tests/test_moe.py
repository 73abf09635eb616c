from dataclasses import replace

import pytest
import torch

from rsmoe.decoder import DecoderModel
from rsmoe.errors import ConfigError
from rsmoe.layers import FeedForward
from rsmoe.moe import (
    InstructionRouter,
    MoeModel,
    aggregate,
    build_no_router_variant,
    expert_forward_loss,
    masked_mean,
    moe_generate,
    moe_generate_ids,
    route,
)
from rsmoe.scenes import INSTRUCTIONS
from rsmoe.tensor import DTYPE, digest


def test_masked_mean():
    x = torch.tensor([[[1.0], [3.0], [100.0]], [[2.0], [4.0], [6.0]]], dtype=DTYPE)
    mask = torch.tensor([[True, True, False], [False, False, False]])
    assert masked_mean(x, mask).tolist() == [[2.0], [0.0]]


def test_aggregate():
    assert aggregate(["a b", " c ", "d"]) == "a b . c . d"
    assert aggregate(["only"]) == "only"


class TestRouter:
    def test_one_prompt_per_expert(self, tiny_cfg, gen, vocab):
        router = InstructionRouter(tiny_cfg, generator=gen(0))
        ids = torch.tensor([vocab.encode(INSTRUCTIONS[0])])
        fv = torch.randn(1, tiny_cfg.num_queries, tiny_cfg.embed_dim, dtype=DTYPE, generator=gen(1))
        prompts = route(router, ids, torch.ones_like(ids, dtype=torch.bool), fv)
        assert len(prompts) == tiny_cfg.num_experts
        assert all(tuple(p.shape) == (1, tiny_cfg.prompt_len, tiny_cfg.embed_dim) for p in prompts)
        assert not torch.allclose(prompts[0], prompts[1])

    def test_instruction_changes_prompts(self, tiny_cfg, gen, vocab):
        router = InstructionRouter(tiny_cfg, generator=gen(0))
        fv = torch.randn(1, tiny_cfg.num_queries, tiny_cfg.embed_dim, dtype=DTYPE, generator=gen(1))
        a_ids = torch.tensor([vocab.encode(INSTRUCTIONS[0])])
        b_ids = torch.tensor([vocab.encode(INSTRUCTIONS[2])])
        a = router(a_ids, torch.ones_like(a_ids, dtype=torch.bool), fv)
        b = router(b_ids, torch.ones_like(b_ids, dtype=torch.bool), fv)
        assert not torch.allclose(a[0], b[0])

    def test_trunk_is_a_feed_forward(self, tiny_cfg, gen):
        router = InstructionRouter(tiny_cfg, generator=gen(0))
        assert isinstance(router.trunk, FeedForward)
        assert tuple(router.trunk.fc1.weight.shape) == (tiny_cfg.router_dim, tiny_cfg.router_dim + tiny_cfg.embed_dim)
        assert tuple(router.trunk.fc2.weight.shape) == (tiny_cfg.router_dim, tiny_cfg.router_dim)
        shared = {id(p) for p in router.shared_parameters()}
        assert {id(p) for p in router.trunk.parameters()} <= shared

    def test_different_images_give_different_prompts(self, tiny_cfg, gen, samples, make_batch):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        batch = make_batch(samples[:2])
        fv = model.vlm_features(batch.images, batch.instr_ids, batch.instr_mask)
        assert torch.equal(batch.instr_ids[0], batch.instr_ids[1])
        for prompt in route(model.router, batch.instr_ids, batch.instr_mask, fv):
            assert not torch.allclose(prompt[0], prompt[1], atol=1e-9)

    def test_shared_parameters(self, tiny_cfg, gen):
        router = InstructionRouter(tiny_cfg, num_experts=2, generator=gen(0))
        assert router.num_experts == 2
        shared = {id(p) for p in router.shared_parameters()}
        assert all(id(p) not in shared for p in router.heads.parameters())


class TestMoeModel:
    def test_experts_start_identical(self, tiny_cfg, gen):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        assert model.num_experts == 3
        assert model.roles == ("theme", "objects", "relations")
        assert len({digest(e) for e in model.experts}) == 1
        assert model.experts[0] is not model.experts[1]

    def test_validation(self, tiny_cfg, gen):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        experts = list(model.experts)
        with pytest.raises(ConfigError, match="roles"):
            MoeModel(tiny_cfg, model.image_encoder, model.vlm, experts[:2], None)
        with pytest.raises(ConfigError, match="distinct"):
            MoeModel(tiny_cfg, model.image_encoder, model.vlm, experts, None, roles=("theme", "theme", "objects"))
        with pytest.raises(ConfigError, match="heads"):
            router = InstructionRouter(tiny_cfg, num_experts=2, generator=gen(1))
            MoeModel(tiny_cfg, model.image_encoder, model.vlm, experts, router)

    def test_single_expert_roles(self, tiny_cfg, gen):
        model = MoeModel.build(replace(tiny_cfg, num_experts=1), generator=gen(0))
        assert model.roles == ("caption",)

    def test_prefix_lengths(self, tiny_cfg, gen, samples, make_batch):
        batch = make_batch(samples[:2])
        routed = MoeModel.build(tiny_cfg, generator=gen(0))
        fv = routed.vlm_features(batch.images, batch.instr_ids, batch.instr_mask)
        assert routed.prefix(fv, batch.instr_ids, batch.instr_mask, 1).length == tiny_cfg.num_queries + tiny_cfg.prompt_len
        plain = MoeModel.build(tiny_cfg, use_router=False, generator=gen(0))
        prefix = plain.prefix(fv, batch.instr_ids, batch.instr_mask, 1)
        assert prefix.length == tiny_cfg.num_queries + batch.instr_ids.shape[1]
        assert torch.equal(prefix.prompt_mask, batch.instr_mask)

    def test_expert_loss_errors(self, tiny_cfg, gen, samples, make_batch):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        batch = make_batch(samples[:2], roles=("theme",))
        assert torch.isfinite(expert_forward_loss(model, batch, 0))
        with pytest.raises(ConfigError, match="out of range"):
            expert_forward_loss(model, batch, 3)
        with pytest.raises(ConfigError, match="objects"):
            expert_forward_loss(model, batch, 1)

    def test_expert_gradients_are_isolated(self, tiny_cfg, gen, samples, make_batch):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        batch = make_batch(samples[:2], roles=model.roles)
        expert_forward_loss(model, batch, 1).backward()
        assert any(p.grad is not None for p in model.experts[1].parameters())
        assert all(p.grad is None for p in model.experts[0].parameters())
        assert all(p.grad is None for p in model.experts[2].parameters())
        assert all(p.grad is None for p in model.router.heads[0].parameters())
        assert all(p.grad is not None for p in model.router.heads[1].parameters())

    def test_generation(self, tiny_cfg, gen, samples, make_batch, vocab):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        batch = make_batch(samples[:2])
        ids = moe_generate_ids(model, batch.images, batch.instr_ids, batch.instr_mask)
        assert len(ids) == 2 and all(len(row) == 3 for row in ids)
        captions = moe_generate(model, batch.images, batch.instr_ids, batch.instr_mask, vocab)
        assert captions[0] == aggregate([vocab.decode(x) for x in ids[0]])

    def test_no_router_variant(self, tiny_cfg, gen, samples, make_batch):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        variant = build_no_router_variant(model)
        assert variant.router is None and variant.roles == model.roles
        assert [digest(e) for e in variant.experts] == [digest(e) for e in model.experts]
        with torch.no_grad():
            variant.experts[0].head.bias.add_(1.0)
        assert digest(variant.experts[0]) != digest(model.experts[0])
        batch = make_batch(samples[:1], roles=model.roles)
        assert torch.isfinite(expert_forward_loss(variant, batch, 2))

    def test_decoders_are_plain(self, tiny_cfg, gen):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        assert all(isinstance(e, DecoderModel) for e in model.experts)
