import pytest
import torch

from rsmoe.decoder import CaptionModel
from rsmoe.errors import LoraError
from rsmoe.layers import Linear, count_parameters, freeze
from rsmoe.lora import (
    LoraLinear,
    adapter_parameter_count,
    adapter_parameters,
    adapters,
    apply_lora_plan,
    merge_all,
    wrap,
)
from rsmoe.moe import MoeModel
from rsmoe.tensor import DTYPE


def _randomize_b(layer: LoraLinear, gen):
    with torch.no_grad():
        layer.lora_B.copy_(torch.randn(layer.lora_B.shape, dtype=DTYPE, generator=gen) * 0.1)


class TestLoraLinear:
    def test_fresh_adapter_is_identity(self, gen):
        base = Linear(8, 6, generator=gen(0))
        x = torch.randn(3, 8, dtype=DTYPE, generator=gen(1))
        before = base(x)
        adapted = wrap(base, 2, 4.0, generator=gen(2))
        assert torch.equal(adapted(x), before)
        assert adapted.scaling == 2.0

    def test_base_is_frozen(self, gen):
        adapted = wrap(Linear(8, 6, generator=gen(0)), 2, 4.0, generator=gen(1))
        assert not adapted.base.weight.requires_grad and not adapted.base.bias.requires_grad
        x = torch.randn(3, 8, dtype=DTYPE, generator=gen(2))
        adapted(x).sum().backward()
        assert adapted.base.weight.grad is None
        assert adapted.lora_B.grad is not None
        assert adapted.adapter_parameter_count == 2 * (8 + 6)

    @pytest.mark.parametrize("rank", [0, 6, 7])
    def test_rank_bounds(self, gen, rank):
        with pytest.raises(LoraError, match="rank"):
            wrap(Linear(8, 6, generator=gen(0)), rank, 1.0)

    def test_wrapping_twice(self, gen):
        adapted = wrap(Linear(8, 6, generator=gen(0)), 2, 4.0)
        with pytest.raises(LoraError, match="already adapted"):
            LoraLinear(adapted, 2, 4.0, site="x")

    def test_merge_matches_adapted_forward(self, gen):
        adapted = wrap(Linear(8, 6, generator=gen(0)), 3, 6.0, generator=gen(1))
        _randomize_b(adapted, gen(2))
        x = torch.randn(4, 8, dtype=DTYPE, generator=gen(3))
        merged = adapted.merge()
        assert isinstance(merged, Linear) and not isinstance(merged, LoraLinear)
        assert torch.allclose(merged(x), adapted(x), atol=1e-12)
        assert not merged.weight.requires_grad
        with pytest.raises(LoraError, match="already merged"):
            adapted.merge()

    def test_merge_leaves_global_rng_alone(self, gen):
        adapted = wrap(Linear(8, 6, generator=gen(0)), 2, 4.0, generator=gen(1))
        state = torch.get_rng_state()
        adapted.merge()
        assert torch.equal(torch.get_rng_state(), state)


class TestPlans:
    def test_stage_one_site_counts(self, tiny_cfg, default_cfg, gen):
        assert apply_lora_plan(CaptionModel(tiny_cfg, generator=gen(0)), "I", rank=2, alpha=4.0, generator=gen(1)) == 14
        assert apply_lora_plan(CaptionModel(default_cfg, generator=gen(0)), "I", rank=4, alpha=8.0, generator=gen(1)) == 26

    def test_stage_two_site_count(self, tiny_cfg, gen):
        model = MoeModel.build(tiny_cfg, generator=gen(0))
        assert apply_lora_plan(model, "II", rank=2, alpha=4.0, generator=gen(1)) == 12
        sites = [name for name, _ in adapters(model)]
        assert all(name.startswith("experts.") for name in sites)

    def test_plan_applied_twice(self, tiny_cfg, gen):
        model = CaptionModel(tiny_cfg, generator=gen(0))
        apply_lora_plan(model, "I", rank=2, alpha=4.0, generator=gen(1))
        with pytest.raises(LoraError, match="already adapted"):
            apply_lora_plan(model, "I", rank=2, alpha=4.0, generator=gen(1))

    def test_unknown_stage_and_empty_match(self, tiny_cfg, gen):
        model = CaptionModel(tiny_cfg, generator=gen(0))
        with pytest.raises(LoraError, match="unknown"):
            apply_lora_plan(model, "III", rank=2, alpha=4.0)
        with pytest.raises(LoraError, match="matched no layers"):
            apply_lora_plan(model, "II", rank=2, alpha=4.0)

    def test_adapted_model_matches_base_at_init(self, tiny_cfg, gen, samples, make_batch):
        model = CaptionModel(tiny_cfg, generator=gen(0))
        batch = make_batch(samples[:2])
        with torch.no_grad():
            before = model.loss(batch)
            apply_lora_plan(model, "I", rank=2, alpha=4.0, generator=gen(1))
            after = model.loss(batch)
        assert float(before) == float(after)

    def test_merge_all(self, tiny_cfg, gen, samples, make_batch):
        model = CaptionModel(tiny_cfg, generator=gen(0))
        apply_lora_plan(model, "I", rank=2, alpha=4.0, generator=gen(1))
        g = gen(2)
        for _, layer in adapters(model):
            _randomize_b(layer, g)
        batch = make_batch(samples[:2])
        with torch.no_grad():
            adapted = model.loss(batch)
            assert merge_all(model) == 14
            merged = model.loss(batch)
        assert adapters(model) == []
        assert abs(float(adapted) - float(merged)) < 1e-12

    def test_trainable_share_stage_one(self, default_cfg, gen):
        model = CaptionModel(default_cfg, generator=gen(0))
        apply_lora_plan(model, "I", rank=default_cfg.lora_rank, alpha=default_cfg.lora_alpha, generator=gen(1))
        freeze(model)
        for p in [model.vlm.query_tokens, *model.vlm.proj.parameters(), *adapter_parameters(model)]:
            p.requires_grad_(True)
        assert count_parameters(model, trainable_only=True) / count_parameters(model) < 0.10

    def test_trainable_share_stage_two(self, default_cfg, gen):
        model = MoeModel.build(default_cfg, generator=gen(0))
        freeze(model)
        apply_lora_plan(model, "II", rank=default_cfg.lora_rank, alpha=default_cfg.lora_alpha, generator=gen(1))
        for p in model.router.parameters():
            p.requires_grad_(True)
        trainable = count_parameters(model, trainable_only=True)
        assert trainable == adapter_parameter_count(model) + count_parameters(model.router)
        assert trainable / count_parameters(model) < 0.10
