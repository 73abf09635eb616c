import pytest
import torch
from torch import nn

from rsmoe.errors import ConfigError, NumericError
from rsmoe.optim import Schedule, adamw_step, lr_at, make_optimizer
from rsmoe.tensor import DTYPE


def _param(*values):
    return nn.Parameter(torch.tensor(values, dtype=DTYPE))


class TestSchedule:
    def test_endpoints(self):
        s = Schedule(base_lr=1e-3, min_lr=1e-5, warmup_epochs=1, total_epochs=5)
        assert lr_at(s, 0, 4) == 0.0
        assert lr_at(s, 2, 4) == pytest.approx(5e-4)
        assert lr_at(s, 4, 4) == pytest.approx(1e-3)
        assert lr_at(s, 19, 4) == pytest.approx(1e-5)
        assert lr_at(s, 25, 4) == pytest.approx(1e-5)

    def test_shape(self):
        s = Schedule(base_lr=1.0, min_lr=0.1, warmup_epochs=2, total_epochs=6)
        lrs = [lr_at(s, k, 3) for k in range(18)]
        assert all(a < b for a, b in zip(lrs[:6], lrs[1:7]))
        assert all(a >= b for a, b in zip(lrs[6:], lrs[7:]))
        assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= 1.0 / 6 + 1e-12

    def test_no_warmup_starts_at_base(self):
        assert lr_at(Schedule(base_lr=0.5, min_lr=0.0, warmup_epochs=0, total_epochs=2), 0, 10) == 0.5

    def test_errors(self):
        with pytest.raises(ConfigError):
            Schedule(base_lr=1e-4, min_lr=1e-3)
        with pytest.raises(ConfigError):
            Schedule(total_epochs=0)
        with pytest.raises(ConfigError):
            lr_at(Schedule(), -1, 4)
        with pytest.raises(ConfigError):
            lr_at(Schedule(), 0, 0)


class TestAdamW:
    def test_zero_gradient_without_decay_is_a_no_op(self):
        p = _param(1.0, -2.0)
        state = make_optimizer([("p", p)], weight_decay=0.0, grad_clip=0.0)
        p.grad = torch.zeros_like(p)
        adamw_step(state, 0.1)
        assert p.tolist() == [1.0, -2.0]

    def test_decoupled_decay(self):
        p = _param(1.0, -2.0)
        state = make_optimizer([("p", p)], weight_decay=0.05, grad_clip=0.0)
        for _ in range(3):
            adamw_step(state, 0.1)
        factor = (1.0 - 0.1 * 0.05) ** 3
        assert torch.allclose(p.detach(), torch.tensor([factor, -2.0 * factor], dtype=DTYPE), atol=1e-15)
        assert state.steps == 3

    def test_converges_on_a_quadratic(self):
        w = _param(1.0)
        state = make_optimizer([("w", w)], weight_decay=0.0, grad_clip=0.0)
        schedule = Schedule(base_lr=0.1, min_lr=0.0, warmup_epochs=0, total_epochs=1)
        for step in range(500):
            (w**2).sum().backward()
            adamw_step(state, lr_at(schedule, step, 500))
        assert float(w.detach()[0]) ** 2 < 1e-3

    def test_frozen_parameters_are_skipped(self):
        live, frozen = _param(1.0), _param(2.0)
        frozen.requires_grad_(False)
        state = make_optimizer([("live", live), ("frozen", frozen), ("again", live)])
        assert state.names == ["live"]
        (live * frozen).sum().backward()
        adamw_step(state, 0.01)
        assert frozen.item() == 2.0
        assert frozen not in state.optimizer.state

    def test_non_finite_gradient_names_the_parameter(self):
        p = _param(1.0)
        state = make_optimizer([("vlm.proj.weight", p)])
        p.grad = torch.tensor([float("nan")], dtype=DTYPE)
        with pytest.raises(NumericError, match="vlm.proj.weight"):
            adamw_step(state, 0.01)

    def test_nothing_to_train(self):
        p = _param(1.0)
        p.requires_grad_(False)
        with pytest.raises(ConfigError):
            make_optimizer([("p", p)])

    def test_clipping_reports_norm(self):
        p = _param(0.0, 0.0)
        state = make_optimizer([("p", p)], weight_decay=0.0, grad_clip=1.0)
        p.grad = torch.tensor([3.0, 4.0], dtype=DTYPE)
        assert adamw_step(state, 0.01) == pytest.approx(5.0)
        assert p.grad is None
        unclipped = make_optimizer([("p", p)], grad_clip=0.0)
        assert adamw_step(unclipped, 0.01) is None
