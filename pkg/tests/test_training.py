from dataclasses import replace

import pytest
import torch

from rsmoe.checkpoint import checkpoint_from_model, restore_model, to_bytes
from rsmoe.config import RunConfig
from rsmoe.dataset import make_samples, save_dataset, train_test_split
from rsmoe.decoder import DecoderModel, PrefixAssembly, forward_loss, generate
from rsmoe.errors import CheckpointError, ConfigError, DataError
from rsmoe.lora import merge_all
from rsmoe.moe import MoeModel, expert_forward_loss
from rsmoe.optim import adamw_step, make_optimizer
from rsmoe.recording import RunRecorder
from rsmoe.scenes import graphs_equivalent, parse_caption
from rsmoe.tensor import DTYPE, digest
from rsmoe.training import (
    _expert_trainables,
    _set_trainable,
    _stage2_model,
    caption_samples,
    derive_seed,
    evaluate,
    load_samples,
    make_generator,
    pretrain_language_model,
    resolve_model_config,
    run_onestage,
    run_stage1,
    run_stage2,
)
from rsmoe.vocab import EOS


@pytest.fixture(scope="module")
def split():
    return train_test_split(0, 6, 3)


@pytest.fixture
def stage1(tiny_run, split):
    return run_stage1(tiny_run, samples=split[0])


class TestSeeds:
    def test_derive_seed(self):
        assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
        assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
        assert 0 <= derive_seed(5, "stage1") < 2**63

    def test_generators_are_independent(self):
        a = torch.rand(3, generator=make_generator(0, "x"))
        b = torch.rand(3, generator=make_generator(0, "y"))
        assert not torch.equal(a, b)


class TestConfigResolution:
    def test_vocab_size_filled(self, vocab):
        assert resolve_model_config(RunConfig(), vocab).vocab_size == len(vocab)

    def test_vocab_size_mismatch(self, vocab, tiny_cfg):
        with pytest.raises(ConfigError, match="vocab_size"):
            resolve_model_config(RunConfig(model=replace(tiny_cfg, vocab_size=len(vocab) + 1)), vocab)

    def test_samples_from_file(self, tmp_path, tiny_run):
        path = save_dataset(tmp_path / "d.tsv", make_samples(3, 9), seed=3)
        train, test = load_samples(replace(tiny_run, data_path=str(path)))
        assert [s.index for s in train] == list(range(6))
        assert [s.index for s in test] == [6, 7, 8]
        with pytest.raises(DataError, match="needs"):
            load_samples(replace(tiny_run, data_path=str(path), train_size=8))


class TestWarmup:
    def test_loss_drops_and_decoder_ends_frozen(self, tiny_run, tiny_cfg, split, vocab):
        cfg = replace(tiny_run, pretrain_epochs=4, pretrain_lr=1e-2, batch_size=2)
        decoder = DecoderModel(tiny_cfg, generator=torch.Generator().manual_seed(0))
        losses = pretrain_language_model(decoder, split[0], vocab, cfg)
        assert len(losses) == 4
        assert losses[-1] < losses[0]
        assert not any(p.requires_grad for p in decoder.parameters())

    def test_zero_epochs(self, tiny_run, tiny_cfg, split, vocab):
        decoder = DecoderModel(tiny_cfg, generator=torch.Generator().manual_seed(0))
        assert pretrain_language_model(decoder, split[0], vocab, replace(tiny_run, pretrain_epochs=0)) == []


class TestStageOne:
    def test_image_encoder_frozen(self, stage1):
        assert stage1.initial_digests["image_encoder"] == digest(stage1.model.image_encoder)
        assert stage1.checkpoint.stage == "I"
        assert len(stage1.checkpoint.adapted_sites) == 14

    def test_loss_decreases(self, tiny_run, split):
        cfg = replace(tiny_run, epochs=5, base_lr=1e-2, batch_size=2)
        losses = run_stage1(cfg, samples=split[0]).losses["caption"]
        assert len(losses) == 5
        assert losses[-1] < losses[0]

    def test_deterministic(self, tiny_run, split, stage1):
        again = run_stage1(tiny_run, samples=split[0])
        assert again.losses == stage1.losses
        assert to_bytes(again.checkpoint) == to_bytes(stage1.checkpoint)

    def test_records_every_step(self, tiny_run, split):
        with RunRecorder() as recorder:
            run_stage1(tiny_run, samples=split[0], recorder=recorder)
        # 6 samples in batches of 3: 2 steps per epoch
        assert len(recorder.losses(stage="lm")) == 2 * tiny_run.pretrain_epochs
        assert len(recorder.losses(stage="I")) == 2 * tiny_run.epochs


class TestStageTwo:
    def test_experts_start_as_the_stage_one_decoder(self, tiny_run, stage1, split, make_batch):
        model, merged = _stage2_model(tiny_run, stage1.checkpoint, make_generator(0, "test"))
        assert merged
        reference = restore_model(stage1.checkpoint)
        merge_all(reference)
        batch = make_batch(split[0][:2])
        with torch.no_grad():
            fv = model.vlm_features(batch.images, batch.instr_ids, batch.instr_mask)
            prefix = PrefixAssembly(fv, torch.zeros(2, 2, fv.shape[-1], dtype=DTYPE), torch.ones(2, 2, dtype=torch.bool))
            tokens = torch.tensor([[1, 5, 6], [1, 7, 8]])
            want = reference.llm(prefix, tokens)
            for expert in model.experts:
                assert torch.equal(expert(prefix, tokens), want)

    def test_freeze_contracts(self, tiny_run, stage1, split):
        result = run_stage2(tiny_run, stage1.checkpoint, samples=split[0])
        model = result.model
        assert result.initial_digests["image_encoder"] == stage1.initial_digests["image_encoder"]
        assert digest(model.image_encoder) == result.initial_digests["image_encoder"]
        assert digest(model.vlm) == result.initial_digests["vlm"]
        assert set(result.losses) == set(model.roles)
        assert result.checkpoint.stage == "II" and result.checkpoint.merged

    def test_each_expert_loss_decreases(self, tiny_run, stage1, split):
        cfg = replace(tiny_run, epochs=5, base_lr=1e-2, batch_size=2)
        result = run_stage2(cfg, stage1.checkpoint, samples=split[0])
        for role in result.model.roles:
            losses = result.losses[role]
            assert len(losses) == 5
            assert losses[-1] < losses[0], role

    def test_training_one_expert_leaves_the_others(self, tiny_run, stage1, split, make_batch):
        model, _ = _stage2_model(tiny_run, stage1.checkpoint, make_generator(0, "test"))
        before = [digest(e) for e in model.experts]
        params = _expert_trainables(model, 1, tiny_run, shared=True)
        _set_trainable(model, params)
        state = make_optimizer(model.named_parameters(), weight_decay=0.05)
        batch = make_batch(split[0][:3], roles=model.roles)
        expert_forward_loss(model, batch, 1).backward()
        adamw_step(state, 1e-2)
        after = [digest(e) for e in model.experts]
        assert after[0] == before[0] and after[2] == before[2]
        assert after[1] != before[1]

    def test_joint_mode(self, tiny_run, stage1, split):
        result = run_stage2(replace(tiny_run, router_mode="joint"), stage1.checkpoint, samples=split[0])
        assert list(result.losses) == ["all"]

    def test_without_router_or_lora(self, tiny_run, stage1, split):
        result = run_stage2(replace(tiny_run, use_router=False, use_lora=False), stage1.checkpoint, samples=split[0])
        assert result.model.router is None
        assert result.checkpoint.adapted_sites == []

    def test_rejects_onestage_checkpoint(self, tiny_run, tiny_cfg, vocab):
        ckpt = checkpoint_from_model(MoeModel.build(tiny_cfg, generator=make_generator(0, "test")), stage="onestage", vocab=vocab)
        with pytest.raises(CheckpointError, match="onestage"):
            run_stage2(tiny_run, ckpt)

    def test_resume_from_stage_two(self, tiny_run, stage1, split):
        first = run_stage2(tiny_run, stage1.checkpoint, samples=split[0])
        second = run_stage2(replace(tiny_run, epochs=1), first.checkpoint, samples=split[0])
        assert second.model.num_experts == first.model.num_experts
        assert second.initial_digests["experts"] == [digest(e) for e in first.model.experts]


class TestOneStage:
    def test_runs_for_twice_the_epochs(self, tiny_run, split):
        result = run_onestage(replace(tiny_run, strategy="one-stage"), samples=split[0])
        assert len(result.losses["all"]) == 2 * tiny_run.epochs
        assert result.checkpoint.stage == "onestage"
        assert digest(result.model.image_encoder) == result.initial_digests["image_encoder"]


class TestEvaluate:
    def test_reports(self, tiny_run, stage1, split, vocab):
        result = run_stage2(tiny_run, stage1.checkpoint, samples=split[0])
        report = evaluate(result.model, split[1], vocab, tiny_run)
        assert len(report.captions) == len(split[1])
        assert report.captions == caption_samples(result.model, split[1], vocab, tiny_run)
        for value in (report.metrics.bleu1, report.metrics.bleu4, report.metrics.rouge_l, report.metrics.meteor):
            assert 0.0 <= value <= 100.0
        assert 0.0 <= report.metrics.cider <= 1000.0
        assert 0.0 <= report.semantic.theme_accuracy <= 1.0

    def test_caption_model(self, stage1, split, vocab, tiny_run):
        assert len(evaluate(stage1.model, split[1], vocab, tiny_run).captions) == len(split[1])

    def test_needs_samples(self, stage1, vocab, tiny_run):
        with pytest.raises(DataError):
            evaluate(stage1.model, [], vocab, tiny_run)


class TestMemorisation:
    def test_decoder_memorises_one_caption(self, tiny_cfg, vocab, samples):
        g = torch.Generator().manual_seed(0)
        decoder = DecoderModel(tiny_cfg, generator=g)
        prefix = PrefixAssembly.build(torch.randn(1, tiny_cfg.num_queries, tiny_cfg.embed_dim, dtype=DTYPE, generator=g))
        caption = samples[0].captions.full_caption
        targets = torch.tensor([vocab.encode(caption) + [EOS]])
        state = make_optimizer(decoder.named_parameters(), weight_decay=0.0, grad_clip=0.0)
        for _ in range(200):
            loss = forward_loss(decoder, prefix, targets)
            loss.backward()
            adamw_step(state, 1e-2)
        assert float(forward_loss(decoder, prefix, targets)) < 0.01
        assert vocab.decode(generate(decoder, prefix)[0]) == caption

    @pytest.mark.slow
    def test_both_stages_memorise_ten_samples(self, vocab):
        cfg = RunConfig(
            seed=0,
            train_size=10,
            test_size=0,
            epochs=120,
            warmup_epochs=2,
            pretrain_epochs=30,
            pretrain_lr=3e-3,
            base_lr=5e-3,
            min_lr=1e-4,
            batch_size=5,
            use_lora=True,
        )
        train = make_samples(0, 10)
        stage1 = run_stage1(cfg, samples=train)
        result = run_stage2(cfg, stage1.checkpoint, samples=train)
        assert stage1.checkpoint.adapted_sites and result.checkpoint.adapted_sites
        captions = caption_samples(result.model, train, vocab, cfg)
        hits = sum(graphs_equivalent(parse_caption(c).graph, s.graph) for c, s in zip(captions, train))
        assert hits >= 9
