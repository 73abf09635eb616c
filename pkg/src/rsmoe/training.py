"""
Training pipelines.

  pretrain_language_model  full-parameter warm-up of a decoder on caption text
  run_stage1               frozen image encoder; VLM encoder + one decoder, LoRA plan I
  run_stage2               frozen encoders; decoder cloned into N experts + router, LoRA plan II
  run_onestage             everything from the warm-up decoder at once, 2x epochs
  evaluate                 greedy captions, reference metrics and semantic accuracy

Every random draw comes from a torch.Generator derived from (seed, purpose);
the global RNG is never used.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
from tqdm.auto import tqdm

from .checkpoint import Checkpoint, checkpoint_from_model, restore_model
from .config import ModelConfig, RunConfig, dump_config
from .dataset import Batch, Sample, collate, iter_batches, load_dataset, train_test_split
from .decoder import CaptionModel, DecoderModel, PrefixAssembly, clone_weights, forward_loss
from .errors import CheckpointError, ConfigError, DataError
from .layers import count_parameters, freeze
from .lora import adapter_parameters, apply_lora_plan, merge_all
from .metrics import EvalCorpus, MetricReport, SemanticReport, evaluate_corpus, semantic_accuracy
from .moe import InstructionRouter, MoeModel, expert_forward_loss, moe_generate
from .optim import OptimizerState, Schedule, adamw_step, lr_at, make_optimizer
from .recording import RunRecorder
from .scenes import parse_caption, reference_captions
from .tensor import DTYPE, digest
from .vision import ImageEncoder, VlmEncoder
from .vocab import Vocab, default_vocab

logger = logging.getLogger(__name__)

Model = Union[CaptionModel, MoeModel]


def derive_seed(seed: int, *parts: object) -> int:
    h = hashlib.sha256(repr((seed,) + parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int, *parts: object) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *parts))


def resolve_model_config(cfg: RunConfig, vocab: Vocab) -> ModelConfig:
    model = cfg.model if cfg.model.vocab_size else replace(cfg.model, vocab_size=len(vocab))
    if model.vocab_size != len(vocab):
        raise ConfigError(f"model.vocab_size={model.vocab_size} but the vocabulary has {len(vocab)} tokens")
    model.validate()
    return model


def load_samples(cfg: RunConfig) -> Tuple[List[Sample], List[Sample]]:
    """(train, test) from `cfg.data_path` when set, else generated from `cfg.data_seed`."""
    if not cfg.data_path:
        return train_test_split(cfg.data_seed, cfg.train_size, cfg.test_size)
    _, samples = load_dataset(cfg.data_path)
    need = cfg.train_size + cfg.test_size
    if len(samples) < need:
        raise DataError(f"{cfg.data_path} holds {len(samples)} samples, the run needs {need}")
    return samples[: cfg.train_size], samples[cfg.train_size : need]


@dataclass
class StageResult:
    checkpoint: Checkpoint
    model: Model
    losses: Dict[str, List[float]]  # role -> mean loss per epoch
    initial_digests: Dict[str, object] = field(default_factory=dict)


def _schedule(cfg: RunConfig, epochs: int) -> Schedule:
    return Schedule(base_lr=cfg.base_lr, min_lr=cfg.min_lr, warmup_epochs=cfg.warmup_epochs, total_epochs=epochs)


def _optimizer(model: nn.Module, cfg: RunConfig) -> OptimizerState:
    return make_optimizer(
        model.named_parameters(),
        weight_decay=cfg.weight_decay,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        grad_clip=cfg.grad_clip,
    )


def _set_trainable(model: nn.Module, params: Sequence[nn.Parameter]) -> None:
    freeze(model)
    for p in params:
        p.requires_grad_(True)


def _log_trainable(stage: str, model: nn.Module) -> None:
    total = count_parameters(model)
    trainable = count_parameters(model, trainable_only=True)
    logger.info("stage %s: %d of %d parameters trainable (%.2f%%)", stage, trainable, total, 100.0 * trainable / total)


def _collate(samples: Sequence[Sample], vocab: Vocab, cfg: RunConfig, mcfg: ModelConfig, roles: Sequence[str]) -> Batch:
    return collate(
        samples,
        vocab,
        instruction=cfg.instruction,
        roles=roles,
        max_caption_len=mcfg.max_caption_len,
        max_instruction_len=mcfg.max_instruction_len,
    )


def fit(
    loss_fn: Callable[[Batch], torch.Tensor],
    state: OptimizerState,
    samples: Sequence[Sample],
    vocab: Vocab,
    cfg: RunConfig,
    mcfg: ModelConfig,
    *,
    roles: Sequence[str],
    schedule: Schedule,
    stage: str,
    role: str,
    generator: torch.Generator,
    recorder: Optional[RunRecorder] = None,
) -> List[float]:
    """Shuffled mini-batch loop; returns the mean loss of every epoch."""
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    epoch_losses: List[float] = []
    step = 0
    for epoch in range(schedule.total_epochs):
        chunks = list(iter_batches(samples, cfg.batch_size, generator=generator))
        total = 0.0
        bar = tqdm(
            chunks,
            desc=f"stage {stage} {role} {epoch + 1}/{schedule.total_epochs}",
            disable=None if cfg.progress else True,
            leave=False,
        )
        for chunk in bar:
            batch = _collate(chunk, vocab, cfg, mcfg, roles)
            lr = lr_at(schedule, step, steps_per_epoch)
            loss = loss_fn(batch)
            loss.backward()
            adamw_step(state, lr)
            value = float(loss.detach())
            if recorder is not None:
                recorder.record(step, stage, role, lr, value)
            total += value
            bar.set_postfix(loss=f"{value:.4f}")
            step += 1
        epoch_losses.append(total / len(chunks))
        logger.info(
            "stage %s %s epoch %d/%d: mean loss %.6f", stage, role, epoch + 1, schedule.total_epochs, epoch_losses[-1]
        )
    return epoch_losses


# --------------------------------------------------------------------------- warm-up


def pretrain_language_model(
    decoder: DecoderModel,
    samples: Sequence[Sample],
    vocab: Vocab,
    cfg: RunConfig,
    *,
    recorder: Optional[RunRecorder] = None,
) -> List[float]:
    """
    Next-token training of every decoder weight on caption text. The prefix is
    all zeros and as long as the Stage I prefix, so caption positions line up
    with later conditioning. Leaves the decoder frozen.
    """
    if cfg.pretrain_epochs == 0:
        freeze(decoder)
        return []
    mcfg = decoder.cfg
    roles = ("caption", "positions") if "positions" in mcfg.roles else ("caption",)
    prefix_len = mcfg.num_queries + max(1, len(vocab.encode(cfg.instruction)))
    for p in decoder.parameters():
        p.requires_grad_(True)
    state = _optimizer(decoder, cfg)
    schedule = Schedule(
        base_lr=cfg.pretrain_lr, min_lr=min(cfg.min_lr, cfg.pretrain_lr), warmup_epochs=0, total_epochs=cfg.pretrain_epochs
    )

    def loss_fn(batch: Batch) -> torch.Tensor:
        prefix = PrefixAssembly.build(torch.zeros(len(batch), prefix_len, mcfg.embed_dim, dtype=DTYPE))
        return sum(forward_loss(decoder, prefix, batch.targets[r]) for r in roles) / len(roles)

    losses = fit(
        loss_fn,
        state,
        samples,
        vocab,
        cfg,
        mcfg,
        roles=roles,
        schedule=schedule,
        stage="lm",
        role="caption",
        generator=make_generator(cfg.seed, "shuffle", "lm"),
        recorder=recorder,
    )
    freeze(decoder)
    return losses


# --------------------------------------------------------------------------- stage I


def run_stage1(
    cfg: RunConfig, *, samples: Optional[Sequence[Sample]] = None, recorder: Optional[RunRecorder] = None
) -> StageResult:
    cfg.validate()
    vocab = default_vocab()
    mcfg = resolve_model_config(cfg, vocab)
    train = list(samples) if samples is not None else load_samples(cfg)[0]

    init = make_generator(cfg.seed, "stage1", "init")
    model = CaptionModel(mcfg, generator=init)
    pretrain_language_model(model.llm, train, vocab, cfg, recorder=recorder)
    digests: Dict[str, object] = {"image_encoder": digest(model.image_encoder)}

    if cfg.use_lora:
        sites = apply_lora_plan(model, "I", rank=mcfg.lora_rank, alpha=mcfg.lora_alpha, generator=init)
        logger.info("stage I: %d LoRA sites", sites)
        trainable = [model.vlm.query_tokens, *model.vlm.proj.parameters(), *adapter_parameters(model)]
    else:
        trainable = [*model.vlm.parameters(), *model.llm.parameters()]
    _set_trainable(model, trainable)
    _log_trainable("I", model)

    shuffle = make_generator(cfg.seed, "shuffle", "I")
    losses = fit(
        lambda b: model.loss(b, "caption"),
        _optimizer(model, cfg),
        train,
        vocab,
        cfg,
        mcfg,
        roles=("caption",),
        schedule=_schedule(cfg, cfg.epochs),
        stage="I",
        role="caption",
        generator=shuffle,
        recorder=recorder,
    )
    ckpt = checkpoint_from_model(model, stage="I", vocab=vocab, generator=shuffle, run_config=dump_config(cfg))
    return StageResult(checkpoint=ckpt, model=model, losses={"caption": losses}, initial_digests=digests)


# --------------------------------------------------------------------------- stage II


def _expert_trainables(model: MoeModel, i: int, cfg: RunConfig, *, shared: bool) -> List[nn.Parameter]:
    expert = model.experts[i]
    params = adapter_parameters(expert) if cfg.use_lora else list(expert.parameters())
    if model.router is not None:
        params += list(model.router.heads[i].parameters())
        if shared:
            params += model.router.shared_parameters()
    return params


def _feature_cache(model: MoeModel, samples: Sequence[Sample], vocab: Vocab, cfg: RunConfig) -> Dict[int, torch.Tensor]:
    """F_VLM per sample index; valid while the encoders stay frozen."""
    cache: Dict[int, torch.Tensor] = {}
    with torch.no_grad():
        for chunk in iter_batches(samples, cfg.batch_size):
            batch = _collate(chunk, vocab, cfg, model.cfg, ())
            fv = model.vlm_features(batch.images, batch.instr_ids, batch.instr_mask)
            for k, s in enumerate(chunk):
                cache[s.index] = fv[k]
    return cache


def _stage2_model(cfg: RunConfig, stage1: Checkpoint, generator: torch.Generator) -> Tuple[MoeModel, bool]:
    if stage1.stage == "II":
        model = restore_model(stage1)
        if cfg.model.num_experts != model.num_experts:
            logger.warning("resuming a %d-expert checkpoint; ignoring num_experts=%d", model.num_experts, cfg.model.num_experts)
        return model, stage1.merged

    mcfg = replace(
        stage1.model_config,
        num_experts=cfg.model.num_experts,
        prompt_len=cfg.model.prompt_len,
        router_dim=cfg.model.router_dim,
    )
    mcfg.validate()
    stage1_model = restore_model(stage1)
    merged = merge_all(stage1_model) > 0
    experts = [clone_weights(stage1_model.llm) for _ in mcfg.roles]
    router = InstructionRouter(mcfg, generator=generator) if cfg.use_router else None
    model = MoeModel(mcfg, stage1_model.image_encoder, stage1_model.vlm, experts, router)
    freeze(model)
    if cfg.use_lora:
        sites = apply_lora_plan(model, "II", rank=mcfg.lora_rank, alpha=mcfg.lora_alpha, generator=generator)
        logger.info("stage II: %d LoRA sites over %d experts", sites, model.num_experts)
    return model, merged


def run_stage2(
    cfg: RunConfig,
    stage1: Checkpoint,
    *,
    samples: Optional[Sequence[Sample]] = None,
    recorder: Optional[RunRecorder] = None,
) -> StageResult:
    """
    Fresh Stage II from a Stage I checkpoint, or another round of Stage II
    training when given a Stage II checkpoint.
    """
    if stage1.stage not in ("I", "II"):
        raise CheckpointError(f"stage II training needs a stage I or stage II checkpoint, got stage {stage1.stage!r}")
    cfg.validate()
    vocab = stage1.vocab
    train = list(samples) if samples is not None else load_samples(cfg)[0]
    init = make_generator(cfg.seed, "stage2", "init", cfg.model.num_experts, cfg.use_router, cfg.router_mode, cfg.use_lora)
    model, merged = _stage2_model(cfg, stage1, init)
    mcfg = model.cfg
    digests: Dict[str, object] = {
        "image_encoder": digest(model.image_encoder),
        "vlm": digest(model.vlm),
        "experts": [digest(e) for e in model.experts],
    }
    cache = _feature_cache(model, train, vocab, cfg)

    def features(batch: Batch) -> torch.Tensor:
        return torch.stack([cache[s.index] for s in batch.samples])

    losses: Dict[str, List[float]] = {}
    shuffle = make_generator(cfg.seed, "shuffle", "II", mcfg.num_experts, cfg.use_router, cfg.router_mode)
    all_trainable: List[nn.Parameter] = []
    if cfg.router_mode == "joint":
        trainable = [p for i in range(model.num_experts) for p in _expert_trainables(model, i, cfg, shared=i == 0)]
        _set_trainable(model, trainable)
        _log_trainable("II", model)
        losses["all"] = fit(
            lambda b: sum(expert_forward_loss(model, b, i, fv=features(b)) for i in range(model.num_experts)),
            _optimizer(model, cfg),
            train,
            vocab,
            cfg,
            mcfg,
            roles=model.roles,
            schedule=_schedule(cfg, cfg.epochs),
            stage="II",
            role="all",
            generator=shuffle,
            recorder=recorder,
        )
        all_trainable = trainable
    else:
        for i, role in enumerate(model.roles):
            trainable = _expert_trainables(model, i, cfg, shared=i == 0)
            _set_trainable(model, trainable)
            _log_trainable(f"II/{role}", model)
            losses[role] = fit(
                lambda b, i=i: expert_forward_loss(model, b, i, fv=features(b)),
                _optimizer(model, cfg),
                train,
                vocab,
                cfg,
                mcfg,
                roles=(role,),
                schedule=_schedule(cfg, cfg.epochs),
                stage="II",
                role=role,
                generator=shuffle,
                recorder=recorder,
            )
            all_trainable += trainable
    _set_trainable(model, all_trainable)
    ckpt = checkpoint_from_model(
        model, stage="II", vocab=vocab, merged=merged, generator=shuffle, run_config=dump_config(cfg)
    )
    return StageResult(checkpoint=ckpt, model=model, losses=losses, initial_digests=digests)


# --------------------------------------------------------------------------- one-stage baseline


def run_onestage(
    cfg: RunConfig, *, samples: Optional[Sequence[Sample]] = None, recorder: Optional[RunRecorder] = None
) -> StageResult:
    """VLM encoder, router and experts trained together on the summed expert losses."""
    cfg.validate()
    vocab = default_vocab()
    mcfg = resolve_model_config(cfg, vocab)
    train = list(samples) if samples is not None else load_samples(cfg)[0]

    # Same draws as Stage I, so both strategies start from identical encoder and decoder weights.
    init = make_generator(cfg.seed, "stage1", "init")
    image_encoder = ImageEncoder(mcfg, generator=init).freeze()
    vlm = VlmEncoder(mcfg, generator=init)
    base = DecoderModel(mcfg, generator=init)
    pretrain_language_model(base, train, vocab, cfg, recorder=recorder)

    extra = make_generator(cfg.seed, "onestage", "init", mcfg.num_experts, cfg.use_router, cfg.use_lora)
    router = InstructionRouter(mcfg, generator=extra) if cfg.use_router else None
    model = MoeModel(mcfg, image_encoder, vlm, [clone_weights(base) for _ in mcfg.roles], router)
    digests: Dict[str, object] = {"image_encoder": digest(model.image_encoder)}

    if cfg.use_lora:
        apply_lora_plan(model, "I", rank=mcfg.lora_rank, alpha=mcfg.lora_alpha, generator=extra)
        apply_lora_plan(model, "II", rank=mcfg.lora_rank, alpha=mcfg.lora_alpha, generator=extra)
        trainable = [model.vlm.query_tokens, *model.vlm.proj.parameters(), *adapter_parameters(model)]
    else:
        trainable = [*model.vlm.parameters(), *model.experts.parameters()]
    if router is not None:
        trainable += list(router.parameters())
    _set_trainable(model, trainable)
    _log_trainable("onestage", model)

    def loss_fn(batch: Batch) -> torch.Tensor:
        fv = model.vlm_features(batch.images, batch.instr_ids, batch.instr_mask)
        return sum(expert_forward_loss(model, batch, i, fv=fv) for i in range(model.num_experts))

    shuffle = make_generator(cfg.seed, "shuffle", "onestage", mcfg.num_experts, cfg.use_router)
    losses = fit(
        loss_fn,
        _optimizer(model, cfg),
        train,
        vocab,
        cfg,
        mcfg,
        roles=model.roles,
        schedule=_schedule(cfg, 2 * cfg.epochs),
        stage="onestage",
        role="all",
        generator=shuffle,
        recorder=recorder,
    )
    ckpt = checkpoint_from_model(model, stage="onestage", vocab=vocab, generator=shuffle, run_config=dump_config(cfg))
    return StageResult(checkpoint=ckpt, model=model, losses={"all": losses}, initial_digests=digests)


# --------------------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    metrics: MetricReport
    semantic: SemanticReport
    captions: List[str]


def caption_samples(model: Model, samples: Sequence[Sample], vocab: Vocab, cfg: RunConfig) -> List[str]:
    """Greedy captions in sample order."""
    out: List[str] = []
    mcfg = model.cfg
    for chunk in iter_batches(samples, cfg.batch_size):
        batch = _collate(chunk, vocab, cfg, mcfg, ())
        if isinstance(model, MoeModel):
            out.extend(moe_generate(model, batch.images, batch.instr_ids, batch.instr_mask, vocab))
        else:
            ids = model.caption_ids(batch.images, batch.instr_ids, batch.instr_mask)
            out.extend(vocab.decode(row) for row in ids)
    return out


def evaluate(model: Model, samples: Sequence[Sample], vocab: Vocab, cfg: RunConfig) -> Evaluation:
    if not samples:
        raise DataError("evaluation needs at least one sample")
    captions = caption_samples(model, samples, vocab, cfg)
    corpus = EvalCorpus.from_texts(captions, [reference_captions(s.graph) for s in samples])
    semantic = semantic_accuracy([parse_caption(c).graph for c in captions], [s.graph for s in samples])
    return Evaluation(metrics=evaluate_corpus(corpus), semantic=semantic, captions=captions)
