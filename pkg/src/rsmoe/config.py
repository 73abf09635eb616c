"""
Model and run configuration, plus the flat `key = value` config file format.

Precedence is flags > file > defaults; `dump_config` writes the same format
so the echo in an output directory reproduces the run.
"""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError
from .scenes import EXPERT_ROLES, INSTRUCTIONS


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 64  # C, image-encoder width
    query_dim: int = 64  # C', Q-Former width
    num_queries: int = 8  # L
    embed_dim: int = 64  # D, decoder width
    encoder_layers: int = 2
    qformer_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 0  # filled from the vocabulary when 0
    max_caption_len: int = 48  # caption tokens including EOS
    max_instruction_len: int = 12
    num_experts: int = 3  # N
    prompt_len: int = 4  # K
    router_dim: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0
    ln_eps: float = 1e-5

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def max_positions(self) -> int:
        return self.num_queries + max(self.prompt_len, self.max_instruction_len) + 1 + self.max_caption_len

    @property
    def roles(self) -> tuple:
        return EXPERT_ROLES[self.num_experts]

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "vocab_size":
                continue
            if value <= 0:
                raise ConfigError(f"model.{f.name} must be > 0, got {value}")
        if self.vocab_size <= 4:
            raise ConfigError(f"model.vocab_size must cover the special tokens, got {self.vocab_size}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        for name in ("channels", "query_dim", "embed_dim"):
            if getattr(self, name) % self.num_heads:
                raise ConfigError(f"model.{name}={getattr(self, name)} is not divisible by num_heads={self.num_heads}")
        if self.num_experts not in EXPERT_ROLES:
            raise ConfigError(f"num_experts must be in 1..4, got {self.num_experts}")


MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "tiny": dict(
        channels=16,
        query_dim=16,
        num_queries=4,
        embed_dim=16,
        encoder_layers=1,
        qformer_layers=1,
        decoder_layers=1,
        num_heads=2,
        ffn_mult=2,
        prompt_len=2,
        router_dim=8,
        lora_rank=2,
        lora_alpha=4.0,
    ),
}

# Stand-ins for the lightweight / mid / large expert LLMs.
DECODER_PRESETS: Dict[str, int] = {"small": 1, "base": 2, "large": 3}


def model_preset(name: str, **overrides: Any) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    return ModelConfig(**{**MODEL_PRESETS[name], **overrides})


def decoder_preset(model: ModelConfig, name: str) -> ModelConfig:
    if name not in DECODER_PRESETS:
        raise ConfigError(f"unknown decoder preset {name!r}; choose from {sorted(DECODER_PRESETS)}")
    return replace(model, decoder_layers=DECODER_PRESETS[name])


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_path: Optional[str] = None
    data_seed: int = 0
    train_size: int = 500
    test_size: int = 100
    strategy: str = "two-stage"  # "two-stage" or "one-stage"
    use_router: bool = True
    router_mode: str = "per_expert"  # "per_expert" or "joint"
    use_lora: bool = True
    epochs: int = 5
    warmup_epochs: int = 1
    pretrain_epochs: int = 3
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    pretrain_lr: float = 1e-3
    batch_size: int = 8
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # 0 disables clipping
    instruction: str = INSTRUCTIONS[0]
    out_dir: Optional[str] = None
    progress: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.strategy not in ("two-stage", "one-stage"):
            raise ConfigError(f"strategy must be two-stage or one-stage, got {self.strategy!r}")
        if self.router_mode not in ("per_expert", "joint"):
            raise ConfigError(f"router_mode must be per_expert or joint, got {self.router_mode!r}")
        for name in ("epochs", "batch_size", "train_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("warmup_epochs", "pretrain_epochs", "test_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 <= min_lr <= base_lr, got {self.min_lr} / {self.base_lr}")
        if self.model.vocab_size:
            self.model.validate()


# --------------------------------------------------------------------------- file format


def _coerce(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], key)
    try:
        if hint is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {hint.__name__}") from e
    return raw


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """
    Returns a copy of cfg with flat overrides applied; `model.<field>` keys
    reach into the model config. String values are parsed per field type.
    """
    run_hints = typing.get_type_hints(RunConfig)
    model_hints = typing.get_type_hints(ModelConfig)
    run_updates: Dict[str, Any] = {}
    model_updates: Dict[str, Any] = {}
    for key, value in overrides.items():
        if key.startswith("model."):
            name = key[len("model.") :]
            if name not in model_hints:
                raise ConfigError(f"unknown config key: {key!r}")
            model_updates[name] = _coerce(value, model_hints[name], key) if isinstance(value, str) else value
        elif key == "model_preset":
            base = asdict(model_preset(str(value)))
            model_updates = {**base, **model_updates}
        else:
            if key not in run_hints or key == "model":
                raise ConfigError(f"unknown config key: {key!r}")
            run_updates[key] = _coerce(value, run_hints[key], key) if isinstance(value, str) else value
    model = replace(cfg.model, **model_updates) if model_updates else cfg.model
    return replace(cfg, model=model, **run_updates)


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path, base: Optional[RunConfig] = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    cfg = apply_overrides(base or RunConfig(), parse_config_text(p.read_text(encoding="utf-8")))
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = ["# rsmoe run configuration"]
    for f in fields(cfg):
        if f.name == "model":
            continue
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    for f in fields(cfg.model):
        lines.append(f"model.{f.name} = {_format(getattr(cfg.model, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump_config(cfg), encoding="utf-8")
    return p
