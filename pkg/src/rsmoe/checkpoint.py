"""
Self-contained binary checkpoint.

Layout (little-endian):
  magic        8 bytes  b"RSMOECKP"
  version      uint32
  manifest_len uint64
  manifest     UTF-8 JSON, sorted keys
  payload      float64 values of every tensor, in manifest order
  checksum     sha256 of everything above (32 bytes)

The manifest lists every tensor once with its shape and byte offset into the
payload, plus stage tag, model config, vocabulary, role labels, adapter state,
trainable flags, RNG state and the run configuration echo.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .decoder import CaptionModel
from .errors import ChecksumError, CheckpointError, IntegrityError
from .lora import adapters, apply_lora_sites
from .moe import MoeModel
from .tensor import DTYPE
from .vocab import Vocab

MAGIC = b"RSMOECKP"
FORMAT_VERSION = 1
STAGES = ("I", "II", "onestage")
_HEADER = struct.Struct("<8sIQ")
_CHECKSUM_LEN = 32

Model = Union[CaptionModel, MoeModel]


@dataclass
class Checkpoint:
    stage: str
    model_config: ModelConfig
    vocab: Vocab
    roles: Tuple[str, ...]
    tensors: Dict[str, torch.Tensor]
    trainable: List[str] = field(default_factory=list)
    merged: bool = False
    adapted_sites: List[str] = field(default_factory=list)
    use_router: bool = False
    rng_state: Optional[str] = None
    run_config: str = ""
    version: int = FORMAT_VERSION

    @property
    def kind(self) -> str:
        return "caption" if self.stage == "I" else "moe"


def checkpoint_from_model(
    model: Model,
    *,
    stage: str,
    vocab: Vocab,
    merged: bool = False,
    generator: Optional[torch.Generator] = None,
    run_config: str = "",
) -> Checkpoint:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}; expected one of {STAGES}")
    roles = model.roles if isinstance(model, MoeModel) else ("caption",)
    return Checkpoint(
        stage=stage,
        model_config=model.cfg,
        vocab=vocab,
        roles=tuple(roles),
        tensors={k: v.detach().clone() for k, v in model.state_dict().items()},
        trainable=sorted(name for name, p in model.named_parameters() if p.requires_grad),
        merged=merged,
        adapted_sites=sorted(name for name, _ in adapters(model)),
        use_router=isinstance(model, MoeModel) and model.router is not None,
        rng_state=base64.b64encode(generator.get_state().numpy().tobytes()).decode("ascii") if generator else None,
        run_config=run_config,
    )


def _manifest(ckpt: Checkpoint) -> Tuple[dict, List[Tuple[str, np.ndarray]]]:
    arrays = []
    entries = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name].detach().to(DTYPE).contiguous().cpu().numpy().astype("<f8", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append((name, arr))
        offset += arr.size * 8
    manifest = {
        "stage": ckpt.stage,
        "model_config": asdict(ckpt.model_config),
        "vocab": list(ckpt.vocab.tokens),
        "roles": list(ckpt.roles),
        "merged": ckpt.merged,
        "adapted_sites": list(ckpt.adapted_sites),
        "use_router": ckpt.use_router,
        "trainable": list(ckpt.trainable),
        "rng_state": ckpt.rng_state,
        "run_config": ckpt.run_config,
        "tensors": entries,
    }
    return manifest, arrays


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, arrays = _manifest(ckpt)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, ckpt.version, len(blob)) + blob + b"".join(a.tobytes() for _, a in arrays)
    return body + hashlib.sha256(body).digest()


def save(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(to_bytes(ckpt))
    return p


def from_bytes(data: bytes, *, source: str = "checkpoint") -> Checkpoint:
    if len(data) < _HEADER.size:
        raise IntegrityError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, manifest_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"{source}: not an rsmoe checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    start = _HEADER.size
    if start + manifest_len + _CHECKSUM_LEN > len(data):
        raise IntegrityError(f"{source}: truncated manifest (declares {manifest_len} bytes)")
    try:
        manifest = json.loads(data[start : start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{source}: unreadable manifest ({e})") from e

    payload = data[start + manifest_len : len(data) - _CHECKSUM_LEN]
    tensors: Dict[str, torch.Tensor] = {}
    expected = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["offset"] != expected:
            raise IntegrityError(f"{source}: tensor {entry['name']} at offset {entry['offset']}, expected {expected}")
        end = expected + count * 8
        if end > len(payload):
            raise IntegrityError(f"{source}: truncated payload at tensor {entry['name']}")
        if entry["name"] in tensors:
            raise IntegrityError(f"{source}: tensor {entry['name']} listed twice")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=expected).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
        expected = end
    if expected != len(payload):
        raise IntegrityError(f"{source}: payload has {len(payload) - expected} unexpected trailing bytes")

    ckpt = Checkpoint(
        stage=manifest["stage"],
        model_config=ModelConfig(**manifest["model_config"]),
        vocab=Vocab(tokens=tuple(manifest["vocab"])),
        roles=tuple(manifest["roles"]),
        tensors=tensors,
        trainable=list(manifest["trainable"]),
        merged=bool(manifest["merged"]),
        adapted_sites=list(manifest["adapted_sites"]),
        use_router=bool(manifest["use_router"]),
        rng_state=manifest.get("rng_state"),
        run_config=manifest.get("run_config", ""),
        version=version,
    )
    stored = data[len(data) - _CHECKSUM_LEN :]
    if hashlib.sha256(data[: len(data) - _CHECKSUM_LEN]).digest() != stored:
        raise ChecksumError(f"{source}: checksum mismatch, file is corrupted", checkpoint=ckpt)
    return ckpt


def load(path: Union[str, Path]) -> Checkpoint:
    p = Path(path)
    return from_bytes(p.read_bytes(), source=str(p))


def restore_generator(ckpt: Checkpoint) -> Optional[torch.Generator]:
    if ckpt.rng_state is None:
        return None
    g = torch.Generator()
    g.set_state(torch.frombuffer(bytearray(base64.b64decode(ckpt.rng_state)), dtype=torch.uint8))
    return g


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuilds the module tree the checkpoint was taken from and loads its tensors."""
    cfg = ckpt.model_config
    scratch = torch.Generator().manual_seed(0)
    if ckpt.kind == "caption":
        model: nn.Module = CaptionModel(cfg, generator=scratch)
    else:
        model = MoeModel.build(cfg, use_router=ckpt.use_router, generator=scratch)
        if tuple(model.roles) != ckpt.roles:
            raise CheckpointError(f"checkpoint roles {ckpt.roles} do not match {model.roles} for N={cfg.num_experts}")
    if ckpt.adapted_sites:
        apply_lora_sites(model, ckpt.adapted_sites, rank=cfg.lora_rank, alpha=cfg.lora_alpha, generator=scratch)
    missing = set(model.state_dict()) ^ set(ckpt.tensors)
    if missing:
        raise CheckpointError(f"checkpoint tensors do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict(ckpt.tensors, strict=True)
    trainable = set(ckpt.trainable)
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    return model
