from __future__ import annotations

import base64
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DataError, InputError
from .recording import read_records, write_records
from .scenes import CaptionBundle, Relation, Scene, SceneGraph, SceneImage, SceneObject, make_scene
from .tensor import DTYPE
from .vocab import BOS, EOS, PAD, Vocab

DATASET_SCHEMA = "rsmoe.dataset.v1"


@dataclass
class Sample:
    index: int
    graph: SceneGraph
    image: SceneImage
    captions: CaptionBundle


def make_samples(seed: int, n: int, *, start: int = 0) -> List[Sample]:
    out = []
    for i in range(start, start + n):
        scene = make_scene(seed, i)
        out.append(Sample(index=i, graph=scene.graph, image=scene.image, captions=scene.captions))
    return out


def train_test_split(seed: int, train_size: int, test_size: int) -> Tuple[List[Sample], List[Sample]]:
    return make_samples(seed, train_size), make_samples(seed, test_size, start=train_size)


# --------------------------------------------------------------------------- file format


def _objects_field(g: SceneGraph) -> str:
    return ";".join(f"{o.cls}:{o.color}:{o.count}:{o.cell[0]}:{o.cell[1]}" for o in g.objects)


def _relations_field(g: SceneGraph) -> str:
    return ";".join(f"{r.subject}:{r.object}:{r.kind}" for r in g.relations)


def _parse_objects(text: str) -> List[SceneObject]:
    objs = []
    for part in filter(None, text.split(";")):
        cls, color, count, row, col = part.split(":")
        objs.append(SceneObject(cls=cls, color=color, count=int(count), cell=(int(row), int(col))))
    return objs


def _parse_relations(text: str) -> List[Relation]:
    rels = []
    for part in filter(None, text.split(";")):
        s, o, kind = part.split(":")
        rels.append(Relation(subject=int(s), object=int(o), kind=kind))
    return rels


def save_dataset(path: str | Path, samples: Sequence[Sample], *, seed: int) -> Path:
    records = (
        {
            "id": s.index,
            "image": base64.b64encode(s.image.to_bytes()).decode("ascii"),
            "theme": s.graph.theme,
            "objects": _objects_field(s.graph),
            "relations": _relations_field(s.graph),
            "theme_sentence": s.captions.theme_sentence,
            "object_sentence": s.captions.object_sentence,
            "relation_sentence": s.captions.relation_sentence,
            "position_sentence": s.captions.position_sentence,
        }
        for s in samples
    )
    header = {"schema": DATASET_SCHEMA, "seed": seed, "n": len(samples)}
    return write_records(path, header, records)


def load_dataset(path: str | Path) -> Tuple[Dict[str, str], List[Sample]]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    header, records = read_records(p, schema=DATASET_SCHEMA)
    samples = []
    try:
        for r in records:
            graph = SceneGraph(
                theme=r["theme"], objects=_parse_objects(r["objects"]), relations=_parse_relations(r["relations"])
            )
            samples.append(
                Sample(
                    index=int(r["id"]),
                    graph=graph,
                    image=SceneImage.from_bytes(base64.b64decode(r["image"])),
                    captions=CaptionBundle(
                        theme_sentence=r["theme_sentence"],
                        object_sentence=r["object_sentence"],
                        relation_sentence=r["relation_sentence"],
                        position_sentence=r.get("position_sentence", ""),
                    ),
                )
            )
    except (KeyError, ValueError) as e:
        raise DataError(f"{p}: malformed dataset record ({e})") from e
    if "n" in header and int(header["n"]) != len(samples):
        raise DataError(f"{p}: header announces {header['n']} records, found {len(samples)}")
    return header, samples


# --------------------------------------------------------------------------- batching


@dataclass
class Batch:
    samples: List[Sample]
    images: torch.Tensor  # [B, H, W, 3]
    instr_ids: torch.Tensor  # [B, Ti] long, PAD padded
    instr_mask: torch.Tensor  # [B, Ti] bool, True on real tokens
    targets: Dict[str, torch.Tensor]  # role -> [B, Tc] caption ids + EOS, PAD padded

    def __len__(self) -> int:
        return len(self.samples)


def image_tensor(images: Sequence[SceneImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([img.pixels for img in images])).to(DTYPE)


def pad_ids(rows: Sequence[Sequence[int]], length: Optional[int] = None) -> torch.Tensor:
    width = max([len(r) for r in rows] + [length or 0, 1])
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        if r:
            out[i, : len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    return out


def encode_instructions(vocab: Vocab, instructions: Sequence[str], max_len: int) -> Tuple[torch.Tensor, torch.Tensor]:
    rows = [vocab.encode(text) for text in instructions]
    for text, r in zip(instructions, rows):
        if len(r) > max_len:
            raise InputError(f"instruction has {len(r)} tokens, limit is {max_len}: {text!r}")
    ids = pad_ids(rows)
    return ids, ids != PAD


def encode_targets(vocab: Vocab, texts: Sequence[str], max_len: int) -> torch.Tensor:
    rows = []
    for text in texts:
        ids = vocab.encode(text) + [EOS]
        if len(ids) > max_len:
            raise InputError(f"caption has {len(ids)} tokens with EOS, limit is {max_len}")
        rows.append(ids)
    return pad_ids(rows)


def collate(
    samples: Sequence[Sample],
    vocab: Vocab,
    *,
    instruction: str,
    roles: Sequence[str],
    max_caption_len: int,
    max_instruction_len: int,
) -> Batch:
    instr_ids, instr_mask = encode_instructions(vocab, [instruction] * len(samples), max_instruction_len)
    targets = {role: encode_targets(vocab, [s.captions.aspect(role) for s in samples], max_caption_len) for role in roles}
    return Batch(
        samples=list(samples),
        images=image_tensor([s.image for s in samples]),
        instr_ids=instr_ids,
        instr_mask=instr_mask,
        targets=targets,
    )


def iter_batches(
    samples: Sequence[Sample], batch_size: int, *, generator: Optional[torch.Generator] = None
) -> Iterator[List[Sample]]:
    """Shuffled when a generator is given, in order otherwise."""
    order = torch.randperm(len(samples), generator=generator).tolist() if generator is not None else range(len(samples))
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i : i + batch_size]]


def teacher_inputs(targets: torch.Tensor) -> torch.Tensor:
    """[c1..cn, EOS, PAD..] -> [BOS, c1..cn, EOS, ..] for teacher forcing."""
    bos = torch.full((targets.shape[0], 1), BOS, dtype=torch.long)
    return torch.cat([bos, targets[:, :-1]], dim=1)
