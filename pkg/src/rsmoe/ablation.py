"""
Ablation grid: expert count x router on/off x training strategy (x decoder
size) over several seeds, run on a thread pool, plus the directional summary
comparing the cells.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from .checkpoint import Checkpoint
from .config import RunConfig, decoder_preset
from .dataset import Sample
from .errors import ConfigError
from .recording import read_records, write_records
from .training import evaluate, load_samples, run_onestage, run_stage1, run_stage2

logger = logging.getLogger(__name__)

ABLATION_SCHEMA = "rsmoe.ablation.v1"
FINDINGS_SCHEMA = "rsmoe.findings.v1"
BASE_DECODER = "config"  # decoder depth as given in the run config


@dataclass(frozen=True)
class AblationCell:
    seed: int
    num_experts: int
    use_router: bool
    strategy: str
    decoder: str = BASE_DECODER

    @property
    def cell_id(self) -> str:
        router = "router" if self.use_router else "norouter"
        return f"{self.strategy}/N{self.num_experts}/{router}/{self.decoder}/seed{self.seed}"


def ablation_threads() -> int:
    raw = os.environ.get("RSMOE_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"RSMOE_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError(f"RSMOE_THREADS must be >= 1, got {n}")
    return n


def grid(
    seeds: Sequence[int],
    *,
    experts: Sequence[int] = (1, 2, 3, 4),
    routers: Sequence[bool] = (True, False),
    strategies: Sequence[str] = ("two-stage", "one-stage"),
    decoders: Optional[Sequence[str]] = None,
) -> List[AblationCell]:
    return [
        AblationCell(seed=s, num_experts=n, use_router=r, strategy=st, decoder=d)
        for d in (decoders or (BASE_DECODER,))
        for s in seeds
        for st in strategies
        for n in experts
        for r in routers
    ]


def cell_config(base: RunConfig, seed: int, decoder: str, **updates) -> RunConfig:
    model = base.model if decoder == BASE_DECODER else decoder_preset(base.model, decoder)
    return replace(base, seed=seed, model=model, **updates)


def _run_cell(
    base: RunConfig,
    cell: AblationCell,
    train: Sequence[Sample],
    test: Sequence[Sample],
    stage1: Optional[Checkpoint],
) -> Dict[str, object]:
    started = time.perf_counter()
    cfg = cell_config(
        base,
        cell.seed,
        cell.decoder,
        strategy=cell.strategy,
        use_router=cell.use_router,
        progress=False,
    )
    cfg = replace(cfg, model=replace(cfg.model, num_experts=cell.num_experts))
    if cell.strategy == "two-stage":
        result = run_stage2(cfg, stage1, samples=train)
    else:
        result = run_onestage(cfg, samples=train)
    ev = evaluate(result.model, test, result.checkpoint.vocab, cfg)
    row: Dict[str, object] = {
        "seed": cell.seed,
        "num_experts": cell.num_experts,
        "use_router": cell.use_router,
        "strategy": cell.strategy,
        "decoder": cell.decoder,
    }
    row.update(ev.metrics.as_record())
    row.update(ev.semantic.as_record())
    row["seconds"] = round(time.perf_counter() - started, 3)
    logger.info("%s: BLEU-1 %.2f CIDEr %.2f", cell.cell_id, ev.metrics.bleu1, ev.metrics.cider)
    return row


def run_ablation_suite(
    base: RunConfig,
    seeds: Sequence[int],
    *,
    experts: Sequence[int] = (1, 2, 3, 4),
    routers: Sequence[bool] = (True, False),
    strategies: Sequence[str] = ("two-stage", "one-stage"),
    decoders: Optional[Sequence[str]] = None,
    threads: Optional[int] = None,
    out_dir: Optional[str | Path] = None,
) -> List[Dict[str, object]]:
    """
    One row per cell per seed, in grid order. Stage I runs once per
    (seed, decoder) and is shared by the two-stage cells that need it.
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    base.validate()
    cells = grid(seeds, experts=experts, routers=routers, strategies=strategies, decoders=decoders)
    train, test = load_samples(base)
    workers = threads or ablation_threads()
    logger.info("ablation: %d cells on %d threads (%d train / %d test)", len(cells), workers, len(train), len(test))

    stage1_keys = sorted({(c.seed, c.decoder) for c in cells if c.strategy == "two-stage"})
    stage1: Dict[Tuple[int, str], Checkpoint] = {}
    rows: Dict[AblationCell, Dict[str, object]] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(run_stage1, cell_config(base, seed, decoder, progress=False), samples=train): (seed, decoder)
            for seed, decoder in stage1_keys
        }
        for fut in as_completed(futures):
            stage1[futures[fut]] = fut.result().checkpoint

        cell_futures = {
            pool.submit(_run_cell, base, c, train, test, stage1.get((c.seed, c.decoder))): c for c in cells
        }
        bar = tqdm(as_completed(cell_futures), total=len(cells), desc="ablation", disable=None if base.progress else True)
        for fut in bar:
            rows[cell_futures[fut]] = fut.result()

    ordered = [rows[c] for c in cells]
    if out_dir is not None:
        out = Path(out_dir)
        write_report(out / "ablation.tsv", ordered, seeds=",".join(str(s) for s in seeds))
        write_findings(out / "findings.tsv", directional_findings(ordered))
    return ordered


# --------------------------------------------------------------------------- report


def write_report(path: str | Path, rows: Sequence[Dict[str, object]], **header: object) -> Path:
    return write_records(path, {"schema": ABLATION_SCHEMA, "rows": len(rows), **header}, rows)


def _parse_value(key: str, raw: str) -> object:
    if key in ("seed", "num_experts"):
        return int(raw)
    if key == "use_router":
        return raw == "True"
    if key in ("strategy", "decoder"):
        return raw
    return float(raw)


def read_report(path: str | Path) -> List[Dict[str, object]]:
    _, records = read_records(path, schema=ABLATION_SCHEMA)
    return [{k: _parse_value(k, v) for k, v in r.items()} for r in records]


# --------------------------------------------------------------------------- findings


@dataclass(frozen=True)
class Finding:
    name: str
    metric: str
    decoder: str
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    seeds: int
    margin_rule: str  # "std": margin must exceed both seed std devs; "nonneg": margin >= 0

    @property
    def margin(self) -> float:
        return self.mean_a - self.mean_b

    @property
    def holds(self) -> bool:
        if self.margin_rule == "std":
            return self.margin > max(self.std_a, self.std_b)
        return self.margin >= 0.0

    def as_record(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "metric": self.metric,
            "decoder": self.decoder,
            "mean_a": round(self.mean_a, 6),
            "std_a": round(self.std_a, 6),
            "mean_b": round(self.mean_b, 6),
            "std_b": round(self.std_b, 6),
            "margin": round(self.margin, 6),
            "seeds": self.seeds,
            "holds": self.holds,
        }


def _stats(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def _select(rows: Sequence[Dict[str, object]], metric: str, **where: object) -> List[float]:
    return [float(r[metric]) for r in rows if all(r.get(k) == v for k, v in where.items())]


# (name, metric, side a, side b, margin rule)
_COMPARISONS = (
    (
        "router_on_vs_off",
        "bleu1",
        dict(strategy="two-stage", num_experts=3, use_router=True),
        dict(strategy="two-stage", num_experts=3, use_router=False),
        "std",
    ),
    (
        "experts_3_vs_1",
        "cider",
        dict(strategy="two-stage", num_experts=3, use_router=True),
        dict(strategy="two-stage", num_experts=1, use_router=True),
        "std",
    ),
    (
        "two_stage_vs_one_stage",
        "bleu1",
        dict(strategy="two-stage", num_experts=3, use_router=True),
        dict(strategy="one-stage", num_experts=3, use_router=True),
        "nonneg",
    ),
)


def directional_findings(rows: Sequence[Dict[str, object]]) -> List[Finding]:
    """Mean/std comparisons per decoder; a comparison is skipped when either side has no rows."""
    out: List[Finding] = []
    decoders = list(dict.fromkeys(str(r["decoder"]) for r in rows))
    for decoder in decoders:
        for name, metric, side_a, side_b, rule in _COMPARISONS:
            a = _select(rows, metric, decoder=decoder, **side_a)
            b = _select(rows, metric, decoder=decoder, **side_b)
            if not a or not b:
                continue
            (mean_a, std_a), (mean_b, std_b) = _stats(a), _stats(b)
            out.append(
                Finding(
                    name=name,
                    metric=metric,
                    decoder=decoder,
                    mean_a=mean_a,
                    std_a=std_a,
                    mean_b=mean_b,
                    std_b=std_b,
                    seeds=min(len(a), len(b)),
                    margin_rule=rule,
                )
            )
    return out


def write_findings(path: str | Path, findings: Sequence[Finding]) -> Path:
    return write_records(path, {"schema": FINDINGS_SCHEMA, "findings": len(findings)}, [f.as_record() for f in findings])


def format_findings(findings: Sequence[Finding]) -> str:
    lines = []
    for f in findings:
        verdict = "holds" if f.holds else "does not hold"
        lines.append(
            f"{f.name} [{f.decoder}] {f.metric}: {f.mean_a:.2f} +/- {f.std_a:.2f} vs "
            f"{f.mean_b:.2f} +/- {f.std_b:.2f} (margin {f.margin:+.2f}, {verdict})"
        )
    return "\n".join(lines)
