from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

from tqdm.auto import tqdm

from .ablation import directional_findings, format_findings, run_ablation_suite
from .checkpoint import Checkpoint, load, restore_model, save
from .config import RunConfig, apply_overrides, load_config, parse_config_text, save_config
from .dataset import Sample, load_dataset, make_samples, save_dataset
from .errors import ConfigError, DataError, NumericError, RsMoeError
from .gradcheck import pipeline_grad_check
from .metrics import corpus_from_files, evaluate_corpus, write_metric_report
from .recording import RunRecorder, write_records
from .training import caption_samples, evaluate, load_samples, run_onestage, run_stage1, run_stage2

logger = logging.getLogger("rsmoe")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"


class TqdmLoggingHandler(logging.Handler):
    def emit(self, record):
        msg = self.format(record)
        tqdm.write(msg, file=sys.stderr)


@contextmanager
def run_logging(out_dir: Optional[Path], verbose: bool = False) -> Iterator[None]:
    """Console handler, plus `run.log` when the run has an output directory."""
    root = logging.getLogger()
    level = logging.DEBUG if verbose else logging.INFO
    handlers: List[logging.Handler] = [TqdmLoggingHandler()]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8"))
    old_level = root.level
    root.setLevel(level)
    for h in handlers:
        h.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(h)
    try:
        yield
    finally:
        for h in handlers:
            root.removeHandler(h)
            h.close()
        root.setLevel(old_level)


def _parse_set(values: Optional[Sequence[str]]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in values or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _int_list(text: str) -> List[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="Seed every random draw of the run derives from.")
    p.add_argument("--config", type=str, default=None, help="Flat key = value config file.")
    p.add_argument("--set", action="append", default=None, metavar="KEY=VALUE", help="Override one config key; repeatable.")
    p.add_argument("--data", type=str, default=None, help="Dataset file written by `synth` (default: generate from data_seed).")
    p.add_argument("--epochs", type=int, default=None, help="Epochs per stage.")
    p.add_argument("--experts", type=int, default=None, help="Number of expert decoders (1-4).")
    p.add_argument("--router", action=argparse.BooleanOptionalAction, default=None, help="Instruction router on/off.")
    p.add_argument("--router-mode", choices=["per_expert", "joint"], default=None, help="Stage II router training mode.")
    p.add_argument("--lora", action=argparse.BooleanOptionalAction, default=None, help="LoRA adapters on/off.")
    p.add_argument("--progress", action="store_true", help="Show progress bars.")
    p.add_argument("--verbose", action="store_true", help="Debug logging.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsmoe", description="Desk-scale mixture-of-experts scene captioner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic scene dataset.")
    p.add_argument("--seed", type=int, default=0, help="Dataset seed.")
    p.add_argument("--n", type=int, default=500, help="Number of scenes.")
    p.add_argument("--out", type=str, required=True, help="Output directory (writes dataset.tsv).")

    p = sub.add_parser("train-stage1", help="Stage I: VLM encoder + one decoder.")
    _add_run_flags(p)
    p.add_argument("--out", type=str, required=True, help="Output directory.")

    p = sub.add_parser("train-stage2", help="Stage II: experts and router from a Stage I checkpoint.")
    _add_run_flags(p)
    p.add_argument("--ckpt", type=str, required=True, help="Stage I (or Stage II to resume) checkpoint.")
    p.add_argument("--out", type=str, required=True, help="Output directory.")

    p = sub.add_parser("train-onestage", help="One-stage baseline: everything trained together.")
    _add_run_flags(p)
    p.add_argument("--out", type=str, required=True, help="Output directory.")

    p = sub.add_parser("caption", help="Caption one scene with a trained checkpoint.")
    p.add_argument("--ckpt", type=str, required=True, help="Checkpoint file.")
    p.add_argument("--image-id", type=int, required=True, help="Scene index.")
    p.add_argument("--data", type=str, default=None, help="Dataset file (default: generate from the run's data_seed).")
    p.add_argument("--instruction", type=str, default=None, help="Instruction text.")

    p = sub.add_parser("eval", help="Score captions: hypothesis/reference files, or a checkpoint on the test split.")
    p.add_argument("--hyp", type=str, default=None, help="Hypothesis file, `<id>\\t<caption>` per line.")
    p.add_argument("--ref", type=str, default=None, help="Reference file, `<id>\\t<caption>` per line; ids may repeat.")
    p.add_argument("--ckpt", type=str, default=None, help="Checkpoint to evaluate on the test split.")
    p.add_argument("--data", type=str, default=None, help="Dataset file for --ckpt.")
    p.add_argument("--out", type=str, default=None, help="Output directory (writes metrics.tsv).")

    p = sub.add_parser("ablate", help="Ablation grid and directional summary.")
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="Number of seeds, counting up from --seed.")
    p.add_argument("--expert-counts", type=_int_list, default=[1, 2, 3, 4], help="Expert counts, e.g. 1,3.")
    p.add_argument(
        "--strategies",
        type=str,
        default="two-stage,one-stage",
        help="Comma-separated strategies (two-stage, one-stage).",
    )
    p.add_argument("--decoders", type=str, default=None, help="Comma-separated decoder presets (small, base, large).")
    p.add_argument("--threads", type=int, default=None, help="Worker threads (default: RSMOE_THREADS or core count).")
    p.add_argument("--out", type=str, default=None, help="Output directory (writes ablation.tsv, findings.tsv).")

    p = sub.add_parser("gradcheck", help="Finite-difference check of the Stage I graph at tiny size.")
    p.add_argument("--seed", type=int, default=0, help="First seed.")
    p.add_argument("--seeds", type=int, default=10, help="Number of seeds.")
    p.add_argument("--tolerance", type=float, default=1e-4, help="Largest accepted relative error.")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then --config, then flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides: Dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data_path"] = args.data
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "experts", None) is not None:
        overrides["model.num_experts"] = args.experts
    if getattr(args, "router", None) is not None:
        overrides["use_router"] = bool(args.router)
    if getattr(args, "router_mode", None):
        overrides["router_mode"] = args.router_mode
    if getattr(args, "lora", None) is not None:
        overrides["use_lora"] = bool(args.lora)
    if getattr(args, "progress", False):
        overrides["progress"] = True
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    overrides.update(_parse_set(getattr(args, "set", None)))
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    if not ckpt.run_config:
        return RunConfig()
    return apply_overrides(RunConfig(), parse_config_text(ckpt.run_config))


# --------------------------------------------------------------------------- commands


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    out = Path(args.out)
    path = save_dataset(out / "dataset.tsv", make_samples(args.seed, args.n), seed=args.seed)
    logger.info("wrote %d scenes to %s", args.n, path)
    print(f"Wrote {args.n} scenes: {path}")
    return 0


def _train(args: argparse.Namespace, runner) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    save_config(cfg, out / "config.txt")
    with RunRecorder(out / "train_log.tsv") as recorder:
        result = runner(cfg, recorder)
    name = {"I": "stage1.ckpt", "II": "stage2.ckpt", "onestage": "onestage.ckpt"}[result.checkpoint.stage]
    path = save(result.checkpoint, out / name)
    for role, losses in result.losses.items():
        if losses:
            logger.info("%s: loss %.6f -> %.6f over %d epochs", role, losses[0], losses[-1], len(losses))
    print(f"Checkpoint: {path}")
    return 0


def _cmd_train_stage1(args: argparse.Namespace) -> int:
    return _train(args, lambda cfg, rec: run_stage1(cfg, recorder=rec))


def _cmd_train_stage2(args: argparse.Namespace) -> int:
    stage1 = load(args.ckpt)
    return _train(args, lambda cfg, rec: run_stage2(cfg, stage1, recorder=rec))


def _cmd_train_onestage(args: argparse.Namespace) -> int:
    return _train(args, lambda cfg, rec: run_onestage(cfg, recorder=rec))


def _find_sample(cfg: RunConfig, data: Optional[str], image_id: int) -> Sample:
    if image_id < 0:
        raise DataError(f"image id must be >= 0, got {image_id}")
    if not data:
        return make_samples(cfg.data_seed, 1, start=image_id)[0]
    _, samples = load_dataset(data)
    for s in samples:
        if s.index == image_id:
            return s
    raise DataError(f"{data}: no scene with id {image_id}")


def _cmd_caption(args: argparse.Namespace) -> int:
    ckpt = load(args.ckpt)
    cfg = config_from_checkpoint(ckpt)
    if args.instruction:
        cfg = apply_overrides(cfg, {"instruction": args.instruction})
    model = restore_model(ckpt)
    sample = _find_sample(cfg, args.data, args.image_id)
    print(caption_samples(model, [sample], ckpt.vocab, cfg)[0])
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else None
    if args.hyp or args.ref:
        if not (args.hyp and args.ref):
            raise ConfigError("eval needs both --hyp and --ref")
        ids, corpus = corpus_from_files(args.hyp, args.ref)
        report = evaluate_corpus(corpus)
        header = {"hyp": args.hyp, "ref": args.ref, "images": len(ids)}
    elif args.ckpt:
        ckpt = load(args.ckpt)
        cfg = config_from_checkpoint(ckpt)
        if args.data:
            cfg = apply_overrides(cfg, {"data_path": args.data})
        _, test = load_samples(cfg)
        ev = evaluate(restore_model(ckpt), test, ckpt.vocab, cfg)
        report = ev.metrics
        header = {"ckpt": args.ckpt, "images": len(test), **ev.semantic.as_record()}
        if out is not None:
            write_records(
                out / "captions.tsv",
                {"schema": "rsmoe.captions.v1", "ckpt": args.ckpt},
                ({"id": s.index, "caption": c} for s, c in zip(test, ev.captions)),
            )
        for key, value in ev.semantic.as_record().items():
            print(f"{key}\t{value:.4f}")
    else:
        raise ConfigError("eval needs --hyp/--ref or --ckpt")
    for key, value in report.as_record().items():
        print(f"{key}\t{value:.2f}")
    if out is not None:
        write_metric_report(out / "metrics.tsv", report, **header)
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    out = Path(args.out) if args.out else None
    if out is not None:
        save_config(cfg, out / "config.txt")
    seeds = [cfg.seed + k for k in range(args.seeds)]
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    decoders = tuple(d.strip() for d in args.decoders.split(",") if d.strip()) if args.decoders else None
    rows = run_ablation_suite(
        cfg,
        seeds,
        experts=tuple(args.expert_counts),
        strategies=strategies,
        decoders=decoders,
        threads=args.threads,
        out_dir=out,
    )
    print(format_findings(directional_findings(rows)))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        err = pipeline_grad_check(seed)
        print(f"seed {seed}\t{err:.3e}")
        worst = max(worst, err)
    if worst >= args.tolerance:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} >= {args.tolerance:.1e}")
    print(f"max relative error {worst:.3e} < {args.tolerance:.1e}")
    return 0


COMMANDS = {
    "synth": _cmd_synth,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "train-onestage": _cmd_train_onestage,
    "caption": _cmd_caption,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    out = Path(args.out) if getattr(args, "out", None) else None
    with run_logging(out, verbose=getattr(args, "verbose", False)):
        try:
            return COMMANDS[args.command](args)
        except (RsMoeError, OSError) as e:
            logger.error("%s failed: %s", args.command, e)
            print(f"error: {e}", file=sys.stderr)
            return 1
        except Exception as e:
            logger.exception("%s failed with an unexpected error", args.command)
            print(f"error: unexpected {type(e).__name__}: {e}", file=sys.stderr)
            return 1


if __name__ == "__main__":
    raise SystemExit(main())
