"""``hcl`` command-line interface."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from ..data import save_corpus
from ..evalbench import contrastive_test, dim_sweep, iou_binned_accuracy
from .config import ConfigError, TrainConfig, load_config
from .formats import FormatError, load_checkpoint, save_checkpoint
from .train import (
    IncompatibleCheckpoint,
    MetricsLog,
    checkpoint_encoder,
    export_embeddings,
    load_dataset,
    train_stage1,
    train_stage2,
)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcl", description="Two-stage contrastive pre-training and offline evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus file")
    _common(p)

    p = sub.add_parser("pretrain-stage1", help="semantic-only warm-up training")
    _common(p)
    p.add_argument("--resume", help="stage-1 checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")

    p = sub.add_parser("pretrain-stage2", help="full two-branch training from a stage-1 checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True, help="stage-1 (or partial stage-2) checkpoint")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")

    for name, text in (
        ("eval-contrastive", "top-1 instance-discrimination accuracy"),
        ("analyze-iou", "accuracy binned by view IoU"),
        ("dim-sweep", "accuracy of PCA-compressed features"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--branch", choices=("semantic", "spatial", "concat"), help="defaults to eval_branch")

    p = sub.add_parser("export-embeddings", help="write un-augmented embeddings of every record")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--branch", choices=("semantic", "spatial", "concat"), help="defaults to eval_branch")
    return parser


def _config(args) -> TrainConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    return load_config(args.config, overrides)


def _write_json(path: Path, payload) -> None:
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _train(args, cfg: TrainConfig, out: Path) -> Path:
    dataset = load_dataset(cfg)
    stage = 1 if args.command == "pretrain-stage1" else 2
    metrics_path = out / f"metrics_stage{stage}.jsonl"
    source = args.resume if stage == 1 else args.ckpt
    start = load_checkpoint(source) if source else None
    resuming = start is not None and start.stage == stage
    with open(metrics_path, "a" if resuming else "w", encoding="utf-8") as stream:
        log = MetricsLog(stream)
        if stage == 1:
            ckpt = train_stage1(cfg, dataset, resume=start, metrics=log, stop_after=args.max_steps)
        else:
            ckpt = train_stage2(cfg, start, dataset, metrics=log, stop_after=args.max_steps)
    path = out / f"stage{stage}.ckpt"
    save_checkpoint(ckpt, path)
    (out / "config.txt").write_text(cfg.to_text())
    meta = {"stage": stage, "step": ckpt.step, "checkpoint": path.name, "metrics": metrics_path.name, **ckpt.rng_state}
    _write_json(out / f"run_stage{stage}.json", meta)
    return path


def _evaluate(args, cfg: TrainConfig, out: Path) -> Path:
    branch = args.branch or cfg.eval_branch
    if args.command == "dim-sweep":
        branch = "concat" if cfg.sweep_mode == "hcl-half-half" else "semantic"
    ckpt = load_checkpoint(args.ckpt)
    encoder = checkpoint_encoder(ckpt, cfg, branch)
    dataset = load_dataset(cfg)
    aug = cfg.aug_config()
    echo = {"checkpoint": str(args.ckpt), "branch": branch, "encoder_checksum": encoder.checksum()}
    if args.command == "eval-contrastive":
        res = contrastive_test(encoder, dataset, cfg.eval_gallery, aug, seed=cfg.eval_seed)
        path = out / "contrastive.json"
        report = {
            "kind": "contrastive",
            "accuracy": res.accuracy,
            "queries": res.total,
            "seed": cfg.eval_seed,
            "config": {"gallery_capacity": cfg.eval_gallery, **echo},
        }
        _write_json(path, report)
    elif args.command == "analyze-iou":
        report = iou_binned_accuracy(encoder, dataset, cfg.eval_gallery, cfg.iou_bins, aug, seed=cfg.eval_seed)
        report.config.update(echo)
        report.config["spearman"] = report.spearman()
        path = out / "iou_bins.json"
        _write_json(path, report.to_json() + "\n")
    else:
        report = dim_sweep(
            encoder, dataset, cfg.sweep_dims, cfg.sweep_mode, cfg.eval_gallery, aug,
            seed=cfg.eval_seed, renormalize=cfg.renormalize,
        )
        report.config.update(echo)
        path = out / f"dim_sweep_{cfg.sweep_mode}.json"
        _write_json(path, report.to_json() + "\n")
    return path


def _export(args, cfg: TrainConfig, out: Path) -> Path:
    branch = args.branch or cfg.eval_branch
    path = out / f"embeddings_{branch}.hemb"
    export_embeddings(load_checkpoint(args.ckpt), load_dataset(cfg), path, branch, cfg)
    return path


def _gen_data(args, cfg: TrainConfig, out: Path) -> Path:
    if cfg.data_source != "synthetic":
        raise ConfigError("gen-data only writes synthetic corpora (data_source = synthetic)")
    path = out / "corpus.bin"
    save_corpus(load_dataset(cfg), path)
    return path


_HANDLERS = {
    "gen-data": _gen_data,
    "pretrain-stage1": _train,
    "pretrain-stage2": _train,
    "eval-contrastive": _evaluate,
    "analyze-iou": _evaluate,
    "dim-sweep": _evaluate,
    "export-embeddings": _export,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        out = Path(args.out)
        os.makedirs(out, exist_ok=True)
        path = _HANDLERS[args.command](args, cfg, out)
    except (ConfigError, FormatError, IncompatibleCheckpoint, OSError, ValueError) as exc:
        print(f"hcl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
