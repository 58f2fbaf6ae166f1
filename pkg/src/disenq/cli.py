"""Command-line surface.

Subcommands:
    generate  --config C --out DIR [--force]
    train     --config C --data DIR --out DIR [--resume CKPT] [--plots]
    evaluate  --ckpt F --data DIR --protocols LIST [--out DIR] [--plots]
    diagnose  --ckpt F --data DIR [--out FILE]

DISENQ_OUTPUT_ROOT provides a default output root when --out is omitted.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import diagnostics
from .checkpoint import load_checkpoint
from .config import RunConfig
from .manifest import ingest_manifest, write_dataset
from .model import DisenQModel
from .qformer import DisenQConfig
from .retrieval import evaluate_protocol
from .train import CHECKPOINT_NAME, Trainer
from .world import Protocol, generate_dataset, split_protocol

logger = logging.getLogger("disenq")

OUTPUT_ROOT_ENV = "DISENQ_OUTPUT_ROOT"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the CLI contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _default_out(args, leaf: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root is None:
        raise ValueError(
            f"--out is required (or set {OUTPUT_ROOT_ENV} for a default root)")
    return Path(root) / leaf


def _load_model_from_checkpoint(path, dataset):
    data = load_checkpoint(path)
    config = RunConfig.from_dict(data.config)
    model = DisenQModel(config.disenq, dataset.num_identities, dataset.num_actions,
                        frames_per_clip=config.world.frames_per_clip)
    model.load_parameter_arrays(data.model_state)
    return model, config, data


def cmd_generate(args) -> int:
    config = RunConfig.load(args.config)
    out_dir = _default_out(args, "dataset")
    dataset = generate_dataset(config.world)
    write_dataset(dataset, out_dir, force=args.force)
    counts = {
        "clips": len(dataset),
        "identities": dataset.num_identities,
        "actions": dataset.num_actions,
        "clothing": dataset.num_clothing,
        "views": dataset.num_views,
        "with_texts": dataset.has_texts,
    }
    print(f"wrote {out_dir}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    out_dir = _default_out(args, "run")
    dataset = ingest_manifest(args.data)
    if not dataset.has_texts:
        raise ValueError("training requires a dataset with text embeddings")
    split = split_protocol(dataset, Protocol("same"), split_seed=config.split_seed)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, dataset,
                                          train_indices=split.train_indices,
                                          out_dir=out_dir, config=config)
    else:
        trainer = Trainer(config, dataset, train_indices=split.train_indices,
                          out_dir=out_dir)
    config.save(out_dir / "config.json")
    trainer.run()
    if not trainer.checkpoint_path.exists():  # epochs=0 edge: still emit one
        trainer.save()
    if args.plots:
        from .plots import plot_losses
        plot_losses(trainer.history, out_dir / "loss_curves.png")
    print(f"trained {trainer.epoch} epochs; checkpoint: {trainer.checkpoint_path}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = ingest_manifest(args.data)
    model, config, _ = _load_model_from_checkpoint(args.ckpt, dataset)
    out_dir = _default_out(args, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = (list(config.protocols) if args.protocols in (None, "all")
             else [p.strip() for p in args.protocols.split(",") if p.strip()])
    wrote = []
    for name in names:
        protocol = Protocol.parse(name)
        try:
            split = split_protocol(dataset, protocol, split_seed=config.split_seed)
        except ValueError as exc:
            logger.warning("protocol %s infeasible on this dataset, skipped: %s",
                           protocol.name, exc)
            continue
        modes = ["adaptive", "fixed"] if config.adaptive_fusion else ["fixed"]
        if "biometrics" not in config.disenq.streams or "motion" not in config.disenq.streams:
            modes = [config.disenq.streams[0]]
        for mode in modes:
            report = evaluate_protocol(model, dataset, split, mode=mode)
            stem = protocol.name.replace("/", "__")
            path = report.save(out_dir / f"report_{stem}__{mode}.json")
            wrote.append(path)
            print(f"{protocol.name} [{mode}]: rank1={report.rank_k[1]:.6g} "
                  f"mAP={report.mean_ap:.6g} probes={report.num_probes} "
                  f"skipped={report.num_skipped}")
            if args.plots:
                from .plots import plot_cmc
                plot_cmc(report.to_dict(), out_dir / f"cmc_{stem}__{mode}.png")
    if not wrote:
        raise ValueError("no protocol was feasible on this dataset")
    return 0


def cmd_diagnose(args) -> int:
    dataset = ingest_manifest(args.data)
    model, config, _ = _load_model_from_checkpoint(args.ckpt, dataset)
    report = diagnostics.run_diagnostics(model, dataset, seed=config.seed)
    if args.out is not None:
        out_path = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out_path = Path(root) / "diagnostics.json" if root else None
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n")
        print(f"wrote {out_path}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="disenq",
                     description="Disentangled activity-biometrics harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--plots", action="store_true", help="emit loss-curve image")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint under protocols")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocols", default="all",
                   help="comma-separated protocol names, or 'all'")
    p.add_argument("--out", default=None)
    p.add_argument("--plots", action="store_true", help="emit CMC curve images")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="run disentanglement diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit code 2
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
