"""Command-line entry point.

    ssmae pretrain --profile toy --out runs/toy
    ssmae finetune --checkpoint runs/toy/pretrain_last.pt --out runs/toy
    ssmae eval --checkpoint runs/toy/finetune_last.pt
    ssmae recon-grid --checkpoint runs/toy/pretrain_last.pt --out grid.png
    ssmae ablate --profile toy --out runs/ablate
    ssmae sweep-mask --profile toy --out runs/mask
    ssmae plot runs/toy/metrics_pretrain.jsonl --out runs/toy/figs

Results are printed to stdout as JSON.  Failures print one JSON line
``{"error": ..., "message": ...}`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

from .config import ConfigError, RunConfig, config_from_canonical, load_config
from .data import DatasetError
from .trainer import (
    CheckpointError,
    Trainer,
    TrainingAborted,
    evaluate,
    export_reconstructions,
    load_checkpoint,
    model_from_checkpoint,
    read_metrics,
)

log = logging.getLogger("ssmae")

EXIT_USAGE = 2
EXIT_FAILURE = 1

# ablation matrix: run name -> config overrides
ABLATIONS: Dict[str, Dict[str, str]] = {
    "full": {},
    "no_recon": {"ablate.recon_off": "true"},
    "no_consistency": {"ablate.consistency_off": "true"},
    "gate_from_epoch1": {"ablate.gate_off_from_epoch1": "true"},
    "gate_no_val_threshold": {"ablate.gate_no_val_threshold": "true"},
}
MASK_RATIOS = (0.25, 0.5, 0.6, 0.75, 0.9)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("UsageError", message, EXIT_USAGE)


def _fail(kind: str, message: str, code: int = EXIT_FAILURE):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _overrides(args) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    if getattr(args, "labeled_frac", None) is not None:
        pairs["split.labeled_fraction"] = str(args.labeled_frac)
    return pairs


def _config(args, extra: Optional[Dict[str, str]] = None) -> RunConfig:
    pairs = _overrides(args)
    pairs.update(extra or {})
    return load_config(args.config, args.profile, pairs)


def _resumed(args) -> Trainer:
    """Trainer restored from ``--resume``; the config comes from the checkpoint unless given."""
    explicit = args.config is not None or bool(_overrides(args))
    cfg = _config(args) if explicit else None
    return Trainer.from_checkpoint(args.resume, cfg=cfg, out_dir=args.out,
                                   allow_config_mismatch=args.allow_config_mismatch)


def _summary(trainer: Trainer) -> Dict:
    last = trainer.history[-1] if trainer.history else {}
    return {
        "stage": trainer.stage,
        "epoch": trainer.epoch,
        "config_hash": trainer.cfg.hash(),
        "val_acc": last.get("val_acc"),
        "test_acc": last.get("test_acc"),
        "out": str(trainer.out_dir) if trainer.out_dir else None,
    }


# -- subcommands ----------------------------------------------------------------

def cmd_pretrain(args) -> None:
    trainer = _resumed(args) if args.resume else Trainer(_config(args), out_dir=args.out)
    trainer.pretrain(stop_after=args.stop_after)
    _emit(_summary(trainer))


def cmd_finetune(args) -> None:
    source = args.resume or args.checkpoint
    if args.from_scratch == bool(source):
        raise ConfigError("finetune needs exactly one of --checkpoint/--resume or --from-scratch")
    if args.from_scratch:
        trainer = Trainer(_config(args), out_dir=args.out)
    else:
        args.resume = source
        trainer = _resumed(args)
    trainer.finetune(args.epochs)
    _emit(_summary(trainer))


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_canonical(ckpt["config"])
    trainer = Trainer(cfg)
    trainer.model.load_state_dict(ckpt["model"])
    sets = {
        "test": trainer.bundle.test,
        "val": trainer.val_set,
        "train": trainer.bundle.train,
        "labeled": trainer.bundle.train.subset(trainer.splits.labeled),
    }
    ds = sets[args.split]
    if ds is None:
        raise DatasetError(f"dataset has no {args.split} split")
    res = evaluate(trainer.model, ds, args.batch_size)
    _emit({"split": args.split, "checkpoint": str(args.checkpoint), **res})


def cmd_recon_grid(args) -> None:
    model = model_from_checkpoint(args.checkpoint)
    cfg = config_from_canonical(load_checkpoint(args.checkpoint)["config"])
    trainer_data = Trainer(cfg).bundle
    ds = trainer_data.test if trainer_data.test is not None else trainer_data.train
    images = ds.images[: args.n]
    layout = export_reconstructions(model, images, args.ratio, args.seed, args.out, scale=args.scale)
    _emit({"out": str(args.out), "rows": layout.rows, "cell": layout.cell, "ratio": args.ratio})


def _run_matrix(args, runs: Dict[str, Dict[str, str]]) -> Dict:
    out = Path(args.out or "runs")
    summary = {}
    for name, extra in runs.items():
        cfg = _config(args, extra)
        log.info("run %s", name)
        trainer = Trainer(cfg, out_dir=out / name)
        trainer.pretrain()
        summary[name] = _summary(trainer)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def cmd_ablate(args) -> None:
    _emit(_run_matrix(args, ABLATIONS))


def cmd_sweep_mask(args) -> None:
    runs = {f"mask_{r:g}": {"train.mask_ratio": str(r)} for r in args.ratios}
    _emit(_run_matrix(args, runs))


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = {Path(p).parent.name + "/" + Path(p).stem: read_metrics(p) for p in args.metrics}

    def figure(name, panels):
        fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3.6), squeeze=False)
        for ax, (title, keys) in zip(axes[0], panels):
            for label, recs in runs.items():
                for key in keys:
                    pts = [(r["epoch"], r[key]) for r in recs if r.get(key) is not None]
                    if pts:
                        xs, ys = zip(*pts)
                        ax.plot(xs, ys, marker="." if len(xs) < 40 else None,
                                label=f"{label}:{key}" if len(runs) > 1 or len(keys) > 1 else label)
            ax.set_title(title)
            ax.set_xlabel("epoch")
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return str(path)

    written = [
        figure("losses", [("total", ["loss_total"]), ("components", ["loss_recon", "loss_sup", "loss_pseudo"])]),
        figure("accuracy", [("accuracy", ["val_acc", "test_acc"]), ("confident val accuracy", ["val_conf_acc"])]),
        figure("gate", [("gate", ["gate", "lambda_p_eff"]), ("filter accept rate", ["filter_accept_rate"])]),
    ]
    _emit({"figures": written})


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssmae", description="Semi-supervised masked autoencoder training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(p, out_default="runs"):
        p.add_argument("--config", type=str, default=None, help="flat key = value config file")
        p.add_argument("--profile", choices=("paper", "toy"), default="toy")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--labeled-frac", type=float, default=None)
        p.add_argument("--out", type=str, default=out_default)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("pretrain", help="dual-objective pretraining")
    run_flags(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop (with a checkpoint) after this epoch")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="labeled-only fine-tuning")
    run_flags(p)
    p.add_argument("--checkpoint", type=str, default=None, help="pretrained checkpoint")
    p.add_argument("--resume", type=str, default=None, help="fine-tuning checkpoint to continue from")
    p.add_argument("--from-scratch", action="store_true", help="supervised baseline from random init")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "val", "train", "labeled"), default="test")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recon-grid", help="masked | reconstruction | original image grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PNG path")
    p.add_argument("--n", type=int, default=8, help="number of rows")
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_recon_grid)

    p = sub.add_parser("ablate", help="run the five ablation configurations")
    run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-mask", help="pretrain at several masking ratios")
    run_flags(p)
    p.add_argument("--ratios", type=float, nargs="+", default=list(MASK_RATIOS))
    p.set_defaults(func=cmd_sweep_mask)

    p = sub.add_parser("plot", help="loss, accuracy and gate figures from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", type=str, default="figures")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, DatasetError, CheckpointError, TrainingAborted, FileNotFoundError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
