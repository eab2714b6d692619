"""Dual-objective pretraining, fine-tuning, evaluation and checkpointing.

Randomness during training is drawn from per-epoch numpy generators seeded by
``(run seed, stage, epoch)``, so a run resumed from an epoch-boundary
checkpoint replays exactly the same batches, augmentations and masks.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .augment import AugPolicy, augment_batch
from .config import ConfigError, RunConfig, config_from_canonical
from .data import DatasetBundle, ImageDataset, Splits, iterate_batch_pairs, load_dataset, split
from .gate import GateState, conf_val_accuracy, effective_pseudo_weight, gate_step, initial_state
from .losses import NonFiniteLossError, ce_loss, cls_loss, recon_loss, total_loss
from .network import SSMAE, assert_finite_params
from .patches import make_mask_plan, patchify, unpatchify
from .pseudo import FilterStats, pseudo_label_losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ssmae-checkpoint"
CHECKPOINT_VERSION = 1
_STAGE_IDS = {"pretrain": 1, "finetune": 2, "monitor": 3}


class CheckpointError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    pass


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@torch.no_grad()
def evaluate(model: SSMAE, dataset: ImageDataset, batch_size: int = 256) -> Dict:
    """Top-1 accuracy of ``forward_cls`` argmax, with a per-class breakdown."""
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, len(dataset), batch_size):
        preds.append(model.forward_cls(dataset.images[start:start + batch_size]).argmax(-1))
    model.train(was_training)
    pred = torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)
    labels = dataset.labels
    correct = pred == labels
    per_class = []
    for k in range(dataset.num_classes):
        sel = labels == k
        per_class.append(float(correct[sel].float().mean()) if sel.any() else None)
    return {
        "accuracy": float(correct.float().mean()) if len(labels) else 0.0,
        "n": int(len(labels)),
        "per_class": per_class,
    }


class MetricsLog:
    """Append-only JSON-lines file, one record per epoch."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def rewrite(self, records: Sequence[Dict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def append(self, record: Dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> List[Dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir=None, bundle: Optional[DatasetBundle] = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.bundle = bundle if bundle is not None else load_dataset(cfg.data.manifest(cfg.net))
        if self.bundle.train.num_classes != cfg.net.num_classes:
            raise ConfigError(
                f"dataset has {self.bundle.train.num_classes} classes, net.num_classes={cfg.net.num_classes}"
            )
        img = self.bundle.train.images
        if tuple(img.shape[1:]) != (cfg.net.img_size, cfg.net.img_size, cfg.net.in_chans):
            raise ConfigError(f"dataset images {tuple(img.shape[1:])} do not match the network input size")

        self.splits = split(self.bundle.train.labels.numpy(), cfg.split)
        if len(self.splits.val) == 0:
            raise ConfigError("validation split is empty; raise split.val_fraction or labeled_fraction")
        val = self.splits.val
        if len(val) > cfg.train.val_cap:
            val = np.sort(np.random.default_rng([cfg.seed, 7]).choice(val, cfg.train.val_cap, replace=False))
        self.val_set = self.bundle.train.subset(val)

        self.gate_cfg = cfg.gate_config()
        self.weak = AugPolicy.weak(cfg.net.img_size)
        self.strong = AugPolicy.strong(cfg.net.img_size)

        torch.manual_seed(cfg.seed)
        self.model = SSMAE(cfg.net, generator=torch.Generator().manual_seed(cfg.seed))
        self.model.set_normalization(self.bundle.mean, self.bundle.std)
        self.optimizer = self._make_optimizer()
        self.stage = "pretrain"
        self.epoch = 0
        self.gate = initial_state(self.gate_cfg)
        self.history: List[Dict] = []
        self.best_val = -1.0

    # -- plumbing -----------------------------------------------------------

    def _make_optimizer(self) -> torch.optim.Optimizer:
        decay, no_decay = [], []
        for name, p in self.model.named_parameters():
            if not p.requires_grad:
                continue
            (decay if p.ndim >= 2 and "token" not in name and "pos_embed" not in name else no_decay).append(p)
        return torch.optim.AdamW(
            [{"params": decay, "weight_decay": self.cfg.optim.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=self.cfg.optim.lr,
        )

    def _set_lr(self, epoch: int, total: int) -> float:
        lr = self.cfg.optim.lr
        if self.cfg.optim.schedule == "cosine" and total > 0:
            lr = 0.5 * lr * (1 + math.cos(math.pi * (epoch - 1) / total))
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def _epoch_rng(self, epoch: int, stage: Optional[str] = None) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, _STAGE_IDS[stage or self.stage], epoch])

    @property
    def metrics_path(self) -> Optional[Path]:
        return self.out_dir / f"metrics_{self.stage}.jsonl" if self.out_dir is not None else None

    def _record(self, rec: Dict) -> None:
        self.history.append(rec)
        if self.metrics_path is not None:
            MetricsLog(self.metrics_path).append(rec)

    # -- checkpoints --------------------------------------------------------

    def state_dict(self) -> Dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.canonical(),
            "config_hash": self.cfg.hash(),
            "stage": self.stage,
            "epoch": self.epoch,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "gate": self.gate.to_dict(),
            "torch_rng": torch.get_rng_state(),
            "history": self.history,
            "best_val": self.best_val,
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    def load_state(self, ckpt: Dict, allow_config_mismatch: bool = False) -> None:
        check_checkpoint(ckpt)
        if ckpt["config_hash"] != self.cfg.hash() and not allow_config_mismatch:
            raise CheckpointError(
                "checkpoint config hash does not match the run config "
                f"({ckpt['config_hash'][:12]} vs {self.cfg.hash()[:12]})"
            )
        self.model.load_state_dict(ckpt["model"])
        self.stage = ckpt["stage"]
        self.epoch = ckpt["epoch"]
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.gate = GateState(**ckpt["gate"])
        torch.set_rng_state(ckpt["torch_rng"])
        self.history = list(ckpt["history"])
        self.best_val = ckpt.get("best_val", -1.0)
        if self.metrics_path is not None:
            MetricsLog(self.metrics_path).rewrite(self.history)

    @classmethod
    def from_checkpoint(cls, path, cfg: Optional[RunConfig] = None, out_dir=None,
                        allow_config_mismatch: bool = False, bundle=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        if cfg is None:
            cfg = config_from_canonical(ckpt["config"])
        trainer = cls(cfg, out_dir=out_dir, bundle=bundle)
        trainer.load_state(ckpt, allow_config_mismatch=allow_config_mismatch)
        return trainer

    def _maybe_checkpoint(self, total_epochs: int, val_acc: float, force: bool = False) -> None:
        if self.out_dir is None:
            return
        k = self.cfg.train.checkpoint_every
        if force or self.epoch == total_epochs or (k > 0 and self.epoch % k == 0):
            self.save_checkpoint(self.out_dir / f"{self.stage}_last.pt")
            if k > 0 and self.epoch % k == 0:
                self.save_checkpoint(self.out_dir / f"{self.stage}_epoch{self.epoch:04d}.pt")
        if val_acc > self.best_val:
            self.best_val = val_acc
            self.save_checkpoint(self.out_dir / f"{self.stage}_best.pt")

    # -- pretraining --------------------------------------------------------

    def train_step(self, xl: torch.Tensor, yl: torch.Tensor, xu: torch.Tensor, lam_p: float,
                   rng: np.random.Generator, stats: FilterStats) -> Dict[str, Optional[float]]:
        cfg, model = self.cfg, self.model
        flags = cfg.ablate
        model.train()
        need_u = len(xu) > 0 and (not flags.recon_off or lam_p > 0)
        xl_w = augment_batch(xl, self.weak, rng)
        xu_w = augment_batch(xu, self.weak, rng) if need_u else xu[:0]

        r = cfg.train.mask_ratio
        if flags.recon_off or r == 0:
            l_rec = None
        else:
            x_all = torch.cat([xl_w, xu_w])
            plan = make_mask_plan(cfg.net.num_patches, r, rng, batch=len(x_all))
            pred = model.forward_recon(x_all, plan)
            tgt = x_all if cfg.train.recon_target == "raw" else model.normalize(x_all)
            l_rec = recon_loss(pred, model.patchify(tgt), plan, cfg.train.recon_reduction)

        sup = ce_loss(model.forward_cls(xl_w), yl)
        pseudo = sup.new_zeros(0)
        if lam_p > 0 and len(xu):
            xu_s = augment_batch(xu, self.strong, rng) if not flags.consistency_off else xu_w
            pseudo, dec = pseudo_label_losses(model, xu_w, xu_s, self.gate_cfg.tau,
                                              consistency=not flags.consistency_off)
            stats.update(dec)
        l_cls = cls_loss(sup, pseudo, lam_p)
        total = total_loss(0.0 if l_rec is None else l_rec, l_cls, cfg.loss.lambda_cls)

        self.optimizer.zero_grad(set_to_none=True)
        if isinstance(total, torch.Tensor) and total.requires_grad:
            total.backward()
            self.optimizer.step()
        assert_finite_params(model)
        return {
            "recon": None if l_rec is None else _scalar(l_rec),
            "sup": _scalar(sup.mean()),
            "pseudo": _scalar(pseudo.mean()) if len(pseudo) and lam_p > 0 else 0.0,
            "cls": _scalar(l_cls),
            "total": _scalar(total),
        }

    def monitor(self, epoch: int) -> Dict:
        """Reliability monitor on the validation split, plus plain validation accuracy."""
        acc, n_acc = conf_val_accuracy(
            self.model, self.val_set.images, self.val_set.labels, self.gate_cfg.tau,
            self.weak, self.strong, seed=[self.cfg.seed, _STAGE_IDS["monitor"], epoch],
            consistency=not self.cfg.ablate.consistency_off, batch_size=self.cfg.train.eval_batch,
        )
        val = evaluate(self.model, self.val_set, self.cfg.train.eval_batch)
        return {"val_conf_acc": acc, "val_conf_accepted": n_acc, "val_acc": val["accuracy"]}

    def pretrain(self, stop_after: Optional[int] = None, evaluate_test: bool = True) -> List[Dict]:
        """Run pretraining epochs up to ``train.epochs_pretrain``.

        ``stop_after`` ends the loop early after that epoch (with a checkpoint),
        which is how an interrupted run is simulated.
        """
        if self.stage != "pretrain":
            raise CheckpointError(f"cannot pretrain from a {self.stage!r} checkpoint")
        cfg = self.cfg
        E = cfg.train.epochs_pretrain
        train = self.bundle.train
        if self.epoch == 0 and self.metrics_path is not None:
            MetricsLog(self.metrics_path).rewrite([])
        while self.epoch < E:
            epoch = self.epoch + 1
            t0 = time.time()
            rng = self._epoch_rng(epoch)
            lr = self._set_lr(epoch, E)
            gate_used = self.gate
            lam_p = effective_pseudo_weight(gate_used, cfg.loss)
            stats = FilterStats(cfg.net.num_classes)
            sums: Dict[str, float] = {}
            n_steps = 0
            for pair in iterate_batch_pairs(self.splits, cfg.optim.batch_labeled, cfg.optim.batch_unlabeled, rng):
                xl, yl = train.images[pair.labeled], train.labels[pair.labeled]
                xu = train.images[pair.unlabeled]
                try:
                    out = self.train_step(xl, yl, xu, lam_p, rng, stats)
                except (NonFiniteLossError, FloatingPointError) as exc:
                    self._abort(exc)
                n_steps += 1
                for k, v in out.items():
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v

            mon = self.monitor(epoch)
            self.gate = gate_step(self.gate, self.gate_cfg, mon["val_conf_acc"])
            self.epoch = epoch
            rec = {
                "stage": "pretrain",
                "epoch": epoch,
                "lr": lr,
                "steps": n_steps,
                "loss_recon": sums["recon"] / n_steps if "recon" in sums else None,
                "loss_sup": sums.get("sup", 0.0) / max(n_steps, 1),
                "loss_pseudo": sums.get("pseudo", 0.0) / max(n_steps, 1),
                "loss_cls": sums.get("cls", 0.0) / max(n_steps, 1),
                "loss_total": sums.get("total", 0.0) / max(n_steps, 1),
                "gate": gate_used.g,
                "lambda_p_eff": lam_p,
                "gate_next": self.gate.g,
                "below_count": self.gate.below_count,
                **mon,
                **stats.as_dict(),
                "test_acc": None,
            }
            final = epoch == E
            if final and evaluate_test and self.bundle.test is not None:
                rec["test_acc"] = evaluate(self.model, self.bundle.test, cfg.train.eval_batch)["accuracy"]
            rec["wall_time"] = time.time() - t0
            self._record(rec)
            log.info("pretrain epoch %d/%d total=%.4f gate=%d val_conf_acc=%.3f",
                     epoch, E, rec["loss_total"], gate_used.g, mon["val_conf_acc"])
            stopping = stop_after is not None and epoch >= stop_after
            self._maybe_checkpoint(E, mon["val_acc"], force=stopping)
            if stopping:
                break
        return self.history

    def _abort(self, exc: Exception) -> None:
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "diagnostic.pt")
        raise TrainingAborted(f"non-finite values at {self.stage} epoch {self.epoch + 1}: {exc}") from exc

    # -- fine-tuning --------------------------------------------------------

    def begin_finetune(self) -> None:
        """Switch to the fine-tuning stage with a fresh optimizer."""
        self.stage = "finetune"
        self.epoch = 0
        self.history = []
        self.best_val = -1.0
        self.optimizer = self._make_optimizer()
        if self.metrics_path is not None:
            MetricsLog(self.metrics_path).rewrite([])

    def finetune(self, epochs: Optional[int] = None) -> List[Dict]:
        """Labeled data only, no masking, cross-entropy on encoder and head."""
        if self.stage != "finetune":
            self.begin_finetune()
        cfg = self.cfg
        E = cfg.train.epochs_finetune if epochs is None else epochs
        train = self.bundle.train
        labeled = self.splits.labeled
        B = cfg.optim.batch_labeled
        while self.epoch < E:
            epoch = self.epoch + 1
            t0 = time.time()
            rng = self._epoch_rng(epoch)
            lr = self._set_lr(epoch, E)
            order = rng.permutation(labeled)
            total, n_steps = 0.0, 0
            self.model.train()
            for start in range(0, len(order), B):
                idx = order[start:start + B]
                x = augment_batch(train.images[idx], self.weak, rng)
                loss = ce_loss(self.model.forward_cls(x), train.labels[idx], reduction="mean")
                try:
                    loss = total_loss(0.0, loss, 1.0)
                except NonFiniteLossError as exc:
                    self._abort(exc)
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer.step()
                assert_finite_params(self.model)
                total += float(loss.detach())
                n_steps += 1
            self.epoch = epoch
            val = evaluate(self.model, self.val_set, cfg.train.eval_batch)["accuracy"]
            rec = {"stage": "finetune", "epoch": epoch, "lr": lr, "steps": n_steps,
                   "loss_sup": total / max(n_steps, 1), "loss_total": total / max(n_steps, 1),
                   "val_acc": val, "test_acc": None}
            if epoch == E and self.bundle.test is not None:
                rec["test_acc"] = evaluate(self.model, self.bundle.test, cfg.train.eval_batch)["accuracy"]
            rec["wall_time"] = time.time() - t0
            self._record(rec)
            self._maybe_checkpoint(E, val)
        if E == 0 and self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "finetune_last.pt")
        return self.history


# -- checkpoint helpers -------------------------------------------------------

def check_checkpoint(ckpt) -> None:
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not an ssmae checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ckpt.get('version')} (expected {CHECKPOINT_VERSION})")


def load_checkpoint(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    check_checkpoint(ckpt)
    return ckpt


def model_from_checkpoint(path) -> SSMAE:
    ckpt = load_checkpoint(path)
    cfg = config_from_canonical(ckpt["config"])
    model = SSMAE(cfg.net)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


# -- reconstruction grids -----------------------------------------------------

@dataclass
class GridLayout:
    rows: int
    cell: int
    gutter: int

    def column_box(self, row: int, col: int):
        """(left, top, right, bottom) of a cell in the grid image."""
        step = self.cell + self.gutter
        left, top = self.gutter + col * step, self.gutter + row * step
        return left, top, left + self.cell, top + self.cell


def _to_uint8(x: torch.Tensor) -> np.ndarray:
    return (x.clamp(0, 1) * 255).round().to(torch.uint8).numpy()


@torch.no_grad()
def reconstruction_panels(model: SSMAE, images: torch.Tensor, r: float, seed: int = 0):
    """(masked input, reconstruction with visible patches pasted, original), all in [0, 1]."""
    cfg = model.cfg
    model.eval()
    H, W, C, P = cfg.img_size, cfg.img_size, cfg.in_chans, cfg.patch_size
    plan = make_mask_plan(cfg.num_patches, r, seed, batch=len(images))
    mask = torch.as_tensor(plan.mask())[..., None]
    orig_p = patchify(images, P)
    pred = model.denormalize(unpatchify(model.forward_recon(images, plan), H, W, C, P))
    pred_p = patchify(pred.clamp(0, 1), P)
    masked = unpatchify(torch.where(mask, torch.zeros_like(orig_p), orig_p), H, W, C, P)
    recon = unpatchify(torch.where(mask, pred_p, orig_p), H, W, C, P)
    return masked, recon, images


def export_reconstructions(model: SSMAE, images: torch.Tensor, r: float, seed: int, path,
                           scale: int = 1, gutter: int = 2) -> GridLayout:
    """Write a PNG with one row per image: masked input | reconstruction | original."""
    cols = [_to_uint8(c) for c in reconstruction_panels(model, images, r, seed)]
    if scale > 1:
        cols = [c.repeat(scale, axis=1).repeat(scale, axis=2) for c in cols]
    n, cell = len(images), cols[0].shape[1]
    layout = GridLayout(rows=n, cell=cell, gutter=gutter)
    canvas = np.full((gutter + n * (cell + gutter), gutter + 3 * (cell + gutter), 3), 255, np.uint8)
    for i in range(n):
        for j, col in enumerate(cols):
            left, top, right, bottom = layout.column_box(i, j)
            canvas[top:bottom, left:right] = col[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return layout
