"""Confidence + consistency acceptance rule for pseudo-labels."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from .losses import ce_loss


class RejectReason(str, Enum):
    NONE = "none"
    LOW_CONF_WEAK = "low_conf_weak"
    LOW_CONF_STRONG = "low_conf_strong"
    INCONSISTENT = "inconsistent"


_REASONS = list(RejectReason)


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    pseudo_label: Optional[int]
    conf_weak: float
    conf_strong: float
    reject_reason: RejectReason


@dataclass
class BatchDecisions:
    """Vectorised decisions for a batch; ``reason`` holds indices into ``RejectReason``."""

    accepted: torch.Tensor
    labels: torch.Tensor
    conf_weak: torch.Tensor
    conf_strong: torch.Tensor
    reason: torch.Tensor

    def __len__(self) -> int:
        return int(self.accepted.numel())

    def __getitem__(self, i: int) -> FilterDecision:
        ok = bool(self.accepted[i])
        return FilterDecision(
            accepted=ok,
            pseudo_label=int(self.labels[i]) if ok else None,
            conf_weak=float(self.conf_weak[i]),
            conf_strong=float(self.conf_strong[i]),
            reject_reason=_REASONS[int(self.reason[i])],
        )


def _check_simplex(p: torch.Tensor, name: str, atol: float = 1e-4) -> None:
    if p.ndim != 2 or p.shape[-1] < 1:
        raise ValueError(f"{name} must be (B, K) probabilities, got shape {tuple(p.shape)}")
    if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise ValueError(f"{name} has entries outside [0, 1]")
    if ((p.sum(-1) - 1).abs() > atol).any():
        raise ValueError(f"{name} rows do not sum to 1")


def filter_batch(p_w: torch.Tensor, p_s: Optional[torch.Tensor], tau: float,
                 consistency: bool = True) -> BatchDecisions:
    """Accept iff max(p_w) > tau, max(p_s) > tau and the argmaxes agree.

    With ``consistency=False`` only the weak-view confidence is checked and
    ``p_s`` is ignored.  Reasons record the first failed check.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"confidence threshold must lie in (0, 1), got {tau}")
    _check_simplex(p_w, "p_w")
    conf_w, lab_w = p_w.max(dim=-1)
    reason = torch.zeros(len(p_w), dtype=torch.long)
    low_w = conf_w <= tau
    if consistency:
        _check_simplex(p_s, "p_s")
        if p_s.shape != p_w.shape:
            raise ValueError(f"p_w shape {tuple(p_w.shape)} != p_s shape {tuple(p_s.shape)}")
        conf_s, lab_s = p_s.max(dim=-1)
        low_s = conf_s <= tau
        disagree = lab_w != lab_s
        reason[disagree] = _REASONS.index(RejectReason.INCONSISTENT)
        reason[low_s] = _REASONS.index(RejectReason.LOW_CONF_STRONG)
    else:
        conf_s = torch.full_like(conf_w, float("nan"))
    reason[low_w] = _REASONS.index(RejectReason.LOW_CONF_WEAK)
    return BatchDecisions(reason == 0, lab_w, conf_w, conf_s, reason)


def filter_pseudo(p_w, p_s, tau: float) -> FilterDecision:
    """Single-sample form of :func:`filter_batch`."""
    p_w = torch.as_tensor(p_w, dtype=torch.float64).reshape(1, -1)
    p_s = torch.as_tensor(p_s, dtype=torch.float64).reshape(1, -1)
    return filter_batch(p_w, p_s, tau)[0]


@torch.no_grad()
def predict_probs(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Eval-mode softmax over class logits; no autograd graph is recorded."""
    was_training = model.training
    model.eval()
    try:
        return model(images).softmax(dim=-1)
    finally:
        model.train(was_training)


def pseudo_label_losses(model: nn.Module, weak: torch.Tensor, strong: torch.Tensor, tau: float,
                        consistency: bool = True):
    """Filter an unlabeled batch and return per-sample pseudo losses on accepted samples.

    Decisions come from eval-mode forwards on both views.  The loss forward is
    re-run in the current (training) mode on the strong view, or on the weak
    view when consistency checking is disabled.
    """
    p_w = predict_probs(model, weak)
    p_s = predict_probs(model, strong) if consistency else None
    dec = filter_batch(p_w, p_s, tau, consistency=consistency)
    if not dec.accepted.any():
        return weak.new_zeros(0), dec
    source = strong if consistency else weak
    logits = model(source[dec.accepted])
    return ce_loss(logits, dec.labels[dec.accepted]), dec


@dataclass
class FilterStats:
    num_classes: int
    seen: int = 0
    accepted: int = 0
    reasons: Counter = field(default_factory=Counter)
    class_hist: Optional[np.ndarray] = None

    def update(self, dec: BatchDecisions) -> None:
        if self.class_hist is None:
            self.class_hist = np.zeros(self.num_classes, dtype=np.int64)
        self.seen += len(dec)
        self.accepted += int(dec.accepted.sum())
        for i, n in zip(*np.unique(dec.reason.numpy(), return_counts=True)):
            if i:
                self.reasons[_REASONS[i].value] += int(n)
        self.class_hist += np.bincount(dec.labels[dec.accepted].numpy(), minlength=self.num_classes)

    def as_dict(self) -> Dict:
        hist = self.class_hist if self.class_hist is not None else np.zeros(self.num_classes, np.int64)
        return {
            "filter_seen": self.seen,
            "filter_accepted": self.accepted,
            "filter_accept_rate": self.accepted / self.seen if self.seen else 0.0,
            "filter_rejects": {r.value: self.reasons.get(r.value, 0) for r in _REASONS[1:]},
            "pseudo_class_hist": hist.tolist(),
        }
