"""Epoch-level gate that switches the pseudo-label loss on and off.

``GateState.t`` counts completed epochs; ``GateState.g`` is the gate used for
the next epoch.  Modes:

* ``dynamic`` -- warm-up, then open while the confidence-filtered validation
  accuracy stays at or above ``tau_acc``; close after ``patience`` consecutive
  epochs below it.
* ``always_on`` -- pseudo-labels from the first epoch.
* ``warmup_only`` -- warm-up, then permanently open.
* ``off`` -- never open.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Tuple

import numpy as np
import torch

from .augment import AugPolicy, augment_batch
from .losses import LossWeights
from .pseudo import filter_batch, predict_probs

GATE_MODES = ("dynamic", "always_on", "warmup_only", "off")


@dataclass(frozen=True)
class GateConfig:
    T_warmup: int = 10
    tau_acc: float = 0.70
    patience: int = 1
    tau: float = 0.95
    mode: str = "dynamic"

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ValueError(f"gate mode must be one of {GATE_MODES}, got {self.mode!r}")
        if self.T_warmup < 0 or self.patience < 1:
            raise ValueError(f"need T_warmup >= 0 and patience >= 1, got {self}")
        if not 0.0 <= self.tau_acc <= 1.0:
            raise ValueError(f"tau_acc must lie in [0, 1], got {self.tau_acc}")


@dataclass(frozen=True)
class GateState:
    t: int = 0
    g: int = 0
    below_count: int = 0
    last_val_conf_acc: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def initial_state(config: GateConfig) -> GateState:
    return GateState(g=1 if config.mode == "always_on" else 0)


def gate_step(state: GateState, config: GateConfig, val_conf_acc: float) -> GateState:
    """Advance one epoch boundary given the latest monitor reading."""
    t = state.t + 1
    ok = val_conf_acc >= config.tau_acc
    below = 0 if ok else state.below_count + 1
    nxt = replace(state, t=t, below_count=below, last_val_conf_acc=float(val_conf_acc))
    if config.mode == "always_on":
        return replace(nxt, g=1)
    if config.mode == "off" or t <= config.T_warmup:
        return replace(nxt, g=0)
    if config.mode == "warmup_only":
        return replace(nxt, g=1)
    if ok:
        return replace(nxt, g=1)
    return replace(nxt, g=0 if below >= config.patience else state.g)


def effective_pseudo_weight(state: GateState, weights: LossWeights) -> float:
    return state.g * weights.lambda_pseudo


@torch.no_grad()
def conf_val_accuracy(model, images: torch.Tensor, labels: torch.Tensor, tau: float,
                      weak: AugPolicy, strong: AugPolicy, seed=0, consistency: bool = True,
                      batch_size: int = 256) -> Tuple[float, int]:
    """Accuracy over validation samples that pass the pseudo-label filter.

    Returns ``(accuracy, accepted_count)``; accuracy is 0 when nothing is
    accepted.  Augmentations are drawn from ``seed`` so repeated calls agree.
    """
    if len(images) == 0:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(seed)
    correct = accepted = 0
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        y = torch.as_tensor(labels[start:start + batch_size])
        p_w = predict_probs(model, augment_batch(x, weak, rng))
        p_s = predict_probs(model, augment_batch(x, strong, rng)) if consistency else None
        dec = filter_batch(p_w, p_s, tau, consistency=consistency)
        accepted += int(dec.accepted.sum())
        correct += int((dec.labels[dec.accepted] == y[dec.accepted]).sum())
    return (correct / accepted if accepted else 0.0), accepted
