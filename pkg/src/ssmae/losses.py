"""Reconstruction, cross-entropy and combined objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .patches import MaskPlan

Scalar = Union[float, torch.Tensor]


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term is NaN or infinite; the trainer aborts the step."""


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_pseudo: float = 0.75

    def __post_init__(self):
        if self.lambda_cls < 0 or self.lambda_pseudo < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


def recon_loss(pred: torch.Tensor, target: torch.Tensor, plan: MaskPlan,
               reduction: str = "patch_norm") -> torch.Tensor:
    """Mean over masked patches of the squared L2 error per patch.

    ``pred`` and ``target`` are ``(N, D)`` or ``(B, N, D)``; visible patches do
    not enter the sum, so their gradient is exactly zero.  With
    ``reduction="elementwise_mean"`` the result is divided by ``D``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if plan.num_masked == 0:
        raise ValueError("reconstruction loss is undefined without masked patches (r = 0)")
    if reduction not in ("patch_norm", "elementwise_mean"):
        raise ValueError(f"unknown recon reduction {reduction!r}")
    mask = torch.as_tensor(plan.mask(), device=pred.device)
    if mask.shape != pred.shape[:-1]:
        raise ValueError(f"mask plan shape {tuple(mask.shape)} does not match patches {tuple(pred.shape[:-1])}")
    per_patch = (pred - target).pow(2).sum(dim=-1)
    loss = per_patch[mask].sum() / mask.sum()
    if reduction == "elementwise_mean":
        loss = loss / pred.shape[-1]
    return loss


def ce_loss(logits: torch.Tensor, labels, reduction: str = "none") -> torch.Tensor:
    """-log softmax(logits)[label], stabilised by max subtraction.

    ``logits`` is ``(K,)`` or ``(B, K)``.  Returns per-sample losses unless
    ``reduction="mean"``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    single = logits.ndim == 1
    if single:
        logits, labels = logits[None], labels.reshape(1)
    K = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K}): {labels.tolist()}")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    losses = -F.log_softmax(shifted, dim=-1).gather(-1, labels[:, None]).squeeze(-1)
    if reduction == "mean":
        return losses.mean()
    return losses[0] if single else losses


def _mean(xs) -> Scalar:
    if isinstance(xs, torch.Tensor):
        return xs.mean() if xs.numel() else xs.new_zeros(())
    xs = list(xs)
    if not xs:
        return 0.0
    if isinstance(xs[0], torch.Tensor):
        return torch.stack([torch.as_tensor(x) for x in xs]).mean()
    return float(np.mean(xs))


def cls_loss(sup_losses: Sequence, pseudo_losses: Sequence, lambda_p_eff: float) -> Scalar:
    """mean(supervised) + lambda_p_eff * mean(pseudo); an empty pseudo list adds 0."""
    if lambda_p_eff < 0:
        raise ValueError(f"pseudo weight must be >= 0, got {lambda_p_eff}")
    total = _mean(sup_losses)
    n_pseudo = pseudo_losses.numel() if isinstance(pseudo_losses, torch.Tensor) else len(pseudo_losses)
    if n_pseudo and lambda_p_eff:
        total = total + lambda_p_eff * _mean(pseudo_losses)
    return total


def _finite(x: Scalar) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(x)


def total_loss(recon: Scalar, cls: Scalar, lambda_cls: float) -> Scalar:
    if not (_finite(recon) and _finite(cls)):
        show = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        raise NonFiniteLossError(f"non-finite loss term: recon={show(recon)}, cls={show(cls)}")
    return recon + lambda_cls * cls
