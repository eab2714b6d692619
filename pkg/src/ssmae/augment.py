"""Weak and strong augmentation policies on channel-last images in [0, 1].

Weak: reflect-pad random crop + horizontal flip.
Strong: weak, then ``n_ops`` distinct ops drawn per image from ``STRONG_OPS``,
then random erasing.  All randomness comes from a numpy ``Generator`` so a
seed fully determines the output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

STRONG_OPS: Tuple[str, ...] = (
    "rotate", "translate", "shear", "brightness", "contrast", "saturation", "posterize",
)
_GEOMETRIC = ("rotate", "translate", "shear")


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "weak"
    crop_pad: int = 4
    flip_p: float = 0.5
    n_ops: int = 0
    ops: Tuple[str, ...] = STRONG_OPS
    rotate_deg: float = 15.0
    translate_frac: float = 0.10
    shear_deg: float = 10.0
    jitter: float = 0.4
    posterize_bits: Tuple[int, int] = (4, 8)
    erase_p: float = 0.0
    erase_scale: Tuple[float, float] = (0.02, 0.33)

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"policy kind must be weak or strong, got {self.kind!r}")
        unknown = set(self.ops) - set(STRONG_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
        if self.n_ops > len(self.ops):
            raise ValueError(f"n_ops={self.n_ops} exceeds the {len(self.ops)} available ops")

    @classmethod
    def weak(cls, img_size: int = 32) -> "AugPolicy":
        # pad 4 at CIFAR resolution; scaled for other sizes
        return cls(kind="weak", crop_pad=max(1, round(4 * img_size / 32)))

    @classmethod
    def strong(cls, img_size: int = 32) -> "AugPolicy":
        return replace(cls.weak(img_size), kind="strong", n_ops=2, erase_p=0.25)

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls(kind="weak", crop_pad=0, flip_p=0.0)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _crop_flip(x: torch.Tensor, policy: AugPolicy, rng: np.random.Generator) -> torch.Tensor:
    B, H, W, _ = x.shape
    p = policy.crop_pad
    if p > 0:
        padded = F.pad(x.permute(0, 3, 1, 2), (p, p, p, p), mode="reflect").permute(0, 2, 3, 1)
        oy = torch.from_numpy(rng.integers(0, 2 * p + 1, size=B))
        ox = torch.from_numpy(rng.integers(0, 2 * p + 1, size=B))
        rows = oy[:, None] + torch.arange(H)
        cols = ox[:, None] + torch.arange(W)
        x = padded[torch.arange(B)[:, None, None], rows[:, :, None], cols[:, None, :]]
    if policy.flip_p > 0:
        flip = torch.from_numpy(rng.random(B) < policy.flip_p)
        x = torch.where(flip[:, None, None, None], x.flip(2), x)
    return x


def _affine(x: torch.Tensor, chosen: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> torch.Tensor:
    B = x.shape[0]
    ops = list(policy.ops)
    theta = np.tile(np.eye(2, 3), (B, 1, 1))
    angle = rng.uniform(-1, 1, B) * math.radians(policy.rotate_deg)
    shift = rng.uniform(-1, 1, (B, 2)) * policy.translate_frac * 2  # grid coords span 2
    shear = rng.uniform(-1, 1, B) * math.radians(policy.shear_deg)
    for b in range(B):
        m = np.eye(3)
        if "rotate" in ops and chosen[b, ops.index("rotate")] and angle[b]:
            c, s = math.cos(angle[b]), math.sin(angle[b])
            m = m @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        if "shear" in ops and chosen[b, ops.index("shear")] and shear[b]:
            m = m @ np.array([[1, math.tan(shear[b]), 0], [0, 1, 0], [0, 0, 1]])
        if "translate" in ops and chosen[b, ops.index("translate")]:
            m[:2, 2] += shift[b]
        theta[b] = m[:2]
    moved = np.any(np.abs(theta - np.eye(2, 3)) > 0, axis=(1, 2))
    if not moved.any():
        return x
    idx = torch.from_numpy(np.flatnonzero(moved))
    sub = x[idx].permute(0, 3, 1, 2)
    grid = F.affine_grid(torch.from_numpy(theta[moved]).to(x.dtype), list(sub.shape), align_corners=False)
    warped = F.grid_sample(sub, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    x = x.clone()
    x[idx] = warped.permute(0, 2, 3, 1)
    return x


def _photometric(x: torch.Tensor, chosen: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> torch.Tensor:
    B = x.shape[0]
    ops = list(policy.ops)

    def factors(name):
        f = 1.0 + rng.uniform(-1, 1, B) * policy.jitter
        on = chosen[:, ops.index(name)] if name in ops else np.zeros(B, bool)
        on = on & (f != 1.0)
        return torch.from_numpy(f).to(x.dtype)[:, None, None, None], torch.from_numpy(on)[:, None, None, None]

    C = x.shape[-1]
    gray_w = torch.tensor([0.299, 0.587, 0.114] if C == 3 else [1.0 / C] * C, dtype=x.dtype)
    f, on = factors("brightness")
    if on.any():
        x = torch.where(on, (x * f).clamp(0, 1), x)
    f, on = factors("contrast")
    if on.any():
        mean = (x * gray_w).sum(-1, keepdim=True).mean(dim=(1, 2), keepdim=True)
        x = torch.where(on, ((x - mean) * f + mean).clamp(0, 1), x)
    f, on = factors("saturation")
    if on.any():
        gray = (x * gray_w).sum(-1, keepdim=True)
        x = torch.where(on, ((x - gray) * f + gray).clamp(0, 1), x)
    lo, hi = policy.posterize_bits
    bits = rng.integers(lo, hi + 1, size=B)
    if "posterize" in ops:
        on = chosen[:, ops.index("posterize")] & (bits < 8)
        if on.any():
            step = torch.from_numpy(2.0 ** (8 - bits)).to(x.dtype)[:, None, None, None]
            q = torch.floor(torch.floor(x * 255) / step) * step / 255
            x = torch.where(torch.from_numpy(on)[:, None, None, None], q, x)
    return x


def _erase(x: torch.Tensor, policy: AugPolicy, rng: np.random.Generator) -> torch.Tensor:
    B, H, W, _ = x.shape
    hit = rng.random(B) < policy.erase_p
    area = rng.uniform(*policy.erase_scale, B) * H * W
    log_ratio = rng.uniform(math.log(0.3), math.log(1 / 0.3), B)
    u = rng.random((B, 2))
    if not hit.any():
        return x
    x = x.clone()
    for b in np.flatnonzero(hit):
        ratio = math.exp(log_ratio[b])
        h = min(H, max(1, int(round(math.sqrt(area[b] * ratio)))))
        w = min(W, max(1, int(round(math.sqrt(area[b] / ratio)))))
        top = int(u[b, 0] * (H - h + 1))
        left = int(u[b, 1] * (W - w + 1))
        x[b, top:top + h, left:left + w] = 0.0
    return x


def augment_batch(images: torch.Tensor, policy: AugPolicy, seed: Union[int, np.random.Generator, None] = None) -> torch.Tensor:
    """Augment a batch ``(B, H, W, C)``; output has the same shape."""
    rng = _rng(seed)
    x = _crop_flip(images, policy, rng)
    if policy.kind == "strong":
        B = x.shape[0]
        chosen = np.zeros((B, len(policy.ops)), dtype=bool)
        for b in range(B):
            chosen[b, rng.choice(len(policy.ops), size=policy.n_ops, replace=False)] = True
        if any(op in policy.ops for op in _GEOMETRIC):
            x = _affine(x, chosen, policy, rng)
        x = _photometric(x, chosen, policy, rng)
        if policy.erase_p > 0:
            x = _erase(x, policy, rng)
    return x


def augment(image: torch.Tensor, policy: AugPolicy, seed=None) -> torch.Tensor:
    """Augment a single ``(H, W, C)`` image."""
    return augment_batch(image[None], policy, seed)[0]
