"""Image <-> patch-token conversion and random masking bookkeeping.

Images are channel-last: ``(..., H, W, C)``.  Patches are enumerated in raster
order (patch rows top to bottom, left to right inside a row) and each patch is
flattened row-major as ``(p_row, p_col, channel)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

SeedLike = Union[int, np.random.Generator, None]


def _check_divisible(H: int, W: int, P: int) -> None:
    if P <= 0:
        raise ValueError(f"patch size must be positive, got P={P}")
    if H % P or W % P:
        raise ValueError(
            f"image of height H={H} and width W={W} is not divisible by patch size P={P}"
        )


def num_patches(H: int, W: int, P: int) -> int:
    _check_divisible(H, W, P)
    return (H // P) * (W // P)


def patchify(image, P: int):
    """Split ``(..., H, W, C)`` into ``(..., N, P*P*C)`` with ``N = H*W/P**2``.

    Works on numpy arrays and torch tensors alike.
    """
    if image.ndim < 3:
        raise ValueError(f"expected an image of shape (..., H, W, C), got {tuple(image.shape)}")
    *lead, H, W, C = image.shape
    _check_divisible(H, W, P)
    h, w = H // P, W // P
    x = image.reshape(*lead, h, P, w, P, C)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
    x = x.transpose(*perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, h * w, P * P * C)


def unpatchify(grid, H: int, W: int, C: int, P: int):
    """Inverse of :func:`patchify`: ``(..., N, P*P*C)`` -> ``(..., H, W, C)``."""
    _check_divisible(H, W, P)
    h, w = H // P, W // P
    if grid.ndim < 2 or grid.shape[-2] != h * w or grid.shape[-1] != P * P * C:
        raise ValueError(
            f"patch grid of shape {tuple(grid.shape)} is inconsistent with "
            f"H={H}, W={W}, C={C}, P={P} (expected (..., {h * w}, {P * P * C}))"
        )
    lead = tuple(grid.shape[:-2])
    x = grid.reshape(*lead, h, w, P, P, C)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
    x = x.transpose(*perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, H, W, C)


@dataclass(frozen=True)
class MaskPlan:
    """Random shuffle of patch positions; the first ``num_visible`` stay visible.

    ``permutation`` has shape ``(N,)`` for one sample or ``(B, N)`` for a batch
    (one independent plan per row).
    """

    permutation: np.ndarray
    num_visible: int
    seed: Optional[int] = None

    @property
    def N(self) -> int:
        return int(self.permutation.shape[-1])

    @property
    def visible_idx(self) -> np.ndarray:
        return self.permutation[..., : self.num_visible]

    @property
    def masked_idx(self) -> np.ndarray:
        return self.permutation[..., self.num_visible :]

    @property
    def num_masked(self) -> int:
        return self.N - self.num_visible

    @property
    def ratio(self) -> float:
        return self.num_masked / self.N

    def mask(self) -> np.ndarray:
        """Boolean array over patch positions, True where masked."""
        m = np.zeros(self.permutation.shape, dtype=bool)
        np.put_along_axis(m, self.masked_idx, True, axis=-1)
        return m


def visible_count(N: int, r: float) -> int:
    if not 0.0 <= r < 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1), got r={r}")
    if N < 1:
        raise ValueError(f"patch count must be >= 1, got N={N}")
    # r is usually a decimal like 0.75; guard against N*(1-r) landing a hair below an integer
    n = int(np.floor(N * (1.0 - r) + 1e-9))
    if n < 1:
        raise ValueError(f"masking ratio r={r} leaves no visible patch out of N={N}")
    return n


def make_mask_plan(N: int, r: float, seed: SeedLike = None, batch: Optional[int] = None) -> MaskPlan:
    """Draw a uniform random permutation of ``N`` patches from a seeded generator.

    With ``batch`` set, draws ``batch`` independent permutations from the same
    generator stream.
    """
    n_vis = visible_count(N, r)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if batch is None:
        perm = rng.permutation(N)
    else:
        perm = np.argsort(rng.random((batch, N)), axis=-1, kind="stable")
    return MaskPlan(
        permutation=perm.astype(np.int64),
        num_visible=n_vis,
        seed=seed if isinstance(seed, int) else None,
    )


def _index_like(idx: np.ndarray, tokens):
    if isinstance(tokens, torch.Tensor):
        return torch.as_tensor(idx, dtype=torch.long, device=tokens.device)
    return np.asarray(idx)


def _gather_rows(tokens, idx):
    """Row gather along axis -2 with an index of shape (n,) or (B, n)."""
    if isinstance(tokens, torch.Tensor):
        if idx.ndim == 1:
            return tokens.index_select(-2, idx)
        exp = idx.unsqueeze(-1).expand(*idx.shape, tokens.shape[-1])
        return torch.gather(tokens, -2, exp)
    if idx.ndim == 1:
        return tokens[..., idx, :]
    return np.take_along_axis(tokens, idx[..., None], axis=-2)


def gather_visible(tokens, plan: MaskPlan):
    """Keep only the visible rows, in the plan's shuffled order."""
    if tokens.shape[-2] != plan.N:
        raise ValueError(f"token count {tokens.shape[-2]} does not match plan N={plan.N}")
    return _gather_rows(tokens, _index_like(plan.visible_idx, tokens))


def unshuffle_tokens(visible, mask_fill, plan: MaskPlan):
    """Scatter visible rows back to raster order, filling masked slots with ``mask_fill``.

    ``mask_fill`` is a single token of width ``d`` that is broadcast to every
    masked position.
    """
    if visible.shape[-2] != plan.num_visible:
        raise ValueError(
            f"visible length {visible.shape[-2]} does not match plan num_visible={plan.num_visible}"
        )
    d = visible.shape[-1]
    lead = tuple(visible.shape[:-2])
    if isinstance(visible, torch.Tensor):
        fill = mask_fill.reshape(d).to(visible.dtype).expand(*lead, plan.num_masked, d)
        full = torch.cat([visible, fill], dim=-2)
        inverse = torch.as_tensor(np.argsort(plan.permutation, axis=-1), device=visible.device)
    else:
        fill = np.broadcast_to(np.asarray(mask_fill).reshape(d), (*lead, plan.num_masked, d))
        full = np.concatenate([visible, fill], axis=-2)
        inverse = np.argsort(plan.permutation, axis=-1)
    return _gather_rows(full, inverse)
