"""ViT encoder, lightweight MAE decoder and linear classification head.

The same encoder serves two forward modes:

* ``forward_recon`` -- random masking, encoder over visible tokens only, then
  the decoder reconstructs every patch from encoded tokens plus a shared mask
  token.
* ``forward_cls`` -- no masking; the [CLS] output feeds a linear head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .patches import MaskPlan, gather_visible, num_patches, patchify, unshuffle_tokens


@dataclass
class NetworkConfig:
    img_size: int = 224
    in_chans: int = 3
    patch_size: int = 16
    num_classes: int = 10
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    decoder_embed_dim: int = 512
    decoder_depth: int = 8
    decoder_num_heads: int = 16
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    decoder_pos: str = "learned"  # learned | sincos

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by num_heads={self.num_heads}")
        if self.decoder_embed_dim % self.decoder_num_heads:
            raise ValueError(
                f"decoder_embed_dim={self.decoder_embed_dim} not divisible by "
                f"decoder_num_heads={self.decoder_num_heads}"
            )
        if self.decoder_pos not in ("learned", "sincos"):
            raise ValueError(f"decoder_pos must be 'learned' or 'sincos', got {self.decoder_pos!r}")
        num_patches(self.img_size, self.img_size, self.patch_size)

    @property
    def num_patches(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    @classmethod
    def paper(cls, **overrides) -> "NetworkConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        base = dict(
            img_size=16, patch_size=4, embed_dim=64, depth=2, num_heads=4,
            decoder_embed_dim=32, decoder_depth=1, decoder_num_heads=4,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_pos_embed(n_side: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine table of shape (n_side**2, dim), raster order."""
    if dim % 4:
        raise ValueError(f"sincos embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij")

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([enc(rows), enc(cols)], axis=1)
    return torch.from_numpy(table).float()


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, M, D = x.shape
        qkv = self.qkv(x).reshape(B, M, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = self.drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, M, D)
        return self.drop(self.proj(out))


class Block(nn.Module):
    """Pre-LN transformer layer: x + MSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(hidden, dim), nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class SSMAE(nn.Module):
    def __init__(self, cfg: NetworkConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        d, dd, N = cfg.embed_dim, cfg.decoder_embed_dim, cfg.num_patches

        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, N + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)

        self.decoder_embed = nn.Linear(d, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.decoder_pos_embed = nn.Parameter(
            torch.zeros(1, N, dd), requires_grad=cfg.decoder_pos == "learned"
        )
        self.decoder_blocks = nn.ModuleList(
            Block(dd, cfg.decoder_num_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(dd)
        self.decoder_pred = nn.Linear(dd, cfg.patch_dim)

        self.head = nn.Linear(d, cfg.num_classes)
        self.register_buffer("pixel_mean", torch.zeros(cfg.in_chans))
        self.register_buffer("pixel_std", torch.ones(cfg.in_chans))
        self._init_weights(generator)

    def set_normalization(self, mean, std) -> None:
        self.pixel_mean.copy_(torch.as_tensor(mean, dtype=self.pixel_mean.dtype))
        self.pixel_std.copy_(torch.as_tensor(std, dtype=self.pixel_std.dtype))

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.pixel_mean) / self.pixel_std

    def denormalize(self, images: torch.Tensor) -> torch.Tensor:
        return images * self.pixel_std + self.pixel_mean

    def _init_weights(self, g: Optional[torch.Generator]) -> None:
        with torch.no_grad():
            for p in (self.cls_token, self.pos_embed, self.mask_token):
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=g)
            if self.cfg.decoder_pos == "sincos":
                side = self.cfg.img_size // self.cfg.patch_size
                self.decoder_pos_embed.copy_(sincos_pos_embed(side, self.cfg.decoder_embed_dim)[None])
            else:
                nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02, a=-0.04, b=0.04, generator=g)
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.xavier_uniform_(m.weight, generator=g)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)

    def decoder_parameters(self):
        for mod in (self.decoder_embed, self.decoder_blocks, self.decoder_norm, self.decoder_pred):
            yield from mod.parameters()
        yield self.mask_token
        if self.decoder_pos_embed.requires_grad:
            yield self.decoder_pos_embed

    # -- building blocks ---------------------------------------------------

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        return patchify(images, self.cfg.patch_size)

    def embed_tokens(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, N, P*P*C) -> (B, N+1, d); slot 0 is CLS plus its position."""
        if grid.shape[-1] != self.cfg.patch_dim:
            raise ValueError(f"patch width {grid.shape[-1]} != P*P*C = {self.cfg.patch_dim}")
        if grid.shape[-2] != self.cfg.num_patches:
            raise ValueError(f"patch count {grid.shape[-2]} != configured N = {self.cfg.num_patches}")
        x = self.patch_embed(grid) + self.pos_embed[:, 1:]
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the encoder layers; the closing LayerNorm is applied by the callers."""
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"token width {tokens.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens

    def encoder_inputs(self, images: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Token sequence the encoder sees under ``plan``: CLS then visible patches."""
        tokens = self.embed_tokens(self.patchify(self.normalize(images)))
        visible = gather_visible(tokens[:, 1:], plan)
        return torch.cat([tokens[:, :1], visible], dim=1)

    def decode(self, latent: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Encoded visible tokens (CLS dropped) -> per-patch predictions (B, N, P*P*C)."""
        x = self.decoder_embed(latent)
        x = unshuffle_tokens(x, self.mask_token, plan) + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))

    # -- forward modes -----------------------------------------------------

    def forward_recon(self, images: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Reconstruct all patches of raw ``images`` (B, H, W, C) under a batched mask plan.

        Predictions live in normalised pixel space.
        """
        if plan.N != self.cfg.num_patches:
            raise ValueError(f"mask plan has N={plan.N}, model expects {self.cfg.num_patches}")
        latent = self.norm(self.encode(self.encoder_inputs(images, plan)))
        return self.decode(latent[:, 1:], plan)

    def forward_cls(self, images: torch.Tensor) -> torch.Tensor:
        """Class logits (B, K) from the unmasked [CLS] representation."""
        h = self.norm(self.encode(self.embed_tokens(self.patchify(self.normalize(images)))))
        return self.head(h[:, 0])

    forward = forward_cls


def assert_finite_params(model: nn.Module) -> None:
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    if bad:
        raise FloatingPointError(f"non-finite parameters: {', '.join(bad[:5])}")
