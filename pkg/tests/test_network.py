import math

import numpy as np
import pytest
import torch

from ssmae.losses import ce_loss, cls_loss, recon_loss, total_loss
from ssmae.network import SSMAE, NetworkConfig, assert_finite_params
from ssmae.patches import make_mask_plan


def small_cfg(**kw):
    base = dict(img_size=8, patch_size=4, in_chans=3, num_classes=5, embed_dim=16, depth=1,
                num_heads=2, decoder_embed_dim=8, decoder_depth=1, decoder_num_heads=2)
    base.update(kw)
    return NetworkConfig(**base)


def make_model(seed=0, **kw):
    return SSMAE(small_cfg(**kw), generator=torch.Generator().manual_seed(seed)).eval()


def test_paper_profile_dimensions():
    cfg = NetworkConfig.paper()
    assert (cfg.embed_dim, cfg.depth, cfg.num_heads) == (768, 12, 12)
    assert (cfg.decoder_embed_dim, cfg.decoder_depth, cfg.decoder_num_heads) == (512, 8, 16)
    assert (cfg.patch_size, cfg.img_size, cfg.num_patches, cfg.patch_dim) == (16, 224, 196, 768)


def test_head_divisibility_enforced():
    with pytest.raises(ValueError):
        NetworkConfig(embed_dim=64, num_heads=5)
    with pytest.raises(ValueError):
        NetworkConfig.toy(decoder_embed_dim=30)


def test_embed_tokens_linearity_and_shape():
    m = make_model(img_size=8, patch_size=4)  # N = 4, d = 16
    with torch.no_grad():
        m.patch_embed.bias.zero_()
    zero = torch.zeros(1, 4, 48)
    out = m.embed_tokens(zero)
    assert out.shape == (1, 5, 16)
    torch.testing.assert_close(out[0, 0], (m.cls_token + m.pos_embed[:, 0])[0, 0])
    torch.testing.assert_close(out[0, 1:], m.pos_embed[0, 1:])
    g = torch.randn(1, 4, 48)
    base = m.pos_embed[:, 1:]
    one, two = m.embed_tokens(g)[:, 1:] - base, m.embed_tokens(2 * g)[:, 1:] - base
    torch.testing.assert_close(two, 2 * one)
    with pytest.raises(ValueError):
        m.embed_tokens(torch.zeros(1, 4, 47))


def test_encode_identity_at_depth_zero():
    m = make_model(depth=0)
    x = torch.randn(2, 5, 16)
    assert torch.equal(m.encode(x), x)
    with pytest.raises(ValueError):
        m.encode(torch.randn(2, 5, 8))


def _np(t):
    return t.detach().double().numpy()


def _layernorm(x, w, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def test_single_token_block_matches_closed_form():
    m = SSMAE(small_cfg(embed_dim=4, num_heads=1, decoder_embed_dim=4, decoder_num_heads=1),
              generator=torch.Generator().manual_seed(3)).double().eval()
    blk = m.blocks[0]
    with torch.no_grad():
        for p in blk.parameters():
            p.normal_(0, 0.5)
    x = np.array([0.3, -1.2, 0.7, 2.0])
    # one key: attention weight is exactly 1, so the branch is proj(value(LN(x)))
    h = _layernorm(x, _np(blk.norm1.weight), _np(blk.norm1.bias))
    Wqkv, bqkv = _np(blk.attn.qkv.weight), _np(blk.attn.qkv.bias)
    v = Wqkv[8:12] @ h + bqkv[8:12]
    x1 = x + _np(blk.attn.proj.weight) @ v + _np(blk.attn.proj.bias)
    h2 = _layernorm(x1, _np(blk.norm2.weight), _np(blk.norm2.bias))
    fc1, fc2 = blk.mlp[0], blk.mlp[3]
    x2 = x1 + _np(fc2.weight) @ _gelu(_np(fc1.weight) @ h2 + _np(fc1.bias)) + _np(fc2.bias)
    out = m.encode(torch.from_numpy(x).reshape(1, 1, 4))
    np.testing.assert_allclose(out.detach().numpy().reshape(-1), x2, rtol=1e-10, atol=1e-12)


def test_encode_is_permutation_equivariant():
    m = make_model(depth=2).double()
    x = torch.randn(1, 6, 16, dtype=torch.float64)
    perm = torch.tensor([0, 4, 2, 5, 1, 3])
    torch.testing.assert_close(m.encode(x[:, perm]), m.encode(x)[:, perm])


def test_forward_recon_shapes_and_zero_mask():
    m = make_model(img_size=8, patch_size=4)
    x = torch.rand(3, 8, 8, 3)
    plan = make_mask_plan(4, 0.75, seed=0, batch=3)
    assert m.forward_recon(x, plan).shape == (3, 4, 48)
    full = make_mask_plan(4, 0.0, seed=0, batch=3)
    assert m.forward_recon(x, full).shape == (3, 4, 48)
    with pytest.raises(ValueError):
        m.forward_recon(x, make_mask_plan(16, 0.5, seed=0, batch=3))


def test_masked_pixels_never_reach_encoder():
    m = make_model(img_size=16, patch_size=4)
    x = torch.rand(2, 16, 16, 3)
    plan = make_mask_plan(16, 0.75, seed=11, batch=2)
    mask = torch.as_tensor(plan.mask())
    noise = torch.randn(2, 16, 48) * mask[..., None]
    from ssmae.patches import patchify, unpatchify
    x2 = unpatchify(patchify(x, 4) + noise, 16, 16, 3, 4)
    assert not torch.equal(x, x2)
    assert torch.equal(m.encoder_inputs(x, plan), m.encoder_inputs(x2, plan))


def test_forward_cls_properties():
    m = make_model()
    x = torch.rand(4, 8, 8, 3)
    assert m.forward_cls(x).shape == (4, 5)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.copy_(torch.arange(5.0))
    torch.testing.assert_close(m.forward_cls(x), torch.arange(5.0).expand(4, 5))
    m2 = make_model(seed=4)
    same = torch.cat([x[:1], x[:1]])
    a, b = m2.forward_cls(same), m2.forward_cls(same)
    assert torch.equal(a[0], a[1]) and torch.equal(a, b)


def test_sincos_decoder_positions_are_fixed():
    m = make_model(decoder_pos="sincos", decoder_embed_dim=8)
    assert not m.decoder_pos_embed.requires_grad
    assert m.decoder_pos_embed.abs().sum() > 0


def test_nonfinite_parameters_detected():
    m = make_model()
    assert_finite_params(m)
    with torch.no_grad():
        m.head.weight[0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="head.weight"):
        assert_finite_params(m)


# -- gradient check ----------------------------------------------------------

def _objective(m, x, y, xs, y_pseudo, plan):
    pred = m.forward_recon(x, plan)
    rec = recon_loss(pred, m.patchify(m.normalize(x)), plan)
    sup = ce_loss(m.forward_cls(x), y)
    pseudo = ce_loss(m.forward_cls(xs), y_pseudo)
    return total_loss(rec, cls_loss(sup, pseudo, 0.75), 1.0)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    m = SSMAE(small_cfg(embed_dim=16, depth=1, decoder_embed_dim=8, decoder_depth=1),
              generator=torch.Generator().manual_seed(1)).double()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    x = torch.rand(3, 8, 8, 3, dtype=torch.float64)
    xs = torch.rand(2, 8, 8, 3, dtype=torch.float64)
    y, yp = torch.tensor([0, 3, 1]), torch.tensor([2, 4])
    plan = make_mask_plan(4, 0.5, seed=2, batch=3)
    loss = _objective(m, x, y, xs, yp, plan)
    loss.backward()

    named = dict(m.named_parameters())
    groups = ["pos_embed", "cls_token", "patch_embed.weight", "blocks.0.attn.qkv.weight",
              "blocks.0.mlp.0.weight", "norm.weight", "decoder_embed.weight", "mask_token",
              "decoder_pos_embed", "decoder_blocks.0.attn.proj.weight", "decoder_pred.weight",
              "head.weight", "head.bias"]
    rng = np.random.default_rng(0)
    checked, eps = 0, 1e-6
    for name in groups:
        p = named[name]
        for _ in range(2):
            i = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = _objective(m, x, y, xs, yp, plan).item()
                flat[i] = orig - eps
                down = _objective(m, x, y, xs, yp, plan).item()
                flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = p.grad.view(-1)[i].item()
            assert abs(analytic - numeric) <= max(1e-3 * max(abs(analytic), abs(numeric)), 1e-6), (
                name, i, analytic, numeric)
            checked += 1
    assert checked >= 20
