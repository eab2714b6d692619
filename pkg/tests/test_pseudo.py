import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from ssmae.augment import STRONG_OPS, AugPolicy, augment, augment_batch
from ssmae.pseudo import (
    FilterStats,
    RejectReason,
    filter_batch,
    filter_pseudo,
    predict_probs,
    pseudo_label_losses,
)


def onehotish(k, K, top, at):
    p = np.full(K, (1 - top) / (K - 1))
    p[at] = top
    return p


def brute_force_decision(p_w, p_s, tau):
    """Plain-python re-evaluation: confidence on both views, then agreement."""
    def top(p):
        best = 0
        for i in range(len(p)):
            if p[i] > p[best]:
                best = i
        return best, p[best]

    lw, cw = top(list(p_w))
    ls, cs = top(list(p_s))
    if not cw > tau:
        return False, None, "low_conf_weak"
    if not cs > tau:
        return False, None, "low_conf_strong"
    if lw != ls:
        return False, None, "inconsistent"
    return True, lw, "none"


def test_filter_examples():
    K = 10
    d = filter_pseudo(onehotish(0, K, 0.97, 3), onehotish(0, K, 0.96, 3), 0.95)
    assert d.accepted and d.pseudo_label == 3 and d.reject_reason is RejectReason.NONE
    d = filter_pseudo(onehotish(0, K, 0.97, 3), onehotish(0, K, 0.96, 5), 0.95)
    assert not d.accepted and d.reject_reason is RejectReason.INCONSISTENT
    d = filter_pseudo(onehotish(0, K, 0.97, 3), onehotish(0, K, 0.90, 3), 0.95)
    assert not d.accepted and d.reject_reason is RejectReason.LOW_CONF_STRONG
    d = filter_pseudo(onehotish(0, K, 0.90, 3), onehotish(0, K, 0.90, 4), 0.95)
    assert d.reject_reason is RejectReason.LOW_CONF_WEAK


def test_boundary_confidence_rejected():
    p = np.array([0.75, 0.25])
    assert not filter_pseudo(p, p, 0.75).accepted
    assert filter_pseudo(p, p, 0.7499).accepted


def test_filter_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    mismatches = 0
    for i in range(10_000):
        K = int(rng.integers(2, 12))
        conc = rng.choice([0.05, 0.3, 1.0])
        p_w = rng.dirichlet(np.full(K, conc))
        p_s = rng.dirichlet(np.full(K, conc)) if rng.random() < 0.5 else np.roll(p_w, int(rng.integers(0, 2)))
        tau = float(rng.choice([rng.uniform(0.05, 0.99), 0.95, float(p_w.max())]))
        if not 0 < tau < 1:
            continue
        d = filter_pseudo(p_w, p_s, tau)
        ok, label, reason = brute_force_decision(p_w, p_s, tau)
        mismatches += (d.accepted, d.pseudo_label, d.reject_reason.value) != (ok, label, reason)
    assert mismatches == 0


def test_tie_broken_by_lowest_index():
    p = np.array([0.0, 0.5, 0.5])
    d = filter_pseudo(p, p, 0.4)
    assert d.accepted and d.pseudo_label == 1


def test_non_simplex_rejected():
    with pytest.raises(ValueError):
        filter_pseudo(np.array([0.7, 0.7]), np.array([0.5, 0.5]), 0.5)
    with pytest.raises(ValueError):
        filter_pseudo(np.array([1.2, -0.2]), np.array([0.5, 0.5]), 0.5)
    with pytest.raises(ValueError):
        filter_pseudo(np.array([0.5, 0.5]), np.array([0.5, 0.5]), 1.0)


@settings(max_examples=200, deadline=None)
@given(K=st.integers(2, 8), seed=st.integers(0, 2**31), tau1=st.floats(0.01, 0.99), frac=st.floats(0, 1))
def test_acceptance_monotone_in_tau(K, seed, tau1, frac):
    rng = np.random.default_rng(seed)
    p_w, p_s = rng.dirichlet(np.full(K, 0.2)), rng.dirichlet(np.full(K, 0.2))
    tau2 = tau1 * frac
    if filter_pseudo(p_w, p_s, tau1).accepted and tau2 > 0:
        assert filter_pseudo(p_w, p_s, tau2).accepted


@settings(max_examples=200, deadline=None)
@given(K=st.integers(2, 8), seed=st.integers(0, 2**31))
def test_class_permutation_equivariance(K, seed):
    rng = np.random.default_rng(seed)
    p_w = rng.dirichlet(np.full(K, 0.1))
    p_s = p_w if rng.random() < 0.5 else rng.dirichlet(np.full(K, 0.1))
    perm = rng.permutation(K)
    a = filter_pseudo(p_w, p_s, 0.6)
    b = filter_pseudo(p_w[perm], p_s[perm], 0.6)
    assert a.accepted == b.accepted
    if a.accepted:
        assert perm[b.pseudo_label] == a.pseudo_label


def test_weak_only_filter_never_reports_strong_reasons():
    rng = np.random.default_rng(1)
    p_w = torch.from_numpy(rng.dirichlet(np.full(4, 0.1), size=500))
    dec = filter_batch(p_w, None, 0.9, consistency=False)
    reasons = {dec[i].reject_reason for i in range(len(dec))}
    assert reasons <= {RejectReason.NONE, RejectReason.LOW_CONF_WEAK}
    assert torch.equal(dec.accepted, p_w.max(-1).values > 0.9)


class FixedLogits(nn.Module):
    """Logits read from the first pixel's channels, scaled."""

    def __init__(self, scale=20.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(scale))

    def forward(self, x):
        return x[:, 0, 0, :] * self.scale


def test_predict_probs_on_simplex_and_argmax():
    model = FixedLogits(1.0)
    x = torch.randn(32, 4, 4, 3)
    p = predict_probs(model, x)
    torch.testing.assert_close(p.sum(-1), torch.ones(32))
    assert (p >= 0).all()
    assert torch.equal(p.argmax(-1), model(x).argmax(-1))
    uniform = predict_probs(model, torch.zeros(2, 4, 4, 10))
    torch.testing.assert_close(uniform, torch.full((2, 10), 0.1))
    assert not p.requires_grad


def test_pseudo_loss_does_not_flow_through_weak_view():
    model = FixedLogits()
    weak = torch.zeros(4, 2, 2, 3)
    weak[:, 0, 0, 1] = 1.0
    weak.requires_grad_(True)
    strong = weak.detach().clone()
    strong[:2, 0, 0, 1] = 0.9
    strong.requires_grad_(True)
    losses, dec = pseudo_label_losses(model, weak, strong, tau=0.95)
    assert dec.accepted.all()
    losses.sum().backward()
    assert weak.grad is None or torch.count_nonzero(weak.grad) == 0
    assert strong.grad is not None and torch.count_nonzero(strong.grad) > 0


def test_filter_stats_accumulate():
    p = torch.tensor([[0.99, 0.01], [0.5, 0.5], [0.02, 0.98]])
    q = torch.tensor([[0.99, 0.01], [0.5, 0.5], [0.97, 0.03]])
    stats = FilterStats(2)
    stats.update(filter_batch(p, q, 0.95))
    d = stats.as_dict()
    assert d["filter_seen"] == 3 and d["filter_accepted"] == 1
    assert d["filter_rejects"] == {"low_conf_weak": 1, "low_conf_strong": 0, "inconsistent": 1}
    assert d["pseudo_class_hist"] == [1, 0]


# -- augmentation -------------------------------------------------------------

def test_policies():
    w, s = AugPolicy.weak(32), AugPolicy.strong(32)
    assert (w.crop_pad, w.flip_p, w.n_ops, w.erase_p) == (4, 0.5, 0, 0.0)
    assert (s.crop_pad, s.flip_p, s.n_ops, s.erase_p) == (4, 0.5, 2, 0.25)
    assert set(s.ops) == set(STRONG_OPS)
    with pytest.raises(ValueError):
        AugPolicy(ops=("warp",))


def test_identity_policies_leave_image_unchanged():
    img = torch.rand(16, 16, 3)
    assert torch.equal(augment(img, AugPolicy.identity(), seed=0), img)
    noop_strong = AugPolicy(kind="strong", crop_pad=0, flip_p=0.0, n_ops=2,
                            ops=("rotate", "translate", "shear", "brightness", "contrast", "saturation"),
                            rotate_deg=0.0, translate_frac=0.0, shear_deg=0.0, jitter=0.0, erase_p=0.0)
    for seed in range(5):
        assert torch.equal(augment(img, noop_strong, seed=seed), img)


@pytest.mark.parametrize("policy", [AugPolicy.weak(16), AugPolicy.strong(16)])
def test_augment_deterministic_shape_preserving(policy):
    x = torch.rand(8, 16, 16, 3)
    a, b = augment_batch(x, policy, 42), augment_batch(x, policy, 42)
    assert a.shape == x.shape and torch.equal(a, b)
    assert torch.isfinite(a).all() and a.min() >= 0 and a.max() <= 1
    assert not torch.equal(augment_batch(x, policy, 43), a)


def test_weak_preserves_constant_image():
    img = torch.full((16, 16, 3), 0.3)
    for seed in range(10):
        assert torch.equal(augment(img, AugPolicy.weak(16), seed), img)


def test_weak_only_moves_pixels():
    img = torch.rand(32, 32, 3)
    out = augment(img, AugPolicy.weak(32), seed=3)
    vals = set(img.reshape(-1).tolist())
    assert set(out.reshape(-1).tolist()) <= vals


def test_strong_changes_images():
    x = torch.rand(16, 16, 16, 3)
    out = augment_batch(x, AugPolicy.strong(16), 0)
    weak = augment_batch(x, AugPolicy.weak(16), 0)
    assert not torch.equal(out, weak)
