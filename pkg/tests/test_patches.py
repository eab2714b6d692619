import itertools
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ssmae.patches import (
    MaskPlan,
    gather_visible,
    make_mask_plan,
    patchify,
    unpatchify,
    unshuffle_tokens,
)


def plan_from(perm, num_visible):
    return MaskPlan(np.asarray(perm, dtype=np.int64), num_visible)


def brute_gather(tokens, perm, n_vis):
    return np.stack([tokens[perm[j]] for j in range(n_vis)]) if n_vis else tokens[:0]


def brute_scatter(visible, fill, perm, n_vis, N):
    out = [None] * N
    for j in range(n_vis):
        out[perm[j]] = visible[j]
    for j in range(n_vis, N):
        out[perm[j]] = fill
    return np.stack(out)


@pytest.mark.parametrize("H,C,P,N,width", [(224, 3, 16, 196, 768), (32, 3, 16, 4, 768), (16, 3, 16, 1, 768)])
def test_patchify_shapes(H, C, P, N, width):
    grid = patchify(np.zeros((H, H, C)), P)
    assert grid.shape == (N, width)


def test_single_patch_is_flattened_image():
    img = np.arange(4 * 4 * 3).reshape(4, 4, 3)
    np.testing.assert_array_equal(patchify(img, 4)[0], img.reshape(-1))
    np.testing.assert_array_equal(unpatchify(img.reshape(1, -1), 4, 4, 3, 4), img)


def test_raster_order_and_row_major_flattening():
    img = np.arange(4 * 6 * 2).reshape(4, 6, 2)
    grid = patchify(img, 2)
    # patch 4 is patch-row 1, patch-col 1
    np.testing.assert_array_equal(grid[4], img[2:4, 2:4].reshape(-1))
    np.testing.assert_array_equal(grid[2], img[0:2, 4:6].reshape(-1))


def test_not_divisible_names_dimensions():
    with pytest.raises(ValueError, match=r"H=30.*W=32.*P=16"):
        patchify(np.zeros((30, 32, 3)), 16)


def test_unpatchify_rejects_inconsistent_shape():
    with pytest.raises(ValueError):
        unpatchify(np.zeros((3, 48)), 8, 8, 3, 4)


def test_unpatchify_zeros():
    assert not unpatchify(np.zeros((4, 48)), 8, 8, 3, 4).any()


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), P=st.integers(1, 5), C=st.integers(1, 4),
       seed=st.integers(0, 2**31))
def test_roundtrip_exact(h, w, P, C, seed):
    img = np.random.default_rng(seed).standard_normal((h * P, w * P, C))
    back = unpatchify(patchify(img, P), h * P, w * P, C, P)
    assert np.array_equal(back, img)
    t = torch.from_numpy(img)[None]
    assert torch.equal(unpatchify(patchify(t, P), h * P, w * P, C, P), t)


def test_mask_plan_examples():
    p = make_mask_plan(196, 0.75, seed=0)
    assert p.num_visible == 49 and len(p.masked_idx) == 147
    p0 = make_mask_plan(4, 0.0, seed=1)
    assert p0.num_visible == 4 and len(p0.masked_idx) == 0
    a, b = make_mask_plan(8, 0.75, seed=5), make_mask_plan(8, 0.75, seed=5)
    assert np.array_equal(a.permutation, b.permutation)


@pytest.mark.parametrize("r", [-0.1, 1.0, 1.5])
def test_mask_ratio_out_of_range(r):
    with pytest.raises(ValueError):
        make_mask_plan(16, r, seed=0)


def test_no_visible_patch_rejected():
    with pytest.raises(ValueError, match="no visible"):
        make_mask_plan(4, 0.9, seed=0)


def test_count_law_partition_all_small_and_random():
    for N in range(1, 257):
        for r in (0, 0.25, 0.5, 0.75, 0.9):
            want = int(N * (1 - Fraction(str(r))))
            if want == 0:
                continue
            plan = make_mask_plan(N, r, seed=N)
            assert plan.num_visible == want
            vis, msk = set(plan.visible_idx.tolist()), set(plan.masked_idx.tolist())
            assert not vis & msk and vis | msk == set(range(N))
            assert sorted(plan.permutation.tolist()) == list(range(N))


def test_batched_plans_are_permutations():
    plan = make_mask_plan(16, 0.75, seed=3, batch=5)
    assert plan.permutation.shape == (5, 16)
    for row in plan.permutation:
        assert sorted(row.tolist()) == list(range(16))
    assert plan.mask().sum(axis=1).tolist() == [12] * 5


def test_distinct_seeds_give_distinct_permutations():
    collisions = sum(
        np.array_equal(make_mask_plan(16, 0.5, seed=2 * i).permutation,
                       make_mask_plan(16, 0.5, seed=2 * i + 1).permutation)
        for i in range(200)
    )
    assert collisions <= 1


def test_gather_unshuffle_examples():
    tokens = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(gather_visible(tokens, plan_from([0, 1, 2, 3], 2)), tokens[:2])
    a, b, m = np.array([1.0, 1.0]), np.array([2.0, 2.0]), np.array([9.0, 9.0])
    out = unshuffle_tokens(np.stack([a, b]), m, plan_from([0, 2, 1, 3], 2))
    np.testing.assert_array_equal(out, np.stack([a, m, b, m]))
    full = plan_from([3, 1, 0, 2], 4)
    np.testing.assert_array_equal(unshuffle_tokens(gather_visible(tokens, full), m, full), tokens)


def test_gather_length_mismatch():
    with pytest.raises(ValueError):
        gather_visible(np.zeros((3, 2)), plan_from([0, 1, 2, 3], 2))
    with pytest.raises(ValueError):
        unshuffle_tokens(np.zeros((3, 2)), np.zeros(2), plan_from([0, 1, 2, 3], 2))


@pytest.mark.parametrize("N", [1, 2, 3, 4, 5])
def test_exhaustive_gather_scatter_against_brute_force(N):
    rng = np.random.default_rng(N)
    tokens = rng.standard_normal((N, 3))
    fill = rng.standard_normal(3)
    for perm in itertools.permutations(range(N)):
        for n_vis in range(1, N + 1):
            plan = plan_from(perm, n_vis)
            vis = gather_visible(tokens, plan)
            np.testing.assert_array_equal(vis, brute_gather(tokens, perm, n_vis))
            full = unshuffle_tokens(vis, fill, plan)
            np.testing.assert_array_equal(full, brute_scatter(vis, fill, perm, n_vis, N))
            np.testing.assert_array_equal(gather_visible(full, plan), vis)
            # torch path, batched form of the same plan
            tt = torch.from_numpy(tokens)[None].repeat(2, 1, 1)
            bplan = MaskPlan(np.stack([plan.permutation] * 2), n_vis)
            tv = gather_visible(tt, bplan)
            assert torch.equal(tv[1], torch.from_numpy(vis))
            tf = unshuffle_tokens(tv, torch.from_numpy(fill), bplan)
            assert torch.equal(tf[0], torch.from_numpy(full))


def test_batched_torch_gather_matches_per_sample():
    plan = make_mask_plan(10, 0.6, seed=4, batch=3)
    tokens = torch.randn(3, 10, 5)
    vis = gather_visible(tokens, plan)
    for b in range(3):
        single = MaskPlan(plan.permutation[b], plan.num_visible)
        assert torch.equal(vis[b], gather_visible(tokens[b], single))
