"""Masking policies: exact count laws (exhaustive), frequency and moment
estimates against the RNG's nominal distributions."""

import numpy as np
import numpy.testing as npt
import pytest

from eosbridge.errors import MaskPolicyError
from eosbridge.masking import (MaskPlan, apply_patch_noise, apply_token_mask,
                               blockb_mask, mae_mask, mntp_mask,
                               round_half_up)


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(3.5) == 4  # stdlib round() would give 4 here but 2 for 2.5
    assert round_half_up(2.8) == 3
    assert round_half_up(2.49999) == 2
    assert round_half_up(7.0) == 7


# ---------------------------------------------------------------------------
# count laws
# ---------------------------------------------------------------------------

def test_mntp_count_law_exhaustive():
    rng = np.random.default_rng(0)
    for n in range(1, 65):
        plan = mntp_mask((5, 5 + n), rng)
        assert len(plan.masked_positions) == max(1, round_half_up(0.2 * n))
        assert all(5 <= p < 5 + n for p in plan.masked_positions)


def test_mntp_len10_masks_2():
    plan = mntp_mask((3, 13), np.random.default_rng(1))
    assert len(plan.masked_positions) == 2


def test_mntp_len1_masks_1():
    plan = mntp_mask((7, 8), np.random.default_rng(1))
    assert plan.masked_positions == (7,)


def test_mntp_never_masks_position_zero():
    rng = np.random.default_rng(2)
    for _ in range(500):
        plan = mntp_mask((0, 6), rng)
        assert 0 not in plan.masked_positions


def test_mntp_span_of_only_position_zero_errors():
    with pytest.raises(MaskPolicyError):
        mntp_mask((0, 1), np.random.default_rng(0))


def test_mae_count_law_exhaustive():
    rng = np.random.default_rng(3)
    for n in range(1, 65):
        plan = mae_mask((0, n), rng)
        assert len(plan.masked_positions) == max(1, round_half_up(0.5 * n))


def test_mae_16_patches_masks_8():
    plan = mae_mask((2, 18), np.random.default_rng(4))
    assert len(plan.masked_positions) == 8


def test_blockb_count_law_exhaustive():
    rng = np.random.default_rng(5)
    for n in range(1, 65):
        plan = blockb_mask((9, 9 + n), rng)
        expected = n if n < 4 else round_half_up(0.7 * n)
        assert len(plan.masked_positions) == expected


def test_blockb_short_spans_fully_masked():
    for n in (1, 2, 3):
        plan = blockb_mask((10, 10 + n), np.random.default_rng(6))
        assert plan.masked_positions == tuple(range(10, 10 + n))


def test_blockb_len10_masks_7():
    plan = blockb_mask((4, 14), np.random.default_rng(7))
    assert len(plan.masked_positions) == 7


def test_blockb_len4_masks_3():
    plan = blockb_mask((4, 8), np.random.default_rng(8))
    assert len(plan.masked_positions) == 3


def test_empty_span_errors():
    rng = np.random.default_rng(9)
    for fn in (mntp_mask, mae_mask, blockb_mask):
        with pytest.raises(MaskPolicyError):
            fn((4, 4), rng)


# ---------------------------------------------------------------------------
# determinism and plan hygiene
# ---------------------------------------------------------------------------

def test_determinism_under_seed():
    for fn, span in ((mntp_mask, (0, 30)), (mae_mask, (2, 20)),
                     (blockb_mask, (5, 25))):
        a = fn(span, np.random.default_rng(42))
        b = fn(span, np.random.default_rng(42))
        assert a == b


def test_plans_are_sorted_unique():
    rng = np.random.default_rng(10)
    for _ in range(100):
        plan = blockb_mask((3, 33), rng)
        assert list(plan.masked_positions) == sorted(set(plan.masked_positions))


def test_stage2_policy_never_touches_block_a():
    # block A occupies [0, 7), bridge at 7, block B at [8, 20)
    rng = np.random.default_rng(11)
    for _ in range(200):
        plan = blockb_mask((8, 20), rng)
        assert min(plan.masked_positions) >= 8


def test_mask_plan_rejects_unsorted():
    with pytest.raises(MaskPolicyError):
        MaskPlan((3, 1), "mask_token")
    with pytest.raises(MaskPolicyError):
        MaskPlan((1, 1), "mask_token")


# ---------------------------------------------------------------------------
# sampling statistics
# ---------------------------------------------------------------------------

def test_mntp_selection_frequency_uniform():
    # span starts at 0 so position 0 is excluded: 10 of 49 eligible per draw
    rng = np.random.default_rng(12)
    draws = 10_000
    counts = np.zeros(50)
    for _ in range(draws):
        for p in mntp_mask((0, 50), rng).masked_positions:
            counts[p] += 1
    assert counts[0] == 0
    expected = draws * 10 / 49
    npt.assert_allclose(counts[1:], expected, rtol=0.10)


def test_mae_noise_moments():
    rng = np.random.default_rng(13)
    patches = np.zeros((40, 12))
    samples = []
    while len(samples) * 12 < 100_000 // 12 * 12:
        plan = mae_mask((0, 40), rng)
        corrupted, targets = apply_patch_noise(patches, plan, 0, rng)
        for p in plan.masked_positions:
            samples.append(corrupted[p])
    flat = np.concatenate(samples)[:100_000]
    assert abs(flat.mean()) <= 0.02
    assert abs(flat.std() - 1.0) <= 0.02


# ---------------------------------------------------------------------------
# plan application
# ---------------------------------------------------------------------------

def test_apply_token_mask():
    tokens = np.arange(10, 20, dtype=np.int64)
    plan = MaskPlan((2, 5), "mask_token")
    out, targets = apply_token_mask(tokens, plan, mask_token_id=1)
    assert out[2] == 1 and out[5] == 1
    assert targets == {2: 12, 5: 15}
    assert tokens[2] == 12  # input untouched


def test_apply_patch_noise_targets_exact():
    rng = np.random.default_rng(14)
    patches = rng.normal(size=(6, 4))
    plan = mae_mask((10, 16), np.random.default_rng(15))
    corrupted, targets = apply_patch_noise(patches, plan, 10, rng)
    for p, original in targets.items():
        npt.assert_array_equal(original, patches[p - 10])
        assert not np.array_equal(corrupted[p - 10], patches[p - 10])
    untouched = [i for i in range(6) if (i + 10) not in targets]
    npt.assert_array_equal(corrupted[untouched], patches[untouched])


def test_apply_wrong_modality_errors():
    with pytest.raises(MaskPolicyError):
        apply_token_mask(np.zeros(4, dtype=np.int64),
                         MaskPlan((1,), "gaussian_noise", noise_std=1.0), 1)
    with pytest.raises(MaskPolicyError):
        apply_patch_noise(np.zeros((4, 3)), MaskPlan((1,), "mask_token"), 0,
                          np.random.default_rng(0))
