"""Stochastic masking policies for the three training objectives.

Spans are half-open global index ranges (start, stop) into one sequence. A
policy picks positions only; the apply helpers corrupt the actual buffers and
hand back the originals as reconstruction targets.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import MaskPolicyError

REPLACE_MASK_TOKEN = "mask_token"
REPLACE_GAUSSIAN_NOISE = "gaussian_noise"

MNTP_RATIO = 0.20
MAE_RATIO = 0.50
BLOCKB_RATIO = 0.70
SHORT_BLOCKB_LIMIT = 4  # below this length the whole block is masked


def round_half_up(x: float) -> int:
    """round() is banker's rounding; mask counts need 3.5 -> 4."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    masked_positions: tuple        # sorted unique global indices
    replacement: str               # REPLACE_MASK_TOKEN | REPLACE_GAUSSIAN_NOISE
    seed_record: str = ""
    noise_std: float = 0.0

    def __post_init__(self):
        pos = tuple(int(p) for p in self.masked_positions)
        if sorted(set(pos)) != list(pos):
            raise MaskPolicyError(f"positions not sorted-unique: {pos}")
        object.__setattr__(self, "masked_positions", pos)


def _check_span(span) -> tuple:
    start, stop = int(span[0]), int(span[1])
    if stop <= start:
        raise MaskPolicyError(f"empty span ({start}, {stop})")
    return start, stop


def _draw(eligible, count, rng) -> tuple:
    if count > len(eligible):
        raise MaskPolicyError(
            f"need {count} positions but only {len(eligible)} eligible")
    picked = rng.choice(len(eligible), size=count, replace=False)
    return tuple(sorted(int(eligible[i]) for i in picked))


def mntp_mask(text_span, rng, ratio: float = MNTP_RATIO,
              seed_record: str = "") -> MaskPlan:
    """Mask max(1, round(ratio*len)) text positions for shifted prediction.

    Global position 0 is never eligible: its predecessor state, which the
    shifted head would read, does not exist.
    """
    start, stop = _check_span(text_span)
    n = stop - start
    count = max(1, round_half_up(ratio * n))
    eligible = [i for i in range(start, stop) if i != 0]
    return MaskPlan(_draw(eligible, count, rng), REPLACE_MASK_TOKEN,
                    seed_record)


def mae_mask(patch_span, rng, ratio: float = MAE_RATIO,
             noise_std: float = 1.0, seed_record: str = "") -> MaskPlan:
    """Mask max(1, round(ratio*len)) patch positions for noise corruption."""
    start, stop = _check_span(patch_span)
    n = stop - start
    count = max(1, round_half_up(ratio * n))
    return MaskPlan(_draw(list(range(start, stop)), count, rng),
                    REPLACE_GAUSSIAN_NOISE, seed_record, noise_std=noise_std)


def blockb_mask(blockb_span, rng, ratio: float = BLOCKB_RATIO,
                seed_record: str = "") -> MaskPlan:
    """Aggressive reconstruction-side masking: spans shorter than 4 are
    masked entirely, otherwise round(ratio*len) positions."""
    start, stop = _check_span(blockb_span)
    n = stop - start
    if n < SHORT_BLOCKB_LIMIT:
        positions = tuple(range(start, stop))
    else:
        positions = _draw(list(range(start, stop)), round_half_up(ratio * n),
                          rng)
    return MaskPlan(positions, REPLACE_MASK_TOKEN, seed_record)


# ---------------------------------------------------------------------------
# plan application
# ---------------------------------------------------------------------------

def apply_token_mask(tokens: np.ndarray, plan: MaskPlan,
                     mask_token_id: int):
    """Replace planned positions with the mask token.

    Returns (corrupted copy, {position: original token id}).
    """
    if plan.replacement != REPLACE_MASK_TOKEN:
        raise MaskPolicyError(f"token apply on a {plan.replacement} plan")
    out = tokens.copy()
    targets = {}
    for p in plan.masked_positions:
        targets[p] = int(tokens[p])
        out[p] = mask_token_id
    return out, targets


def apply_patch_noise(patches: np.ndarray, plan: MaskPlan, span_start: int,
                      rng):
    """Overwrite planned patch rows with zero-mean Gaussian noise.

    `patches` holds one row per position of the visual span starting at
    global index `span_start`. Returns (corrupted copy,
    {position: original row}).
    """
    if plan.replacement != REPLACE_GAUSSIAN_NOISE:
        raise MaskPolicyError(f"patch apply on a {plan.replacement} plan")
    out = patches.copy()
    targets = {}
    for p in plan.masked_positions:
        row = p - span_start
        targets[p] = patches[row].copy()
        out[row] = rng.normal(0.0, plan.noise_std, size=patches.shape[1])
    return out, targets
