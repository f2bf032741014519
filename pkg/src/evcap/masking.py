"""Geometric masking of univariate series.

A two-state Markov chain walks the time axis: in the masked state it stays
with probability 1 - 1/l_m, in the unmasked state with 1 - 1/l_u where
l_u = l_m * (1 - r) / r. Run lengths are then geometric with means l_m and
l_u, and the expected masked fraction is exactly r. For r close to 1 the
unmasked mean run l_u drops below one step and the realized fraction
saturates at l_m / (l_m + 1); the default working point r = 0.5 is far
from this regime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class MaskSpec:
    """Boolean mask over one series; True marks a masked (zeroed) position.

    The mask is carried alongside the masked values and is never inferred
    back from zeros in the data.
    """

    mask: np.ndarray
    ratio: float
    mean_masked_run: float


def geometric_mask(length: int, ratio: float, mean_masked_run: float, rng: np.random.Generator) -> MaskSpec:
    """Draw a mask of `length` positions with target masked fraction `ratio`."""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1], got {ratio}")
    if mean_masked_run < 1.0:
        raise ParameterError(f"mean masked run must be >= 1, got {mean_masked_run}")
    if length <= 0:
        raise ParameterError(f"mask length must be positive, got {length}")

    if ratio == 0.0:
        return MaskSpec(np.zeros(length, dtype=bool), ratio, mean_masked_run)
    if ratio == 1.0:
        return MaskSpec(np.ones(length, dtype=bool), ratio, mean_masked_run)

    p_masked = 1.0 / mean_masked_run
    p_unmasked = 1.0 / (mean_masked_run * (1.0 - ratio) / ratio)
    draws = rng.random(length + 1)

    mask = np.empty(length, dtype=bool)
    masked = draws[0] < ratio  # initial state
    for t in range(length):
        mask[t] = masked
        if draws[t + 1] < (p_masked if masked else p_unmasked):
            masked = not masked
    return MaskSpec(mask, ratio, mean_masked_run)


def apply_mask(series: np.ndarray, masks: list[MaskSpec]) -> np.ndarray:
    """Zero out masked positions channel by channel; copies the input."""
    series = np.asarray(series)
    if series.ndim != 2:
        raise DimensionError(f"expected a (T, C) series, got shape {series.shape}")
    t_steps, channels = series.shape
    if len(masks) != channels:
        raise DimensionError(f"need {channels} channel masks, got {len(masks)}")
    out = series.copy()
    for c, spec in enumerate(masks):
        if spec.mask.shape != (t_steps,):
            raise DimensionError(
                f"channel {c} mask length {spec.mask.shape} does not match T={t_steps}"
            )
        out[spec.mask, c] = 0.0
    return out
