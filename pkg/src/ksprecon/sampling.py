"""Retrospective 1-D phase-encode undersampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .model import KSpaceSlice, SamplingMask

GENERATOR_NAME = "numpy.random.Generator(PCG64)"


class InvalidPolicyError(ValueError):
    pass


def default_acs_fraction(rate: float) -> float:
    return 0.08 if rate <= 4 else 0.04


@dataclass(frozen=True)
class MaskPolicy:
    nominal_rate: float
    acs_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.acs_fraction <= 1:
            raise InvalidPolicyError(f"acs_fraction must lie in (0, 1], got {self.acs_fraction}")
        if not 0 <= self.seed < 2**64:
            raise InvalidPolicyError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def for_rate(cls, rate: float, seed: int = 0) -> "MaskPolicy":
        return cls(rate, default_acs_fraction(rate), seed)

    def describe(self) -> dict:
        return {
            "rate": float(self.nominal_rate),
            "acs_fraction": float(self.acs_fraction),
            "seed": int(self.seed),
            "generator": GENERATOR_NAME,
        }


def acs_block(num_pe: int, num_acs: int) -> Tuple[int, int]:
    """Inclusive range of ``num_acs`` lines centred on ``num_pe // 2``.

    With an even count the extra line goes on the low-index side.
    """
    start = num_pe // 2 - num_acs // 2
    return start, start + num_acs - 1


def generate_mask(num_pe: int, policy: MaskPolicy, slice_index: int | None = None) -> SamplingMask:
    """Fully sampled centre plus uniformly random extra lines.

    The random stream is seeded from ``policy.seed`` alone, or from the pair
    (seed, slice_index) when a slice index is given so every slice gets its
    own reproducible pattern.
    """
    rate = policy.nominal_rate
    if num_pe < 4:
        raise InvalidPolicyError(f"num_pe >= 4 violated (num_pe={num_pe})")
    if not rate >= 1:
        raise InvalidPolicyError(f"nominal_rate >= 1 violated (rate={rate})")
    num_acs = math.ceil(num_pe * policy.acs_fraction)
    budget = math.floor(num_pe / rate)
    if num_acs > budget:
        raise InvalidPolicyError(
            f"ceil(num_pe*acs_fraction) <= floor(num_pe/rate) violated ({num_acs} > {budget})"
        )

    lo, hi = acs_block(num_pe, num_acs)
    acquired = np.zeros(num_pe, dtype=bool)
    acquired[lo : hi + 1] = True
    target = int(round(num_pe / rate))
    extra = target - num_acs
    if extra > 0:
        entropy = [policy.seed] if slice_index is None else [policy.seed, slice_index]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        candidates = np.flatnonzero(~acquired)
        acquired[rng.choice(candidates, size=extra, replace=False)] = True
    return SamplingMask(num_pe, acquired, (lo, hi), rate)


def apply_mask(kspace: KSpaceSlice, mask: SamplingMask) -> KSpaceSlice:
    if mask.num_pe != kspace.num_pe:
        raise ValueError(f"mask has {mask.num_pe} lines, slice has {kspace.num_pe}")
    data = np.where(mask.acquired[None, :, None], kspace.data, np.complex64(0))
    return KSpaceSlice(kspace.slice_index, kspace.num_coils, kspace.num_pe, kspace.num_ro, data)
