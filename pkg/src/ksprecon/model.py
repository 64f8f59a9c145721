"""Domain types shared by every stage: k-space slices, masks, coil maps, images.

All arrays are stored read-only so instances can be handed between pipeline
threads without copying.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class ModelError(ValueError):
    """A domain object was constructed with inconsistent contents."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def validate_slice(s) -> Optional[str]:
    """Check the KSpaceSlice invariants on any object exposing its fields.

    Returns None when every invariant holds, otherwise a short description of
    the first violation ("length mismatch", "non-finite sample", ...).
    """
    if s.slice_index < 0:
        return "negative slice_index"
    for name in ("num_coils", "num_pe", "num_ro"):
        if getattr(s, name) < 1:
            return f"non-positive {name}"
    data = np.asarray(s.data)
    if data.size != s.num_coils * s.num_pe * s.num_ro:
        return "length mismatch"
    if not np.all(np.isfinite(data)):
        return "non-finite sample"
    return None


@dataclass(frozen=True)
class KSpaceSlice:
    """Multi-coil Cartesian k-space for one 2-D slice, laid out (coil, pe, ro)."""

    slice_index: int
    num_coils: int
    num_pe: int
    num_ro: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        problem = validate_slice(self)
        if problem is not None:
            raise ModelError(f"invalid k-space slice {self.slice_index}: {problem}")
        data = np.asarray(self.data, dtype=np.complex64).reshape(
            self.num_coils, self.num_pe, self.num_ro
        )
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, slice_index: int, data: np.ndarray) -> "KSpaceSlice":
        data = np.asarray(data)
        if data.ndim != 3:
            raise ModelError(f"expected (coil, pe, ro) array, got shape {data.shape}")
        return cls(slice_index, *data.shape, data=data)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Phase-encode line pattern. ``acs_range`` is inclusive, or None."""

    num_pe: int
    acquired: np.ndarray = field(repr=False)
    acs_range: Optional[Tuple[int, int]]
    nominal_rate: float

    def __post_init__(self):
        acquired = np.asarray(self.acquired, dtype=bool).reshape(-1)
        if self.num_pe < 1 or acquired.size != self.num_pe:
            raise ModelError(f"mask has {acquired.size} entries for num_pe={self.num_pe}")
        if not acquired.any():
            raise ModelError("mask acquires no lines")
        if self.acs_range is not None:
            lo, hi = self.acs_range
            if not (0 <= lo <= hi < self.num_pe):
                raise ModelError(f"acs_range {self.acs_range} outside [0, {self.num_pe})")
            if not acquired[lo : hi + 1].all():
                raise ModelError(f"acs_range {self.acs_range} contains skipped lines")
            object.__setattr__(self, "acs_range", (int(lo), int(hi)))
        if not self.nominal_rate > 0:
            raise ModelError(f"nominal_rate must be positive, got {self.nominal_rate}")
        if self.nominal_rate > 1:
            expected = self.num_pe / self.nominal_rate
            if abs(int(acquired.sum()) - expected) > 1:
                raise ModelError(
                    f"{int(acquired.sum())} acquired lines inconsistent with "
                    f"rate {self.nominal_rate} over {self.num_pe} lines"
                )
        object.__setattr__(self, "nominal_rate", float(self.nominal_rate))
        object.__setattr__(self, "acquired", _frozen(acquired))

    @classmethod
    def full(cls, num_pe: int, acs_range: Optional[Tuple[int, int]] = None) -> "SamplingMask":
        return cls(num_pe, np.ones(num_pe, dtype=bool), acs_range, 1.0)

    @property
    def num_acquired(self) -> int:
        return int(self.acquired.sum())

    @property
    def achieved_rate(self) -> float:
        return self.num_pe / self.num_acquired

    @property
    def num_acs(self) -> int:
        if self.acs_range is None:
            return 0
        return self.acs_range[1] - self.acs_range[0] + 1

    def is_full(self) -> bool:
        return bool(self.acquired.all())

    def is_acs(self, line: int) -> bool:
        return self.acs_range is not None and self.acs_range[0] <= line <= self.acs_range[1]

    def to_string(self) -> str:
        return "".join("1" if a else "0" for a in self.acquired)

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            (self.num_pe, self.acs_range, self.nominal_rate) == (other.num_pe, other.acs_range, other.nominal_rate)
            and np.array_equal(self.acquired, other.acquired)
        )

    __hash__ = None


@dataclass(frozen=True)
class CoilSensitivityMaps:
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex64)
        if data.ndim != 3:
            raise ModelError(f"expected (coil, pe, ro) maps, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ModelError("sensitivity maps contain non-finite values")
        rss = np.sqrt(np.sum(np.abs(data.astype(np.complex128)) ** 2, axis=0))
        if rss.max() > 1 + 1e-3:
            raise ModelError(f"sensitivity maps not normalized (max RSS {rss.max():.6f})")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def num_coils(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ComplexImage:
    slice_index: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.complex64)
        if pixels.ndim != 2:
            raise ModelError(f"expected 2-D image, got shape {pixels.shape}")
        object.__setattr__(self, "pixels", _frozen(pixels))


@dataclass(frozen=True)
class MagnitudeImage:
    slice_index: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2:
            raise ModelError(f"expected 2-D image, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or (pixels < 0).any():
            raise ModelError("magnitude image must be finite and non-negative")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]


def normalize_magnitude(img: MagnitudeImage) -> MagnitudeImage:
    """Scale so the brightest pixel is 1. An all-zero image is returned as is."""
    peak = float(img.pixels.max())
    if peak <= 0:
        return img
    if peak == 1.0:
        return img
    return MagnitudeImage(img.slice_index, img.pixels / np.float32(peak))
