"""Synthetic multi-coil data with injected lesions.

The phantom is a body ellipse with a bright rim, a few darker interior
ellipses and small hyperintense discs ("lesions") placed on plain body
tissue. The rim keeps the image maximum the same on every slice, so
per-slice max normalisation puts lesions at a stable relative intensity.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import wire
from .detection import BoundingBox, GroundTruthAnnotation
from .model import KSpaceSlice, SamplingMask
from .recon import forward_operator
from .sampling import acs_block, apply_mask

RIM_INTENSITY = 0.9
BODY_INTENSITY = 0.3
INNER_INTENSITY_RANGE = (0.2, 0.4)
DEFAULT_CONTRAST = 0.35
RIM_THICKNESS = 0.03  # fraction of the image size


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Lesion:
    center: Tuple[float, float]  # (row, col)
    radius: float
    contrast: float = DEFAULT_CONTRAST


@dataclass(frozen=True)
class PhantomSpec:
    rows: int = 128
    cols: int = 128
    num_ellipses: int = 3
    lesions: Tuple[Lesion, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rows < 8 or self.cols < 8:
            raise PhantomSpecError(f"phantom must be at least 8x8, got {self.rows}x{self.cols}")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise_sigma must be non-negative")
        for les in self.lesions:
            if les.radius < 2:
                raise PhantomSpecError(f"lesion radius {les.radius} below 2 pixels")
            if not 0 < les.contrast <= 1:
                raise PhantomSpecError(f"lesion contrast {les.contrast} outside (0, 1]")


def _grid(rows: int, cols: int):
    return np.mgrid[0:rows, 0:cols].astype(np.float64)


def _ellipse(rr, cc, center, axes, angle=0.0) -> np.ndarray:
    dr, dc = rr - center[0], cc - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dc + sa * dr
    v = -sa * dc + ca * dr
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0


def _disc(rr, cc, center, radius) -> np.ndarray:
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def _anatomy(spec: PhantomSpec):
    """Background image and the mask of plain body tissue lesions may sit on."""
    rows, cols = spec.rows, spec.cols
    rr, cc = _grid(rows, cols)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    center = ((rows - 1) / 2, (cols - 1) / 2)
    outer = (0.44 * rows, 0.38 * cols)
    rim = RIM_THICKNESS * min(rows, cols)
    inner = (outer[0] - rim, outer[1] - rim)

    img = np.zeros((rows, cols))
    img[_ellipse(rr, cc, center, outer)] = RIM_INTENSITY
    body = _ellipse(rr, cc, center, inner)
    img[body] = BODY_INTENSITY
    plain = body.copy()
    for _ in range(spec.num_ellipses):
        axes = (rng.uniform(0.08, 0.16) * rows, rng.uniform(0.06, 0.12) * cols)
        off = (rng.uniform(-0.15, 0.15) * rows, rng.uniform(-0.12, 0.12) * cols)
        e = _ellipse(rr, cc, (center[0] + off[0], center[1] + off[1]), axes, rng.uniform(0, math.pi))
        e &= body
        img[e] = rng.uniform(*INNER_INTENSITY_RANGE)
        plain &= ~e
    return img, body, plain


def lesion_box(lesion: Lesion, rows: int, cols: int) -> BoundingBox:
    """Tight pixel-corner box around the rendered disc."""
    rr, cc = _grid(rows, cols)
    r_idx, c_idx = np.nonzero(_disc(rr, cc, lesion.center, lesion.radius))
    return BoundingBox(float(c_idx.min()), float(r_idx.min()), float(c_idx.max() + 1), float(r_idx.max() + 1))


def generate_phantom(spec: PhantomSpec) -> Tuple[np.ndarray, List[BoundingBox]]:
    img, body, _ = _anatomy(spec)
    rr, cc = _grid(spec.rows, spec.cols)
    boxes = []
    for les in spec.lesions:
        disc = _disc(rr, cc, les.center, les.radius)
        if not disc.any() or not body[disc].all():
            raise PhantomSpecError(f"lesion at {les.center} (r={les.radius}) leaves the phantom support")
        img[disc] += les.contrast
        boxes.append(lesion_box(les, spec.rows, spec.cols))
    return img.astype(np.float32), boxes


def place_lesions(
    rows: int, cols: int, count: int, seed: int, num_ellipses: int = 3,
    radius_range: Tuple[float, float] = (2.0, 4.0), contrast: float = DEFAULT_CONTRAST,
    spec_seed: Optional[int] = None,
) -> Tuple[Lesion, ...]:
    """Pick non-overlapping lesion sites fully on plain body tissue."""
    _, _, plain = _anatomy(PhantomSpec(rows, cols, num_ellipses, seed=seed if spec_seed is None else spec_seed))
    rr, cc = _grid(rows, cols)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1E51]))
    lesions: List[Lesion] = []
    occupied = np.zeros((rows, cols), dtype=bool)
    for _ in range(1000 * max(count, 1)):
        if len(lesions) == count:
            break
        radius = float(rng.uniform(*radius_range))
        center = (float(rng.uniform(0, rows - 1)), float(rng.uniform(0, cols - 1)))
        halo = _disc(rr, cc, center, radius + 3)
        if plain[halo].all() and not occupied[halo].any():
            lesions.append(Lesion(center, radius, contrast))
            occupied |= halo
    if len(lesions) < count:
        raise PhantomSpecError(f"could only place {len(lesions)} of {count} lesions")
    return tuple(lesions)


def simulate_coil_maps(num_coils: int, rows: int, cols: int) -> np.ndarray:
    """Smooth Gaussian coil profiles on a ring, with linear phase, RSS-normalised to 1."""
    if num_coils < 1:
        raise ValueError("need at least one coil")
    rr, cc = _grid(rows, cols)
    rr = rr / rows - 0.5
    cc = cc / cols - 0.5
    maps = np.empty((num_coils, rows, cols), dtype=np.complex128)
    for c in range(num_coils):
        theta = 2 * math.pi * c / num_coils
        r0, c0 = 0.6 * math.sin(theta), 0.6 * math.cos(theta)
        mag = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * 0.4**2))
        phase = math.pi * (math.cos(theta) * rr + math.sin(theta) * cc) + theta
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return (maps / rss[None]).astype(np.complex64)


def noise_scale(full_kspace: np.ndarray) -> float:
    """Largest modulus on the fully sampled centre phase-encode line."""
    return float(np.abs(full_kspace[:, full_kspace.shape[1] // 2, :]).max())


def simulate_acquisition(
    img: np.ndarray, sens: np.ndarray, mask: SamplingMask, noise_sigma: float = 0.0,
    seed: int = 0, slice_index: int = 0,
) -> KSpaceSlice:
    full = forward_operator(np.asarray(img, dtype=np.complex128), sens, np.ones(img.shape[0], dtype=bool))
    if noise_sigma > 0:
        std = noise_sigma * noise_scale(full)
        rng = np.random.default_rng(np.random.SeedSequence([seed, slice_index, 0xA015E]))
        noise = rng.standard_normal(full.shape) + 1j * rng.standard_normal(full.shape)
        full = full + (std / math.sqrt(2)) * noise
    ks = KSpaceSlice.from_array(slice_index, full.astype(np.complex64))
    return apply_mask(ks, mask)


@dataclass
class PhantomSlice:
    kspace: KSpaceSlice
    mask: SamplingMask
    image: np.ndarray = field(repr=False)
    boxes: List[BoundingBox]


def default_acs_range(num_pe: int, fraction: float = 0.08) -> Tuple[int, int]:
    return acs_block(num_pe, max(1, math.ceil(num_pe * fraction)))


def simulate_dataset(
    size: int = 128, coils: int = 8, slices: int = 16, lesions: int = 8,
    noise: float = 0.002, seed: int = 0, contrast: float = DEFAULT_CONTRAST,
) -> List[PhantomSlice]:
    """Fully sampled phantom volume; lesions spread one per slice where possible."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15]))
    per_slice = np.zeros(slices, dtype=int)
    if slices:
        order = rng.permutation(slices)
        for k in range(lesions):
            per_slice[order[k % slices]] += 1
    sens = simulate_coil_maps(coils, size, size)
    mask = SamplingMask.full(size, default_acs_range(size))
    out = []
    for s in range(slices):
        slice_seed = int(rng.integers(0, 2**32))
        les = place_lesions(size, size, int(per_slice[s]), slice_seed, contrast=contrast)
        spec = PhantomSpec(size, size, 3, les, noise, slice_seed)
        img, boxes = generate_phantom(spec)
        ks = simulate_acquisition(img, sens, mask, noise, slice_seed, s)
        out.append(PhantomSlice(ks, mask, img, boxes))
    return out


def dataset_config(num_coils: int, num_pe: int, num_ro: int, **extra) -> str:
    doc = {"encoding": {"num_coils": num_coils, "num_pe": num_pe, "num_ro": num_ro}}
    doc.update(extra)
    return json.dumps(doc, sort_keys=True)


def dataset_messages(slices: Sequence[Tuple[KSpaceSlice, SamplingMask]], config_extra: Optional[dict] = None):
    """Config, one Acquisition per acquired line (ACS and last-line flags set), Close."""
    if not slices:
        raise ValueError("dataset needs at least one slice")
    first = slices[0][0]
    yield wire.Config(dataset_config(first.num_coils, first.num_pe, first.num_ro, **(config_extra or {})))
    scan = 0
    for ks, mask in slices:
        lines = np.flatnonzero(mask.acquired)
        for line in lines:
            flags = wire.FLAG_ACS if mask.is_acs(int(line)) else 0
            if line == lines[-1]:
                flags |= wire.FLAG_LAST_IN_SLICE
            yield wire.Acquisition(scan, ks.slice_index, int(line), flags, ks.data[:, line, :])
            scan += 1
    yield wire.Close()


def write_dataset(slices: Sequence[Tuple[KSpaceSlice, SamplingMask]], path, config_extra: Optional[dict] = None) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        for msg in dataset_messages(slices, config_extra):
            fh.write(wire.encode_message(msg))
    return path


def ground_truth_annotations(phantom: Sequence[PhantomSlice]) -> List[GroundTruthAnnotation]:
    return [
        GroundTruthAnnotation(p.kspace.slice_index, box, 0) for p in phantom for box in p.boxes
    ]
