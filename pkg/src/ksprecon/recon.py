"""Fourier kernels, SENSE encoding operator, zero-fill and CG-SENSE.

Arrays follow the (coil, pe, ro) layout of :class:`KSpaceSlice`; images are
(pe, ro). Accumulation is done in complex128 and results are returned in that
precision; callers that store or transmit cast to 32-bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
import scipy.fft as sfft

from .model import SamplingMask

MaskLike = Union[SamplingMask, np.ndarray]


class ShapeError(ValueError):
    pass


class SensitivityEstimationError(ValueError):
    pass


class NumericalDivergenceError(ArithmeticError):
    def __init__(self, iteration: int, message: str = "non-finite value in CG-SENSE"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class CgConfig:
    """Solver settings. ``variant`` picks the Krylov update rule.

    "cr" (conjugate residual) minimises the residual norm over the Krylov
    space, so the recorded residuals never increase. "cg" is the textbook
    update; it minimises the energy norm of the error and its residual can
    rise between iterations on ill-conditioned systems.
    """

    lam: float = 0.01
    max_iters: int = 50
    rel_tol: float = 1e-6
    variant: str = "cr"

    def __post_init__(self):
        if self.variant not in ("cr", "cg"):
            raise ValueError(f"variant must be 'cr' or 'cg', got {self.variant!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not 1 <= self.max_iters <= 10000:
            raise ValueError(f"max_iters must lie in [1, 10000], got {self.max_iters}")
        if not 0 < self.rel_tol < 1:
            raise ValueError(f"rel_tol must lie in (0, 1), got {self.rel_tol}")


@dataclass
class CgTrace:
    residual_norms: List[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False


def fft2c(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Centred orthonormal 2-D DFT over the last two axes (DC at rows//2, cols//2)."""
    axes = (-2, -1)
    tmp = sfft.ifftshift(x, axes=axes)
    transform = sfft.ifft2 if inverse else sfft.fft2
    tmp = transform(tmp, axes=axes, norm="ortho", workers=-1)
    return sfft.fftshift(tmp, axes=axes)


def ifft2c(x: np.ndarray) -> np.ndarray:
    return fft2c(x, inverse=True)


def _lines(mask: MaskLike, num_pe: int) -> np.ndarray:
    lines = mask.acquired if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)
    if lines.shape != (num_pe,):
        raise ShapeError(f"mask covers {lines.shape[0]} lines, data has {num_pe}")
    return lines[:, None]


def _check_maps(sens: np.ndarray, image_shape: Tuple[int, int]) -> np.ndarray:
    sens = np.asarray(getattr(sens, "data", sens))
    if sens.ndim != 3 or sens.shape[1:] != tuple(image_shape):
        raise ShapeError(f"sensitivity maps {sens.shape} do not match image {tuple(image_shape)}")
    return sens


def forward_operator(x: np.ndarray, sens: np.ndarray, mask: MaskLike) -> np.ndarray:
    """Apply A: image -> masked multi-coil k-space."""
    x = np.asarray(x)
    sens = _check_maps(sens, x.shape)
    lines = _lines(mask, x.shape[0])
    k = fft2c(sens.astype(np.complex128) * x[None])
    return np.where(lines[None], k, 0)


def adjoint_operator(f: np.ndarray, sens: np.ndarray, mask: MaskLike) -> np.ndarray:
    """Apply A^H: masked multi-coil k-space -> image."""
    f = np.asarray(f)
    sens = _check_maps(sens, f.shape[1:])
    if sens.shape[0] != f.shape[0]:
        raise ShapeError(f"{sens.shape[0]} maps for {f.shape[0]} coils")
    lines = _lines(mask, f.shape[1])
    coil_images = ifft2c(np.where(lines[None], f.astype(np.complex128), 0))
    return np.sum(np.conj(sens.astype(np.complex128)) * coil_images, axis=0)


def rss_combine(coil_images: Sequence[np.ndarray]) -> np.ndarray:
    if len(coil_images) == 0:
        raise ShapeError("rss_combine needs at least one coil image")
    shapes = {np.shape(c) for c in coil_images}
    if len(shapes) != 1:
        raise ShapeError(f"coil images differ in shape: {sorted(shapes)}")
    stack = np.asarray(coil_images)
    return np.sqrt(np.sum(stack.real**2 + stack.imag**2, axis=0))


def zero_fill_recon(f: np.ndarray, mask: MaskLike) -> np.ndarray:
    f = np.asarray(f)
    lines = _lines(mask, f.shape[1])
    return rss_combine(ifft2c(np.where(lines[None], f, 0)))


def estimate_sensitivities(f: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Low-resolution coil maps from the ACS block, normalised by their RSS."""
    f = np.asarray(f)
    if mask.num_pe != f.shape[1]:
        raise ShapeError(f"mask covers {mask.num_pe} lines, data has {f.shape[1]}")
    if mask.num_acs < 4:
        raise SensitivityEstimationError(f"need >= 4 ACS lines, mask has {mask.num_acs}")
    lo, hi = mask.acs_range
    n = hi - lo + 1
    window = np.zeros(f.shape[1])
    # interior of an (n+2)-point Hann window so the edge ACS lines keep some weight
    window[lo : hi + 1] = np.hanning(n + 2)[1:-1]
    coil_images = ifft2c(f.astype(np.complex128) * window[None, :, None])
    rss = rss_combine(coil_images)
    eps = 1e-8 * rss.max()
    return coil_images / (rss + eps)[None]


def normal_operator(x: np.ndarray, sens: np.ndarray, mask: MaskLike, lam: float = 0.0) -> np.ndarray:
    return adjoint_operator(forward_operator(x, sens, mask), sens, mask) + lam * x


def cg_sense(
    f: np.ndarray, mask: MaskLike, sens: np.ndarray, cfg: CgConfig = CgConfig()
) -> Tuple[np.ndarray, CgTrace]:
    """Solve (A^H A + lam I) x = A^H f by a conjugate-gradient method from x0 = 0.

    Stops once ||r|| / ||A^H f|| drops below ``cfg.rel_tol`` or after
    ``cfg.max_iters`` iterations.
    """
    f = np.asarray(f)
    sens = _check_maps(sens, f.shape[1:])
    b = adjoint_operator(f, sens, mask)
    trace = CgTrace()
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        trace.converged = True
        return np.zeros_like(b), trace

    def apply(v):
        return normal_operator(v, sens, mask, cfg.lam)

    step = _cr_steps if cfg.variant == "cr" else _cg_steps
    x = np.zeros_like(b)
    for it, (x, r_norm) in enumerate(step(apply, b, cfg.max_iters), start=1):
        if not (np.isfinite(r_norm) and np.all(np.isfinite(x))):
            raise NumericalDivergenceError(it)
        rel = float(r_norm / b_norm)
        trace.residual_norms.append(rel)
        trace.iterations_run = it
        if rel < cfg.rel_tol:
            trace.converged = True
            break
    return x, trace


def _cg_steps(apply, b, max_iters):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    for it in range(1, max_iters + 1):
        q = apply(p)
        pq = np.vdot(p, q).real
        if not np.isfinite(pq) or pq <= 0:
            raise NumericalDivergenceError(it, "loss of positive definiteness")
        alpha = rr / pq
        x = x + alpha * p
        r = r - alpha * q
        rr_new = np.vdot(r, r).real
        yield x, np.sqrt(rr_new)
        p = r + (rr_new / rr) * p
        rr = rr_new


def _cr_steps(apply, b, max_iters):
    x = np.zeros_like(b)
    r = b.copy()
    ar = apply(r)
    p, ap = r.copy(), ar.copy()
    rar = np.vdot(r, ar).real
    for it in range(1, max_iters + 1):
        apap = np.vdot(ap, ap).real
        if not np.isfinite(apap) or apap <= 0 or not np.isfinite(rar):
            raise NumericalDivergenceError(it, "breakdown")
        alpha = rar / apap
        x = x + alpha * p
        r = r - alpha * ap
        yield x, np.linalg.norm(r)
        ar = apply(r)
        rar_new = np.vdot(r, ar).real
        beta = rar_new / rar
        p = r + beta * p
        ap = ar + beta * ap
        rar = rar_new
