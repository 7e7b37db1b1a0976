"""Gaussian-smoothed (and rectangular) time-frequency masks.

A mask map M in [0,1]^{F x T} starts as ones and is multiplicatively eroded
by kernels, M <- M * (1 - G), until the masked fraction 1 - mean(M) reaches
the target ratio. Three geometries: frequency (sigma_t infinite, column
stripes), time (sigma_f infinite, row stripes), and joint blobs. Half of all
frequency centers are drawn from the physiological delta/theta/alpha/beta
ranges.

The final, ratio-crossing kernel is attenuated so the achieved ratio lands
exactly on the target instead of overshooting: Gaussian kernels are
amplitude-scaled (the ratio is linear in the amplitude), rectangular kernels
are truncated cell-wise in row-major order (their values must stay binary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .signal import BAND_ORDER, Spectrogram, StftConfig, band_to_bins, istft, stft

GEOMETRIES = ("frequency", "time", "joint-tf")
RECT_GEOMETRIES = ("rect-frequency", "rect-time", "rect-joint")


class MaskGenerationError(RuntimeError):
    """Raised when the target ratio is unreachable within the kernel budget."""


@dataclass(frozen=True)
class KernelRecord:
    f0: int
    t0: int
    sigma_f: float
    sigma_t: float
    amplitude: float = 1.0

    def to_dict(self) -> dict:
        return {"f0": self.f0, "t0": self.t0,
                "sigma_f": None if math.isinf(self.sigma_f) else self.sigma_f,
                "sigma_t": None if math.isinf(self.sigma_t) else self.sigma_t,
                "amplitude": self.amplitude}


@dataclass
class MaskMap:
    values: np.ndarray                      # (F, T) in [0, 1]
    geometry: str
    kernel_log: List[KernelRecord] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return 1.0 - float(self.values.mean())


@dataclass(frozen=True)
class MaskPolicy:
    ratio: float = 0.5
    geometry_probs: tuple = (0.6, 0.3, 0.1)   # frequency, time, joint-tf
    sigma_fraction: float = 0.05
    band_bias: float = 0.5
    eps_ratio: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")
        if abs(sum(self.geometry_probs) - 1.0) > 1e-9:
            raise ValueError("geometry probabilities must sum to 1")
        if not 0.0 <= self.band_bias <= 1.0:
            raise ValueError("band_bias must lie in [0, 1]")


def gaussian_kernel(f0: float, t0: float, sigma_f: float, sigma_t: float,
                    n_f: int, n_t: int) -> np.ndarray:
    """Separable 2-d Gaussian bump; an infinite sigma gives a constant axis."""
    if not (0 <= f0 < n_f and 0 <= t0 < n_t):
        raise ValueError(f"kernel center ({f0}, {t0}) outside {n_f}x{n_t} grid")
    if sigma_f <= 0 or sigma_t <= 0:
        raise ValueError("sigmas must be positive (or infinite)")
    if math.isinf(sigma_f):
        gf = np.ones(n_f)
    else:
        df = np.arange(n_f) - f0
        gf = np.exp(-df * df / (2.0 * sigma_f * sigma_f))
    if math.isinf(sigma_t):
        gt = np.ones(n_t)
    else:
        dt = np.arange(n_t) - t0
        gt = np.exp(-dt * dt / (2.0 * sigma_t * sigma_t))
    return np.outer(gf, gt)


def rect_kernel(f0: int, t0: int, half_f: float, half_t: float,
                n_f: int, n_t: int) -> np.ndarray:
    """Hard 0/1 rectangle; an infinite half-width spans the whole axis."""
    if not (0 <= f0 < n_f and 0 <= t0 < n_t):
        raise ValueError(f"kernel center ({f0}, {t0}) outside {n_f}x{n_t} grid")
    if math.isinf(half_f):
        rows = np.ones(n_f, dtype=bool)
    else:
        rows = np.abs(np.arange(n_f) - f0) <= half_f
    if math.isinf(half_t):
        cols = np.ones(n_t, dtype=bool)
    else:
        cols = np.abs(np.arange(n_t) - t0) <= half_t
    return np.outer(rows, cols).astype(np.float64)


def apply_kernel(mask: MaskMap, kernel: np.ndarray,
                 record: Optional[KernelRecord] = None) -> MaskMap:
    """Multiplicative update M * (1 - G); the kernel is logged."""
    if kernel.shape != mask.values.shape:
        raise ValueError(f"kernel {kernel.shape} vs mask {mask.values.shape}")
    values = mask.values * (1.0 - kernel)
    log = list(mask.kernel_log)
    if record is not None:
        log.append(record)
    return MaskMap(values, mask.geometry, log)


def _draw_center(policy: MaskPolicy, n_f: int, n_t: int,
                 cfg: StftConfig, rng: np.random.Generator):
    """Frequency center with physiological-band bias, time center uniform."""
    f0 = None
    if rng.random() < policy.band_bias:
        band = BAND_ORDER[rng.integers(len(BAND_ORDER))]
        lo, hi = band_to_bins(band, cfg)
        hi = min(hi, n_f - 1)
        if lo <= hi:
            f0 = int(rng.integers(lo, hi + 1))
    if f0 is None:
        f0 = int(rng.integers(0, n_f))
    t0 = int(rng.integers(0, n_t))
    return f0, t0


def _geometry_sigmas(geometry: str, policy: MaskPolicy, n_f: int, n_t: int):
    sf = policy.sigma_fraction * n_f
    st = policy.sigma_fraction * n_t
    if geometry in ("frequency", "rect-frequency"):
        return sf, math.inf
    if geometry in ("time", "rect-time"):
        return math.inf, st
    return sf, st


def _expected_coverage(geometry: str, policy: MaskPolicy,
                       n_f: int, n_t: int) -> float:
    sf = policy.sigma_fraction * n_f
    st = policy.sigma_fraction * n_t
    cf = min(1.0, sf * math.sqrt(2.0 * math.pi) / n_f)
    ct = min(1.0, st * math.sqrt(2.0 * math.pi) / n_t)
    if geometry in ("frequency", "rect-frequency"):
        return cf
    if geometry in ("time", "rect-time"):
        return ct
    return cf * ct


def _max_kernels(geometry: str, policy: MaskPolicy, n_f: int, n_t: int) -> int:
    cov = max(_expected_coverage(geometry, policy, n_f, n_t), 1e-9)
    return 10 * math.ceil(1.0 / cov)


def generate_mask(policy: MaskPolicy, n_f: int, n_t: int,
                  cfg: StftConfig = StftConfig(),
                  rng: Optional[np.random.Generator] = None,
                  geometry: Optional[str] = None) -> MaskMap:
    """Place Gaussian kernels until the masked fraction reaches the target.

    A geometry is drawn from the policy unless forced via ``geometry``. The
    crossing kernel is amplitude-scaled so the achieved ratio equals the
    target exactly (within float rounding), keeping it inside
    [ratio, ratio + eps_ratio].
    """
    if n_f < 2 or n_t < 2:
        raise ValueError("mask grid must be at least 2x2")
    rng = rng or np.random.default_rng()
    if geometry is None:
        geometry = GEOMETRIES[rng.choice(len(GEOMETRIES), p=policy.geometry_probs)]
    elif geometry not in GEOMETRIES:
        raise ValueError(f"unknown geometry {geometry!r}")
    sigma_f, sigma_t = _geometry_sigmas(geometry, policy, n_f, n_t)
    mask = MaskMap(np.ones((n_f, n_t)), geometry)
    budget = _max_kernels(geometry, policy, n_f, n_t)
    for _ in range(budget):
        f0, t0 = _draw_center(policy, n_f, n_t, cfg, rng)
        g = gaussian_kernel(f0, t0, sigma_f, sigma_t, n_f, n_t)
        removed = float((mask.values * g).mean())
        current = mask.ratio
        if current + removed >= policy.ratio:
            # aim a hair above the target so float rounding of the mean
            # cannot leave the achieved ratio below it
            amp = 1.0 if removed == 0.0 else min(
                1.0, (policy.ratio + 1e-9 - current) / removed)
            mask = apply_kernel(mask, amp * g,
                                KernelRecord(f0, t0, sigma_f, sigma_t, amp))
            if mask.ratio >= policy.ratio:
                return mask
        else:
            mask = apply_kernel(mask, g,
                                KernelRecord(f0, t0, sigma_f, sigma_t))
    raise MaskGenerationError(
        f"target ratio {policy.ratio} unreachable within {budget} kernels "
        f"on a {n_f}x{n_t} grid")


def generate_rect_mask(policy: MaskPolicy, n_f: int, n_t: int,
                       cfg: StftConfig = StftConfig(),
                       rng: Optional[np.random.Generator] = None,
                       geometry: Optional[str] = None) -> MaskMap:
    """Rectangular-occlusion variant; same centers, ratio and stopping rule.

    Values stay binary, so the crossing rectangle is truncated cell-wise
    (row-major) to reach ceil(ratio * F * T) masked cells exactly.
    """
    if n_f < 2 or n_t < 2:
        raise ValueError("mask grid must be at least 2x2")
    rng = rng or np.random.default_rng()
    if geometry is None:
        pick = GEOMETRIES[rng.choice(len(GEOMETRIES), p=policy.geometry_probs)]
        geometry = "rect-" + {"frequency": "frequency", "time": "time",
                              "joint-tf": "joint"}[pick]
    elif geometry not in RECT_GEOMETRIES:
        raise ValueError(f"unknown rect geometry {geometry!r}")
    half_f, half_t = _geometry_sigmas(geometry, policy, n_f, n_t)
    cells_needed = math.ceil(policy.ratio * n_f * n_t)
    mask = MaskMap(np.ones((n_f, n_t)), geometry)
    budget = _max_kernels(geometry, policy, n_f, n_t)
    for _ in range(budget):
        f0, t0 = _draw_center(policy, n_f, n_t, cfg, rng)
        g = rect_kernel(f0, t0, half_f, half_t, n_f, n_t)
        fresh = (mask.values > 0.5) & (g > 0.5)
        masked_now = int(n_f * n_t - mask.values.sum())
        overshoot = masked_now + int(fresh.sum()) - cells_needed
        if overshoot > 0:
            keep = np.flatnonzero(fresh.ravel())[:int(fresh.sum()) - overshoot]
            g = np.zeros(n_f * n_t)
            g[keep] = 1.0
            g = g.reshape(n_f, n_t)
        mask = apply_kernel(mask, g, KernelRecord(f0, t0, half_f, half_t))
        if int(n_f * n_t - mask.values.sum()) >= cells_needed:
            return mask
    raise MaskGenerationError(
        f"target ratio {policy.ratio} unreachable within {budget} rectangles "
        f"on a {n_f}x{n_t} grid")


def corrupt(x: np.ndarray, mask: MaskMap,
            cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Apply one mask to every channel in the STFT domain and invert.

    x is (C, L); the output has the same shape.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    spec = stft(x, cfg)
    if spec.coeffs.shape[1:] != mask.values.shape:
        raise ValueError(
            f"mask {mask.values.shape} does not fit spectrogram "
            f"{spec.coeffs.shape[1:]}")
    masked = Spectrogram(spec.coeffs * mask.values[None], cfg)
    return istft(masked, x.shape[-1])
