"""STFT / inverse STFT, Welch power spectral density, and EEG band bookkeeping.

All transforms use a periodic Hann window. The forward transform
center-pads with reflection so a 30 s segment at 200 Hz under the default
configuration (n_fft 400, hop 200) produces 201 frequency bins and 31 time
frames; the inverse uses squared-window overlap-add normalization, which is
exact for hop = n_fft/2 (COLA).

``stft_magnitude`` is the differentiable twin of ``stft``: same framing,
same padding, built from tape ops so spectral losses can backpropagate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import tensor as T

BANDS_HZ: Dict[str, Tuple[float, float]] = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "beta": (12.0, 30.0),
}
BAND_ORDER = ("delta", "theta", "alpha", "beta")


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 400
    hop: int = 200
    fs: float = 200.0
    window: str = "hann_periodic"

    def __post_init__(self):
        if self.n_fft % 2:
            raise ValueError("n_fft must be even")
        if self.hop * 2 != self.n_fft:
            raise ValueError("hop must equal n_fft/2 (COLA requirement)")
        if self.window != "hann_periodic":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def bin_hz(self) -> float:
        return self.fs / self.n_fft

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1

    def window_values(self) -> np.ndarray:
        return hann_periodic(self.n_fft)

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "hop": self.hop, "fs": self.fs,
                "window": self.window}


@dataclass
class Spectrogram:
    coeffs: np.ndarray                 # complex, (C, F, T)
    config: StftConfig = field(default_factory=StftConfig)

    @property
    def shape(self):
        return self.coeffs.shape

    def magnitude_db(self, floor: float = 1e-12) -> np.ndarray:
        return 20.0 * np.log10(np.maximum(np.abs(self.coeffs), floor))


def _frames(padded: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    """(C, Lp) -> (C, n_frames, n_fft) strided view of hop-spaced windows."""
    c, lp = padded.shape
    sc, sl = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded, shape=(c, n_frames, n_fft), strides=(sc, sl * hop, sl),
        writeable=False)


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Windowed DFT of hop-spaced frames with reflect center padding."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c, length = x.shape
    pad = cfg.n_fft // 2
    if length < 2:
        raise ValueError("segment too short for one frame")
    if pad < length:
        padded = np.pad(x, ((0, 0), (pad, pad)), mode="reflect")
    else:
        # reflect padding wider than the signal is applied in legal steps
        padded = _reflect_long(x, pad)
    t = cfg.n_frames(length)
    win = cfg.window_values()
    frames = _frames(padded, cfg.n_fft, cfg.hop, t) * win
    coeffs = np.fft.rfft(frames, axis=-1).transpose(0, 2, 1)  # (C, F, T)
    return Spectrogram(coeffs, cfg)


def _reflect_long(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflect padding wider than the signal, applied in legal-sized steps."""
    out = x
    remaining = pad
    while remaining > 0:
        step = min(remaining, out.shape[-1] - 1)
        out = np.pad(out, ((0, 0), (step, step)), mode="reflect")
        remaining -= step
    extra = (out.shape[-1] - (x.shape[-1] + 2 * pad)) // 2
    if extra:
        out = out[:, extra:-extra]
    return out


def istft(z: Spectrogram, target_length: int) -> np.ndarray:
    """Overlap-add inverse with squared-window normalization."""
    cfg = z.config
    coeffs = np.asarray(z.coeffs)
    c, f, t = coeffs.shape
    if f != cfg.n_bins:
        raise ValueError(f"{f} bins inconsistent with n_fft {cfg.n_fft}")
    win = cfg.window_values()
    frames = np.fft.irfft(coeffs.transpose(0, 2, 1), n=cfg.n_fft, axis=-1)
    frames *= win
    lp = (t - 1) * cfg.hop + cfg.n_fft
    out = np.zeros((c, lp))
    wss = np.zeros(lp)
    for m in range(t):
        lo = m * cfg.hop
        out[:, lo:lo + cfg.n_fft] += frames[:, m]
        wss[lo:lo + cfg.n_fft] += win * win
    good = wss > 1e-11
    out[:, good] /= wss[good]
    pad = cfg.n_fft // 2
    sig = out[:, pad:pad + target_length]
    if sig.shape[-1] < target_length:
        sig = np.pad(sig, ((0, 0), (0, target_length - sig.shape[-1])))
    return sig


# ---------------------------------------------------------------------------
# Welch power spectral density
# ---------------------------------------------------------------------------

def welch_psd(x: np.ndarray, seg_length: int = 400, overlap: float = 0.5,
              fs: float = 200.0) -> np.ndarray:
    """Mean of per-segment one-sided periodograms, per channel.

    Returns (C, seg_length//2 + 1) in (input units)^2 / Hz; density scaling
    divides by fs * sum(window^2). Signals shorter than one segment are
    zero-padded so the bin count stays fixed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c, length = x.shape
    if length == 0:
        raise ValueError("empty signal")
    win = hann_periodic(seg_length)
    scale = 1.0 / (fs * np.sum(win * win))
    hop = int(round(seg_length * (1.0 - overlap)))
    if length < seg_length:
        segs = np.pad(x, ((0, 0), (0, seg_length - length)))[:, None, :]
    else:
        n_seg = 1 + (length - seg_length) // hop
        segs = _frames(x, seg_length, hop, n_seg)
    spec = np.fft.rfft(segs * win, axis=-1)
    p = (spec.real ** 2 + spec.imag ** 2) * scale
    p[..., 1:] *= 2.0
    if seg_length % 2 == 0:
        p[..., -1] /= 2.0
    return p.mean(axis=1)


# ---------------------------------------------------------------------------
# frequency-band bookkeeping
# ---------------------------------------------------------------------------

def band_to_bins(band: str, cfg: StftConfig = StftConfig()) -> Tuple[int, int]:
    """Inclusive bin interval covering the named band, bin width fs/n_fft."""
    if band not in BANDS_HZ:
        raise ValueError(f"unknown band {band!r}")
    lo_hz, hi_hz = BANDS_HZ[band]
    if hi_hz > cfg.fs / 2.0:
        raise ValueError(f"band {band} exceeds Nyquist {cfg.fs / 2.0} Hz")
    width = cfg.bin_hz
    lo = int(np.ceil(lo_hz / width - 1e-9))
    hi = int(np.floor(hi_hz / width + 1e-9))
    return lo, hi


def band_partition(cfg: StftConfig = StftConfig()) -> Dict[str, Tuple[int, int]]:
    """Disjoint band ranges; a bin on a shared edge goes to the lower band."""
    out: Dict[str, Tuple[int, int]] = {}
    prev_hi = None
    for name in BAND_ORDER:
        lo, hi = band_to_bins(name, cfg)
        if prev_hi is not None and lo <= prev_hi:
            lo = prev_hi + 1
        out[name] = (lo, hi)
        prev_hi = hi
    return out


# ---------------------------------------------------------------------------
# differentiable STFT magnitude
# ---------------------------------------------------------------------------

_BASIS_CACHE: dict = {}


def _dft_basis(cfg: StftConfig, dtype) -> Tuple[np.ndarray, np.ndarray]:
    key = (cfg.n_fft, np.dtype(dtype).name)
    if key not in _BASIS_CACHE:
        n = np.arange(cfg.n_fft)
        f = np.arange(cfg.n_bins)
        ang = 2.0 * np.pi * np.outer(f, n) / cfg.n_fft
        win = cfg.window_values()
        cos_k = (np.cos(ang) * win).astype(dtype)[:, None, :]
        sin_k = (np.sin(ang) * win).astype(dtype)[:, None, :]
        _BASIS_CACHE[key] = (cos_k, sin_k)
    return _BASIS_CACHE[key]


def stft_magnitude(x: T.DiffTensor, cfg: StftConfig = StftConfig(),
                   eps: float = 1e-24) -> T.DiffTensor:
    """|STFT(x)| as a tape op; x is (..., L), result is (..., F, T).

    Framing and padding are identical to :func:`stft`, so values agree with
    ``np.abs(stft(x).coeffs)`` to machine precision (leading axes are
    treated as independent channels). The magnitude is
    sqrt(re^2 + im^2 + eps) to keep the backward rule finite on silent
    regions.
    """
    lead = x.shape[:-1]
    length = x.shape[-1]
    c = int(np.prod(lead)) if lead else 1
    pad = cfg.n_fft // 2
    cos_k, sin_k = _dft_basis(cfg, x.dtype)
    x3 = T.reshape(x, (c, 1, length))
    # padding wider than the signal goes in legal steps, mirroring stft()
    remaining = pad
    xp = x3
    while remaining > 0:
        step = min(remaining, xp.shape[-1] - 1)
        xp = T.reflect_pad1d(xp, step)
        remaining -= step
    re = T.conv1d(xp, T.constant(cos_k), stride=cfg.hop)
    im = T.conv1d(xp, T.constant(sin_k), stride=cfg.hop)
    mag2 = T.add(T.square(re), T.square(im))
    mag = T.sqrt(T.add(mag2, T.constant(np.asarray(eps, dtype=x.dtype))))
    return T.reshape(mag, lead + mag.shape[-2:])
