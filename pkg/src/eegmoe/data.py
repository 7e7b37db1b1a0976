"""Synthetic corpus generation, preprocessing, storage and partitioning.

The generator composes per-class band-limited sinusoids (delta through
beta), pink background noise and optional transient bursts, in units of
100 uV after normalization. Preprocessing mirrors a clinical EEG intake:
0.3-75 Hz band-pass, 60 Hz notch, resample to 200 Hz, non-overlapping 30 s
windows, reject any window whose raw amplitude exceeds 100 uV, then scale
the survivors by 1/100 uV.

Storage: one binary file per subject (16-byte magic/version header +
little-endian float32 samples, channel-major) with a JSON manifest
alongside. Subjects never span partition boundaries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sp_signal

from .signal import BANDS_HZ

MAGIC = b"EEGSEG01"
STORE_VERSION = 1
AMPLITUDE_LIMIT_UV = 100.0


class StoreError(RuntimeError):
    pass


@dataclass
class TimeSegment:
    values: np.ndarray               # (C, L), units of 100 uV
    fs: float
    subject_id: str
    segment_id: str
    label: Optional[float] = None


# ---------------------------------------------------------------------------
# synthetic EEG
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSpec:
    """Band amplitudes in 100 uV units plus noise/burst levels."""
    name: str
    band_amps: Dict[str, float]
    noise_scale: float = 0.1
    burst_rate: float = 0.0
    burst_amp: float = 0.5


@dataclass(frozen=True)
class GeneratorConfig:
    channels: int = 19
    seconds: float = 30.0
    fs: float = 200.0
    noise_exponent: float = 1.0
    classes: Tuple[ClassSpec, ...] = ()

    @property
    def length(self) -> int:
        return int(round(self.seconds * self.fs))


def default_class_specs(n_classes: int, beta_ratio: float = 2.0) -> Tuple[ClassSpec, ...]:
    """Classes separated by geometric beta-band amplitude steps.

    A factor-2 amplitude step is a factor-4 band-power step, which a plain
    bandpower threshold already separates; the tasks built on these specs
    are learnable by construction.
    """
    specs = []
    for k in range(n_classes):
        specs.append(ClassSpec(
            name=f"class{k}",
            band_amps={"delta": 0.25, "theta": 0.2, "alpha": 0.3,
                       "beta": 0.15 * beta_ratio ** k},
            noise_scale=0.05,
            burst_rate=0.0))
    return tuple(specs)


def pink_noise(shape, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """1/f^exponent noise via spectral shaping, unit RMS per channel."""
    n = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n)
    shaping = np.ones_like(freqs)
    nz = freqs > 0
    shaping[nz] = freqs[nz] ** (-exponent / 2.0)
    shaping[0] = 0.0
    out = np.fft.irfft(spec * shaping, n=n, axis=-1)
    rms = out.std(axis=-1, keepdims=True)
    return out / np.where(rms < 1e-12, 1.0, rms)


def synth_eeg(cfg: GeneratorConfig, class_idx: int,
              rng: np.random.Generator) -> np.ndarray:
    """One (C, L) segment for the given class, in 100 uV units."""
    spec = cfg.classes[class_idx]
    c, n = cfg.channels, cfg.length
    t = np.arange(n) / cfg.fs
    out = np.zeros((c, n))
    for band in ("delta", "theta", "alpha", "beta"):
        amp = spec.band_amps.get(band, 0.0)
        lo, hi = BANDS_HZ[band]
        freq = rng.uniform(lo, hi)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(c, 1))
        if amp > 0.0:
            out += amp * np.sin(2.0 * np.pi * freq * t[None] + phases)
        # frequency and phases are always drawn so the stream layout does
        # not depend on which amplitudes are zero
    if spec.noise_scale > 0.0:
        out += spec.noise_scale * pink_noise((c, n), cfg.noise_exponent, rng)
    if spec.burst_rate > 0.0:
        n_bursts = rng.poisson(spec.burst_rate)
        width = int(0.05 * cfg.fs)
        for _ in range(n_bursts):
            center = rng.integers(width, n - width)
            ch = rng.integers(c)
            span = np.arange(center - width, center + width)
            envelope = np.exp(-0.5 * ((span - center) / (width / 3.0)) ** 2)
            out[ch, span] += spec.burst_amp * envelope * np.sin(
                2.0 * np.pi * 40.0 * span / cfg.fs)
    return out


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    band_low_hz: float = 0.3
    band_high_hz: float = 75.0
    notch_hz: float = 60.0
    notch_q: float = 30.0
    target_fs: float = 200.0
    window_seconds: float = 30.0
    reject_uv: float = AMPLITUDE_LIMIT_UV
    scale_uv: float = AMPLITUDE_LIMIT_UV
    # the 0.3 Hz corner rings for seconds at the recording edges; trimming
    # a guard margin keeps those transients out of every window
    guard_seconds: float = 5.0


def preprocess(raw: np.ndarray, fs_in: float,
               cfg: PreprocessConfig = PreprocessConfig()
               ) -> List[np.ndarray]:
    """Filter, notch, resample, window, reject, normalize.

    ``raw`` is (C, L) in uV. Returns the accepted (C, window) segments in
    100 uV units. Filters are zero-phase (forward-backward Butterworth and
    a second-order notch).
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    nyq = fs_in / 2.0
    if cfg.band_high_hz >= nyq:
        raise ValueError(
            f"band edge {cfg.band_high_hz} Hz needs fs > {2 * cfg.band_high_hz} Hz")
    # the 0.3 Hz corner has a seconds-long impulse response (tau ~ 1.4 s);
    # 30 s of reflect padding decays extension-boundary transients to the
    # 1e-9 level required for idempotence on conforming segments
    padlen = min(raw.shape[-1] - 1, int(30 * fs_in))
    sos = sp_signal.butter(4, [cfg.band_low_hz, cfg.band_high_hz],
                           btype="bandpass", fs=fs_in, output="sos")
    x = sp_signal.sosfiltfilt(sos, raw, axis=-1, padlen=padlen)
    if cfg.notch_hz < nyq:
        b, a = sp_signal.iirnotch(cfg.notch_hz, cfg.notch_q, fs=fs_in)
        x = sp_signal.filtfilt(b, a, x, axis=-1, padlen=padlen)
    if abs(fs_in - cfg.target_fs) > 1e-9:
        frac = _as_fraction(cfg.target_fs / fs_in)
        x = sp_signal.resample_poly(x, frac[0], frac[1], axis=-1)
    guard = int(round(cfg.guard_seconds * cfg.target_fs))
    if guard and x.shape[-1] > 2 * guard:
        x = x[:, guard:x.shape[-1] - guard]
    window = int(round(cfg.window_seconds * cfg.target_fs))
    if x.shape[-1] < window:
        raise ValueError(
            f"signal too short: {x.shape[-1]} samples < one {window}-sample window")
    accepted = []
    for start in range(0, x.shape[-1] - window + 1, window):
        seg = x[:, start:start + window]
        if np.abs(seg).max() > cfg.reject_uv:
            continue
        accepted.append(seg / cfg.scale_uv)
    return accepted


def _as_fraction(ratio: float, max_den: int = 1000) -> Tuple[int, int]:
    from fractions import Fraction
    f = Fraction(ratio).limit_denominator(max_den)
    return f.numerator, f.denominator


# ---------------------------------------------------------------------------
# segment store
# ---------------------------------------------------------------------------

def write_subject_file(path, segments: np.ndarray) -> None:
    """segments: (n, C, L) float array, stored little-endian float32."""
    segments = np.asarray(segments, dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", STORE_VERSION, segments.shape[0]))
        fh.write(segments.astype("<f4").tobytes())


def read_subject_file(path, channels: int, length: int) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise StoreError(f"{path}: bad magic {magic!r}")
        version, n_seg = struct.unpack("<II", fh.read(8))
        if version != STORE_VERSION:
            raise StoreError(f"{path}: unsupported version {version}")
        blob = fh.read()
    expected = n_seg * channels * length * 4
    if len(blob) != expected:
        raise StoreError(f"{path}: expected {expected} data bytes, "
                         f"found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4").reshape(n_seg, channels, length)


@dataclass
class CorpusManifest:
    root: Path
    fs: float
    channels: int
    length: int
    seed: int
    class_names: List[str]
    subjects: List[dict]             # {subject_id, path, n_segments, labels}
    generator: dict = field(default_factory=dict)

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        payload = {"fs": self.fs, "channels": self.channels,
                   "length": self.length, "seed": self.seed,
                   "class_names": self.class_names,
                   "subjects": self.subjects, "generator": self.generator}
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        payload = json.loads(path.read_text())
        return cls(root=path.parent, fs=payload["fs"],
                   channels=payload["channels"], length=payload["length"],
                   seed=payload["seed"], class_names=payload["class_names"],
                   subjects=payload["subjects"],
                   generator=payload.get("generator", {}))

    @property
    def n_segments(self) -> int:
        return sum(s["n_segments"] for s in self.subjects)

    def iter_segments(self) -> Iterator[TimeSegment]:
        for sub in self.subjects:
            data = read_subject_file(self.root / sub["path"], self.channels,
                                     self.length)
            for j in range(sub["n_segments"]):
                yield TimeSegment(values=data[j], fs=self.fs,
                                  subject_id=sub["subject_id"],
                                  segment_id=f"{sub['subject_id']}:{j}",
                                  label=sub["labels"][j])

    def load_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All segments stacked: (X (N,C,L) float64, y (N,), subject index)."""
        xs, ys, subs = [], [], []
        for i, sub in enumerate(self.subjects):
            data = read_subject_file(self.root / sub["path"], self.channels,
                                     self.length)
            xs.append(np.asarray(data, dtype=np.float64))
            ys.extend(sub["labels"])
            subs.extend([i] * sub["n_segments"])
        return np.concatenate(xs), np.asarray(ys), np.asarray(subs)


def generate_corpus(out_dir, subjects: int, segments_per_subject: int,
                    channels: int = 19, seconds: float = 30.0,
                    n_classes: int = 2, seed: int = 0,
                    fs: float = 200.0,
                    class_specs: Optional[Sequence[ClassSpec]] = None,
                    regression: bool = False) -> CorpusManifest:
    """Write a deterministic labeled corpus; per-segment RNG streams are
    split by (seed, subject, segment) so generation order never matters."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = tuple(class_specs) if class_specs else default_class_specs(n_classes)
    gen_cfg = GeneratorConfig(channels=channels, seconds=seconds, fs=fs,
                              classes=specs)
    entries = []
    for s in range(subjects):
        segs = np.empty((segments_per_subject, channels, gen_cfg.length),
                        dtype=np.float32)
        labels = []
        for j in range(segments_per_subject):
            rng = np.random.default_rng([seed, s, j])
            if regression:
                target = float(rng.uniform())
                scale = 0.5 + 1.5 * target        # monotone beta-band ramp
                spec = ClassSpec(name="reg", band_amps={
                    "delta": 0.25, "theta": 0.2, "alpha": 0.3,
                    "beta": 0.15 * scale}, noise_scale=0.05)
                seg_cfg = GeneratorConfig(channels=channels, seconds=seconds,
                                          fs=fs, classes=(spec,))
                segs[j] = synth_eeg(seg_cfg, 0, rng)
                labels.append(target)
            else:
                cls = int(rng.integers(len(specs)))
                segs[j] = synth_eeg(gen_cfg, cls, rng)
                labels.append(cls)
        rel = f"subject_{s:04d}.seg"
        write_subject_file(out_dir / rel, segs)
        entries.append({"subject_id": f"S{s:04d}", "path": rel,
                        "n_segments": segments_per_subject, "labels": labels})
    manifest = CorpusManifest(
        root=out_dir, fs=fs, channels=channels, length=gen_cfg.length,
        seed=seed, class_names=[sp.name for sp in specs],
        subjects=entries,
        generator={"n_classes": len(specs), "regression": regression,
                   "seconds": seconds})
    manifest.save()
    return manifest


def partition(manifest: CorpusManifest,
              counts: Sequence[int]) -> List[CorpusManifest]:
    """Contiguous subject-ordered split; a subject never spans two parts."""
    if sum(counts) > len(manifest.subjects):
        raise ValueError(
            f"requested {sum(counts)} subjects, corpus has "
            f"{len(manifest.subjects)}")
    parts = []
    start = 0
    for c in counts:
        sel = manifest.subjects[start:start + c]
        parts.append(CorpusManifest(
            root=manifest.root, fs=manifest.fs, channels=manifest.channels,
            length=manifest.length, seed=manifest.seed,
            class_names=manifest.class_names, subjects=sel,
            generator=manifest.generator))
        start += c
    return parts
