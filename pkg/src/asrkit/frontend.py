"""Waveform-to-feature frontend: power-mel filterbanks and SpecAugment.

Features are 40-dim mel filterbank energies compressed with a 1/15 power
(instead of a log), computed over 25 ms Hann windows with a 10 ms hop at
16 kHz. Mel filters span 0-8000 Hz; energies are floored at 1e-10 before
the power so features stay finite and non-negative.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from asrkit.errors import DataError

SAMPLE_RATE_HZ = 16000
FRAME_LENGTH_SAMPLES = 400  # 25 ms
FRAME_SHIFT_SAMPLES = 160  # 10 ms
NUM_MEL_BINS = 40
POWER_COEFF = 1.0 / 15.0
ENERGY_FLOOR = 1e-10
_N_FFT = 512

FEATURE_MAGIC = b"PMEL"
FEATURE_VERSION = 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ


@dataclass
class FeatureSequence:
    """A (T, F) matrix of acoustic features plus timing metadata."""

    frames: np.ndarray
    utt_id: str = ""
    frame_shift_ms: int = 10
    frame_length_ms: int = 25

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SpecAugmentPolicy:
    """Masking recipe: counts and maximum widths per axis, plus a seed."""

    num_freq_masks: int = 2
    max_freq_width: int = 10
    num_time_masks: int = 2
    max_time_width: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.num_freq_masks, self.num_time_masks) < 0:
            raise ValueError("mask counts must be non-negative")
        if min(self.max_freq_width, self.max_time_width) < 0:
            raise ValueError("mask widths must be non-negative")


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular mel filters as a (n_mels, n_fft//2 + 1) weight matrix."""
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return weights


_MEL_WEIGHTS: np.ndarray | None = None


def _mel_weights() -> np.ndarray:
    global _MEL_WEIGHTS
    if _MEL_WEIGHTS is None:
        _MEL_WEIGHTS = _mel_filterbank(NUM_MEL_BINS, _N_FFT, SAMPLE_RATE_HZ)
    return _MEL_WEIGHTS


def num_frames_for_samples(n_samples: int) -> int:
    return (n_samples - FRAME_LENGTH_SAMPLES) // FRAME_SHIFT_SAMPLES + 1


def extract_powermel(wave: Waveform, utt_id: str = "") -> FeatureSequence:
    """Power-mel features: (mel energy)^(1/15) over 25 ms windows, 10 ms hop.

    Frame count is floor((N - 400) / 160) + 1; deterministic.
    """
    if wave.sample_rate_hz != SAMPLE_RATE_HZ:
        raise DataError(
            f"unsupported sample rate {wave.sample_rate_hz} Hz (expected {SAMPLE_RATE_HZ})"
        )
    samples = np.asarray(wave.samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DataError("waveform must be one-dimensional")
    if not np.all(np.isfinite(samples)):
        raise DataError("waveform contains non-finite samples")
    n = samples.shape[0]
    if n < FRAME_LENGTH_SAMPLES:
        raise DataError(
            f"audio too short: {n} samples < one {FRAME_LENGTH_SAMPLES}-sample window"
        )
    t = num_frames_for_samples(n)
    idx = np.arange(FRAME_LENGTH_SAMPLES)[None, :] + FRAME_SHIFT_SAMPLES * np.arange(t)[:, None]
    frames = samples[idx] * np.hanning(FRAME_LENGTH_SAMPLES)[None, :]
    spec = np.abs(np.fft.rfft(frames, n=_N_FFT, axis=1)) ** 2
    mel = spec @ _mel_weights().T
    feats = np.maximum(mel, ENERGY_FLOOR) ** POWER_COEFF
    return FeatureSequence(frames=feats.astype(np.float32), utt_id=utt_id)


def spec_augment(
    feat: FeatureSequence,
    policy: SpecAugmentPolicy,
    rng: np.random.Generator | None = None,
) -> FeatureSequence:
    """Zero out random frequency bands and time spans; shape is preserved.

    Mask widths are drawn uniformly in [0, max_width] (clamped to the axis
    length), positions uniformly over valid offsets. A zero-mask policy is
    the identity. Reproducible given the policy seed.
    """
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    out = feat.frames.copy()
    t, f = out.shape
    for _ in range(policy.num_freq_masks):
        width = int(rng.integers(0, min(policy.max_freq_width, f) + 1))
        start = int(rng.integers(0, f - width + 1))
        out[:, start : start + width] = 0.0
    for _ in range(policy.num_time_masks):
        width = int(rng.integers(0, min(policy.max_time_width, t) + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = 0.0
    return FeatureSequence(
        frames=out,
        utt_id=feat.utt_id,
        frame_shift_ms=feat.frame_shift_ms,
        frame_length_ms=feat.frame_length_ms,
    )


# ---------------------------------------------------------------------------
# feature file format: magic "PMEL", u32 version/T/F little-endian, then
# T*F little-endian float32 values, row-major.


def write_features(path, feat: FeatureSequence) -> None:
    frames = np.ascontiguousarray(feat.frames, dtype="<f4")
    t, f = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, f))
        fh.write(frames.tobytes())


def read_features(path, utt_id: str = "") -> FeatureSequence:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise DataError(f"{path}: not a feature file (bad magic {magic!r})")
        version, t, f = struct.unpack("<III", fh.read(12))
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported feature file version {version}")
        data = np.frombuffer(fh.read(4 * t * f), dtype="<f4")
        if data.size != t * f:
            raise DataError(f"{path}: truncated feature file")
    return FeatureSequence(frames=data.reshape(t, f).astype(np.float32), utt_id=utt_id)
