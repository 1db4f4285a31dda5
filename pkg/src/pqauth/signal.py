"""PPG time-sequence handling: synthesis, filtering, normalization, segmentation.

Sequences are plain float64 numpy arrays wrapped in :class:`PpgRecord`.
The four preprocessing modes (raw, two band-pass variants, band-pass plus
amplitude normalization) are the ones the verification pipeline is trained
and evaluated under.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import signal as sps

from .errors import (
    DegenerateRangeError,
    FormatError,
    InsufficientDataError,
    ParameterError,
)

DEFAULT_SAMPLE_RATE_HZ = 250.0
SEGMENT_LEN = 1000  # 4 s at 250 Hz
BASELINE_FREQ_HZ = 0.1  # slow wander component, below every pass band

PPG_MAGIC = b"PPG1"


@dataclass(frozen=True)
class PpgRecord:
    """A subject-tagged, uniformly sampled scalar sequence."""

    subject_id: str
    sample_rate_hz: float
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ParameterError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if samples.ndim != 1 or samples.size < 1:
            raise ParameterError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class SubjectProfile:
    """Parameters of the two-Gaussian synthetic pulse generator for one subject."""

    heart_rate_bpm_mean: float = 75.0
    heart_rate_bpm_std: float = 1.5
    gauss1_amp: float = 1.0
    gauss1_width_s: float = 0.10
    gauss1_offset_s: float = 0.15
    gauss2_amp: float = 0.45
    gauss2_width_s: float = 0.15
    gauss2_offset_s: float = 0.42
    resp_freq_hz: float = 0.25
    resp_depth: float = 0.12
    baseline_wander_amp: float = 0.10
    noise_sigma: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if not (40.0 <= self.heart_rate_bpm_mean <= 180.0):
            raise ParameterError(
                f"heart_rate_bpm_mean must lie in [40, 180], got {self.heart_rate_bpm_mean}"
            )
        if self.gauss1_width_s <= 0 or self.gauss2_width_s <= 0:
            raise ParameterError("Gaussian pulse widths must be positive")
        if self.heart_rate_bpm_std < 0:
            raise ParameterError("heart_rate_bpm_std must be non-negative")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be non-negative")
        if self.rng_seed < 0:
            raise ParameterError("rng_seed must be non-negative")


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth band-pass corner frequencies and order."""

    low_cut_hz: float
    high_cut_hz: float
    order: int = 4

    def validate(self, sample_rate_hz: float) -> None:
        nyquist = sample_rate_hz / 2.0
        if not (0.0 < self.low_cut_hz < self.high_cut_hz < nyquist):
            raise ParameterError(
                f"need 0 < low ({self.low_cut_hz}) < high ({self.high_cut_hz}) "
                f"< Nyquist ({nyquist})"
            )
        if self.order < 1:
            raise ParameterError(f"filter order must be >= 1, got {self.order}")


class PreprocessMode(Enum):
    """The four input-conditioning variants the system is evaluated under."""

    Raw = "raw"
    Band01_8 = "band-0.1-8"
    Band05_8 = "band-0.5-8"
    Band05_8Norm = "band-0.5-8-norm"

    @classmethod
    def from_string(cls, name: str) -> "PreprocessMode":
        key = name.strip().lower().replace("_", "-")
        for mode in cls:
            if mode.value == key or mode.name.lower() == name.strip().lower():
                return mode
        raise ParameterError(
            f"unknown preprocess mode {name!r}; expected one of "
            f"{[m.value for m in cls]}"
        )


@dataclass(frozen=True)
class Segment:
    """A 1000-point window of a PPG record."""

    subject_id: str
    start_index: int
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.shape != (SEGMENT_LEN,):
            raise ParameterError(f"segment must hold exactly {SEGMENT_LEN} samples, got {samples.shape}")


@dataclass(frozen=True)
class Consecutive:
    """Tile the record with non-overlapping 1000-point windows."""


@dataclass(frozen=True)
class RandomStarts:
    """Draw `count` windows with uniformly random (possibly overlapping) starts."""

    count: int
    seed: int


def synth_ppg(profile: SubjectProfile, duration_s: float, seed: int) -> PpgRecord:
    """Generate a synthetic PPG record for one subject.

    Per-beat waveform is a sum of two Gaussians placed at beat onsets whose
    spacing carries the beat-to-beat heart-rate jitter; the pulse train is
    amplitude-modulated by respiration, offset by a slow baseline sinusoid,
    and covered with white Gaussian noise.  Bit-deterministic for a given
    (profile, seed).
    """
    if duration_s < 4.0:
        raise ParameterError(f"duration_s must be >= 4, got {duration_s}")
    fs = DEFAULT_SAMPLE_RATE_HZ
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    rng = np.random.default_rng([seed, profile.rng_seed])

    period_mean = 60.0 / profile.heart_rate_bpm_mean
    waveform = np.zeros(n)
    span = 5.0 * max(profile.gauss1_width_s, profile.gauss2_width_s) + max(
        profile.gauss1_offset_s, profile.gauss2_offset_s
    )
    onset = -2.0 * period_mean
    while onset < duration_s + 2.0 * period_mean:
        lo = max(0, int(np.floor((onset - span) * fs)))
        hi = min(n, int(np.ceil((onset + span) * fs)) + 1)
        if hi > lo:
            dt = t[lo:hi] - onset
            waveform[lo:hi] += profile.gauss1_amp * np.exp(
                -0.5 * ((dt - profile.gauss1_offset_s) / profile.gauss1_width_s) ** 2
            )
            waveform[lo:hi] += profile.gauss2_amp * np.exp(
                -0.5 * ((dt - profile.gauss2_offset_s) / profile.gauss2_width_s) ** 2
            )
        hr = profile.heart_rate_bpm_mean + profile.heart_rate_bpm_std * rng.standard_normal()
        hr = min(max(hr, 30.0), 220.0)
        onset += 60.0 / hr

    if profile.resp_depth != 0.0:
        waveform = waveform * (1.0 + profile.resp_depth * np.sin(2 * np.pi * profile.resp_freq_hz * t))
    if profile.baseline_wander_amp != 0.0:
        waveform = waveform + profile.baseline_wander_amp * np.sin(2 * np.pi * BASELINE_FREQ_HZ * t)
    if profile.noise_sigma > 0.0:
        waveform = waveform + rng.normal(0.0, profile.noise_sigma, n)
    return PpgRecord(subject_id="", sample_rate_hz=fs, samples=waveform)


def default_registry(n: int = 8) -> tuple[SubjectProfile, ...]:
    """Deterministic bank of synthetic subjects with well-separated parameters.

    Heart-rate means are spaced by several standard deviations and pulse
    morphologies (widths, offsets, dicrotic amplitude) differ per subject, so
    the registry yields distinguishable (p,q) patterns by construction.
    """
    base = [
        SubjectProfile(58.0, 1.2, 1.00, 0.090, 0.140, 0.35, 0.130, 0.400, 0.20, 0.10, 0.08, 0.015, 11),
        SubjectProfile(66.0, 1.5, 0.95, 0.105, 0.155, 0.50, 0.150, 0.430, 0.23, 0.14, 0.10, 0.020, 12),
        SubjectProfile(74.0, 1.3, 1.10, 0.080, 0.130, 0.30, 0.120, 0.370, 0.26, 0.11, 0.12, 0.018, 13),
        SubjectProfile(82.0, 1.6, 0.90, 0.120, 0.170, 0.55, 0.170, 0.460, 0.29, 0.16, 0.09, 0.022, 14),
        SubjectProfile(90.0, 1.4, 1.05, 0.095, 0.145, 0.40, 0.140, 0.410, 0.21, 0.12, 0.11, 0.016, 15),
        SubjectProfile(100.0, 1.7, 1.00, 0.110, 0.160, 0.45, 0.155, 0.440, 0.24, 0.15, 0.13, 0.021, 16),
        SubjectProfile(112.0, 1.5, 0.85, 0.085, 0.135, 0.35, 0.125, 0.380, 0.27, 0.13, 0.10, 0.019, 17),
        SubjectProfile(124.0, 1.8, 1.15, 0.100, 0.150, 0.50, 0.145, 0.420, 0.31, 0.17, 0.12, 0.023, 18),
    ]
    if not (1 <= n <= len(base)):
        raise ParameterError(f"default registry supports 1..{len(base)} subjects, got {n}")
    return tuple(base[:n])


def bandpass(record: PpgRecord, spec: FilterSpec) -> PpgRecord:
    """Zero-phase (forward-backward) Butterworth band-pass of the record.

    The pad length scales with the slow corner so edge transients settle
    inside the padding rather than the data; output length equals input
    length and no samples are discarded.
    """
    spec.validate(record.sample_rate_hz)
    sos = sps.butter(
        spec.order,
        [spec.low_cut_hz, spec.high_cut_hz],
        btype="bandpass",
        fs=record.sample_rate_hz,
        output="sos",
    )
    padlen = min(record.samples.size - 1, int(3.0 * record.sample_rate_hz / spec.low_cut_hz))
    filtered = sps.sosfiltfilt(sos, record.samples, padlen=padlen)
    return replace(record, samples=filtered)


def bandpass_gain(spec: FilterSpec, sample_rate_hz: float, freq_hz: float) -> float:
    """Analytic amplitude ratio of the zero-phase filter at one frequency.

    Forward-backward application squares the designed magnitude response.
    """
    spec.validate(sample_rate_hz)
    sos = sps.butter(
        spec.order,
        [spec.low_cut_hz, spec.high_cut_hz],
        btype="bandpass",
        fs=sample_rate_hz,
        output="sos",
    )
    _, h = sps.sosfreqz(sos, worN=[2 * np.pi * freq_hz / sample_rate_hz])
    return float(abs(h[0]) ** 2)


def normalize01(record: PpgRecord) -> PpgRecord:
    """Affine map of the samples onto [0, 1] (min -> 0, max -> 1)."""
    lo = float(record.samples.min())
    hi = float(record.samples.max())
    if hi <= lo:
        raise DegenerateRangeError("cannot normalize a constant signal (max == min)")
    return replace(record, samples=(record.samples - lo) / (hi - lo))


_MODE_BANDS = {
    PreprocessMode.Band01_8: FilterSpec(0.1, 8.0),
    PreprocessMode.Band05_8: FilterSpec(0.5, 8.0),
    PreprocessMode.Band05_8Norm: FilterSpec(0.5, 8.0),
}


def preprocess(record: PpgRecord, mode: PreprocessMode) -> PpgRecord:
    """Apply one of the four conditioning modes to a record."""
    if mode is PreprocessMode.Raw:
        return record
    out = bandpass(record, _MODE_BANDS[mode])
    if mode is PreprocessMode.Band05_8Norm:
        out = normalize01(out)
    return out


def segment(record: PpgRecord, strategy: Union[Consecutive, RandomStarts]) -> list[Segment]:
    """Cut a record into 1000-point segments.

    Consecutive tiles a prefix of the record with disjoint windows;
    RandomStarts draws seeded uniform start indices in [0, N-1000] and may
    overlap.
    """
    n = record.samples.size
    if n < SEGMENT_LEN:
        raise InsufficientDataError(
            f"record has {n} samples; at least {SEGMENT_LEN} required for one segment"
        )
    if isinstance(strategy, Consecutive):
        starts = range(0, n - SEGMENT_LEN + 1, SEGMENT_LEN)
    elif isinstance(strategy, RandomStarts):
        if strategy.count < 1:
            raise ParameterError(f"RandomStarts count must be >= 1, got {strategy.count}")
        rng = np.random.default_rng(strategy.seed)
        starts = rng.integers(0, n - SEGMENT_LEN + 1, size=strategy.count).tolist()
    else:
        raise ParameterError(f"unknown segmentation strategy {strategy!r}")
    return [
        Segment(record.subject_id, int(s), record.samples[s : s + SEGMENT_LEN])
        for s in starts
    ]


def write_ppg_csv(record: PpgRecord, path: Union[str, Path]) -> None:
    """Write the text form: two header lines then one sample per line."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"subject_id,{record.subject_id}\n")
        fh.write(f"sample_rate_hz,{float(record.sample_rate_hz)!r}\n")
        for value in record.samples:
            fh.write(f"{float(value)!r}\n")


def read_ppg_csv(path: Union[str, Path]) -> PpgRecord:
    """Read the text form written by :func:`write_ppg_csv`."""
    path = Path(path)
    with path.open("r") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3:
        raise FormatError(f"{path}: expected two header lines plus samples")
    if not lines[0].startswith("subject_id,"):
        raise FormatError(f"{path}: first line must be 'subject_id,<id>'")
    subject_id = lines[0].split(",", 1)[1]
    if not lines[1].startswith("sample_rate_hz,"):
        raise FormatError(f"{path}: second line must be 'sample_rate_hz,<rate>'")
    try:
        rate = float(lines[1].split(",", 1)[1])
        samples = np.array([float(v) for v in lines[2:] if v.strip() != ""], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed numeric field: {exc}") from exc
    return PpgRecord(subject_id=subject_id, sample_rate_hz=rate, samples=samples)


def write_ppg_bin(record: PpgRecord, path: Union[str, Path]) -> None:
    """Write the binary form: magic, u32 LE count, float32 LE samples."""
    data = record.samples.astype("<f4").tobytes()
    with Path(path).open("wb") as fh:
        fh.write(PPG_MAGIC)
        fh.write(struct.pack("<I", record.samples.size))
        fh.write(data)


def read_ppg_bin(
    path: Union[str, Path],
    subject_id: str = "",
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
) -> PpgRecord:
    """Read the binary form; id and rate are not stored and come from the caller."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("file too short for PPG header", offset=len(raw))
    if raw[:4] != PPG_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {PPG_MAGIC!r}", offset=0)
    (count,) = struct.unpack_from("<I", raw, 4)
    expected = 8 + 4 * count
    if len(raw) < expected:
        raise FormatError(
            f"truncated sample block: expected {expected} bytes, file has {len(raw)}",
            offset=len(raw),
        )
    samples = np.frombuffer(raw, dtype="<f4", count=count, offset=8).astype(np.float64)
    return PpgRecord(subject_id=subject_id, sample_rate_hz=sample_rate_hz, samples=samples)
