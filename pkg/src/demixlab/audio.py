"""Sample-accurate audio primitives.

Stereo 44.1 kHz buffers, WAV I/O, Butterworth filtering, gain, and an
STFT/overlap-add pair with a constant-overlap-add (COLA) guarantee. All
processing is float64; files are float32 by default (PCM16 behind a flag).
Every function is a pure function of its inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, sosfilt, sosfreqz

SAMPLE_RATE = 44100


class AudioError(Exception):
    """Base class for audio-core failures."""


class UnsupportedSampleRate(AudioError):
    pass


class UnsupportedFormat(AudioError):
    pass


class MalformedFile(AudioError):
    pass


class IoError(AudioError):
    pass


class InvalidSpec(AudioError):
    pass


class NonColaSpec(AudioError):
    pass


class AudioBuffer:
    """A block of stereo samples at 44.1 kHz.

    `samples` has shape (2, n), dtype float64, finite values only. The
    nominal range is [-1, 1] but values are never clamped (corruption sums
    may exceed it). Buffers are treated as immutable; do not mutate
    `samples` in place.
    """

    __slots__ = ("samples", "sample_rate")

    def __init__(self, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != 2:
            raise UnsupportedFormat(
                f"expected stereo samples with shape (2, n), got {samples.shape}"
            )
        if sample_rate != SAMPLE_RATE:
            raise UnsupportedSampleRate(f"expected {SAMPLE_RATE} Hz, got {sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise MalformedFile("buffer contains non-finite samples")
        self.samples = samples
        self.sample_rate = sample_rate

    @classmethod
    def silent(cls, n_samples: int) -> "AudioBuffer":
        return cls(np.zeros((2, n_samples)))

    @classmethod
    def from_mono(cls, mono: np.ndarray) -> "AudioBuffer":
        """Duplicate a 1-D signal onto both channels."""
        mono = np.asarray(mono, dtype=np.float64)
        return cls(np.stack([mono, mono]))

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        """Total energy, summed over time and both channels."""
        return float(np.sum(self.samples**2))

    def slice(self, start: int, end: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[:, start:end].copy())

    def copy(self) -> "AudioBuffer":
        return AudioBuffer(self.samples.copy())


def mix(buffers: list[AudioBuffer]) -> AudioBuffer:
    """Sample-wise sum of equal-length buffers."""
    if not buffers:
        raise ValueError("cannot mix an empty list of buffers")
    n = len(buffers[0])
    for b in buffers:
        if len(b) != n:
            raise UnsupportedFormat("buffers have mismatched lengths")
    total = np.zeros((2, n))
    for b in buffers:
        total += b.samples
    return AudioBuffer(total)


# --- WAV I/O ---------------------------------------------------------------

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _read_fmt_chunk(path: Path) -> tuple[int, int, int, int]:
    """Return (format_code, channels, sample_rate, bits) from the RIFF header."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedFile(f"{path}: not a RIFF/WAVE file")
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedFile(f"{path}: truncated fmt chunk")
            code, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if code == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise MalformedFile(f"{path}: truncated extensible fmt chunk")
                (code,) = struct.unpack("<H", body[24:26])
            return code, channels, rate, bits
        pos += 8 + chunk_size + (chunk_size % 2)
    raise MalformedFile(f"{path}: no fmt chunk found")


def load_wav(path: str | Path, allow_mono: bool = False) -> AudioBuffer:
    """Load a 44.1 kHz PCM16/PCM24/Float32 WAV file.

    Mono files are rejected unless `allow_mono` is set, in which case the
    single channel is duplicated. Integer samples are normalized to
    [-1, 1) by the full scale of their width.
    """
    path = Path(path)
    if not path.exists():
        raise IoError(f"{path}: no such file")
    code, channels, rate, bits = _read_fmt_chunk(path)
    if rate != SAMPLE_RATE:
        raise UnsupportedSampleRate(f"{path}: {rate} Hz (expected {SAMPLE_RATE})")
    if (code, bits) not in {
        (_WAVE_FORMAT_PCM, 16),
        (_WAVE_FORMAT_PCM, 24),
        (_WAVE_FORMAT_IEEE_FLOAT, 32),
    }:
        raise UnsupportedFormat(f"{path}: format code {code} at {bits} bits")
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{path}: {channels} channels")
    if channels == 1 and not allow_mono:
        raise UnsupportedFormat(f"{path}: mono input (pass allow_mono to accept)")
    try:
        _, raw = wavfile.read(str(path))
    except ValueError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if raw.dtype == np.int16:
        data = raw.astype(np.float64) / 32768.0
    elif raw.dtype == np.int32:
        # 24-bit PCM arrives left-justified in int32.
        data = raw.astype(np.float64) / 2147483648.0
    elif raw.dtype == np.float32:
        data = raw.astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: sample dtype {raw.dtype}")
    if data.ndim == 1:
        data = np.stack([data, data])
    else:
        data = data.T
    if not np.all(np.isfinite(data)):
        raise MalformedFile(f"{path}: non-finite samples")
    return AudioBuffer(data)


def save_wav(buffer: AudioBuffer, path: str | Path, format: str = "float32") -> None:
    """Write a buffer to a WAV file, float32 (lossless round trip) or pcm16."""
    if not np.all(np.isfinite(buffer.samples)):
        raise MalformedFile("refusing to write non-finite samples")
    path = Path(path)
    if format == "float32":
        data = buffer.samples.T.astype(np.float32)
    elif format == "pcm16":
        scaled = np.round(buffer.samples * 32768.0)
        data = np.clip(scaled, -32768, 32767).astype(np.int16).T
    else:
        raise UnsupportedFormat(f"unknown output format {format!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(str(path), buffer.sample_rate, data)
    except OSError as exc:
        raise IoError(str(exc)) from exc


# --- Filtering and gain ----------------------------------------------------

NYQUIST = SAMPLE_RATE / 2.0


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth filter description: lowpass or bandpass.

    For lowpass only `cutoff_high_hz` is used. Order is the design order
    passed to the Butterworth prototype (a bandpass of design order n has
    2n poles).
    """

    kind: str
    order: int
    cutoff_low_hz: float = 0.0
    cutoff_high_hz: float = 0.0

    def __post_init__(self):
        if self.kind not in ("lowpass", "bandpass"):
            raise InvalidSpec(f"unknown filter kind {self.kind!r}")
        if not 3 <= self.order <= 9:
            raise InvalidSpec(f"order {self.order} outside [3, 9]")
        if not 0.0 < self.cutoff_high_hz < NYQUIST:
            raise InvalidSpec(f"cutoff {self.cutoff_high_hz} Hz outside (0, {NYQUIST})")
        if self.kind == "bandpass":
            if not 0.0 < self.cutoff_low_hz < NYQUIST:
                raise InvalidSpec(
                    f"cutoff {self.cutoff_low_hz} Hz outside (0, {NYQUIST})"
                )
            if self.cutoff_low_hz >= self.cutoff_high_hz:
                raise InvalidSpec("bandpass requires cutoff_low < cutoff_high")


@dataclass(frozen=True)
class FilterCoefficients:
    """Cascade of second-order sections (scipy `sos` layout)."""

    sos: np.ndarray

    def frequency_response(self, freqs_hz: np.ndarray) -> np.ndarray:
        """Complex response sampled at the given frequencies."""
        w = np.asarray(freqs_hz, dtype=np.float64) / NYQUIST * np.pi
        _, h = sosfreqz(self.sos, worN=w)
        return h


def design_filter(spec: FilterSpec) -> FilterCoefficients:
    """Design a Butterworth filter as second-order sections.

    Deterministic: the same spec always yields bit-identical coefficients.
    Magnitude at each cutoff is -3 dB by construction; lowpass DC gain is 1.
    """
    if spec.kind == "lowpass":
        sos = butter(spec.order, spec.cutoff_high_hz, "lowpass", fs=SAMPLE_RATE, output="sos")
    else:
        sos = butter(
            spec.order,
            [spec.cutoff_low_hz, spec.cutoff_high_hz],
            "bandpass",
            fs=SAMPLE_RATE,
            output="sos",
        )
    return FilterCoefficients(sos=sos)


def apply_filter(buffer: AudioBuffer, coeffs: FilterCoefficients) -> AudioBuffer:
    """Causal per-channel filtering with zero initial state."""
    out = sosfilt(coeffs.sos, buffer.samples, axis=1)
    return AudioBuffer(out)


def apply_gain_db(buffer: AudioBuffer, gain_db: float) -> AudioBuffer:
    """Scale every sample by 10^(gain_db / 20)."""
    if not np.isfinite(gain_db):
        raise InvalidSpec(f"non-finite gain {gain_db}")
    return AudioBuffer(buffer.samples * 10.0 ** (gain_db / 20.0))


# --- STFT / overlap-add ----------------------------------------------------


def _make_window(name: str, frame_len: int) -> np.ndarray:
    if name == "hann":
        # Periodic form; the symmetric variant breaks constant overlap-add.
        n = np.arange(frame_len)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len)
    if name == "rectangular":
        return np.ones(frame_len)
    raise InvalidSpec(f"unknown window {name!r}")


def _check_cola(window: np.ndarray, hop_len: int) -> None:
    frame_len = len(window)
    span = np.zeros(4 * frame_len)
    for start in range(0, len(span) - frame_len + 1, hop_len):
        span[start : start + frame_len] += window
    interior = span[frame_len : len(span) - 2 * frame_len]
    if interior.size == 0:
        return
    if np.ptp(interior) > 1e-8 * np.max(interior):
        raise NonColaSpec(
            f"window/hop pair ({len(window)}, {hop_len}) violates constant overlap-add"
        )


@dataclass(frozen=True)
class FrameSpec:
    """STFT framing: frame length, hop, window. Validated for COLA."""

    frame_len: int = 4096
    hop_len: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.frame_len:
            raise InvalidSpec(
                f"hop {self.hop_len} outside (0, frame_len={self.frame_len}]"
            )
        _check_cola(_make_window(self.window, self.frame_len), self.hop_len)

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1


@dataclass
class Spectrogram:
    """Complex STFT of a stereo buffer: shape (2, n_bins, n_frames).

    Carries the frame spec and the original sample count so the inverse
    transform restores the exact input length.
    """

    data: np.ndarray
    frames: FrameSpec
    n_samples: int
    sample_rate: int = SAMPLE_RATE

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.data)

    def copy_with(self, data: np.ndarray) -> "Spectrogram":
        return Spectrogram(data, self.frames, self.n_samples, self.sample_rate)


def stft(buffer: AudioBuffer, frames: FrameSpec) -> Spectrogram:
    """Windowed real FFT per frame, both channels.

    The signal is zero-padded by one hop on the left (and to whole frames on
    the right) so tapered windows still give every input sample nonzero
    synthesis weight.
    """
    window = _make_window(frames.window, frames.frame_len)
    n = len(buffer)
    hop = frames.hop_len
    covered = n + hop
    n_frames = max(1, 1 + -(-max(0, covered - frames.frame_len) // hop))
    padded = np.zeros((2, (n_frames - 1) * hop + frames.frame_len))
    padded[:, hop : hop + n] = buffer.samples
    idx = np.arange(frames.frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    framed = padded[:, idx] * window  # (2, n_frames, frame_len)
    spec = np.fft.rfft(framed, axis=2)
    return Spectrogram(spec.transpose(0, 2, 1), frames, n)


def istft(spectrogram: Spectrogram) -> AudioBuffer:
    """Weighted overlap-add resynthesis (synthesis window = analysis window).

    Pointwise normalization by the squared-window overlap makes
    istft(stft(x)) match x to within 1e-6 at every sample.
    """
    frames = spectrogram.frames
    window = _make_window(frames.window, frames.frame_len)
    hop = frames.hop_len
    data = spectrogram.data.transpose(0, 2, 1)  # (2, n_frames, n_bins)
    n_frames = data.shape[1]
    total = (n_frames - 1) * hop + frames.frame_len
    acc = np.zeros((2, total))
    den = np.zeros(total)
    chunks = np.fft.irfft(data, n=frames.frame_len, axis=2) * window
    for k in range(n_frames):
        sl = slice(k * hop, k * hop + frames.frame_len)
        acc[:, sl] += chunks[:, k, :]
        den[sl] += window**2
    nonzero = den > 1e-11
    acc[:, nonzero] /= den[nonzero]
    acc[:, ~nonzero] = 0.0
    return AudioBuffer(acc[:, hop : hop + spectrogram.n_samples])
