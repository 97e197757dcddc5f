"""Pluggable separators and inference-time ensembling.

A separator maps a stereo mixture to four equal-length class estimates.
Built-ins: an ideal-ratio-mask oracle computed from reference stems (the
desk-scale stand-in for trained models), a passthrough that routes the
mixture to one class, and a wrapper around an external separation process.
The ensembling toolkit covers overlapped windowed inference, random
time-shift averaging, phase-inversion averaging, weighted blending, and a
two-stage vocals-then-instrumental pipeline.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .audio import AudioBuffer, FrameSpec, istft, load_wav, save_wav, stft
from .dataset import CLASS_ORDER, SongEntry, SourceClass

Estimates = dict[SourceClass, AudioBuffer]


class SeparationError(Exception):
    pass


class ProcessFailed(SeparationError):
    pass


class MissingOutput(SeparationError):
    pass


class LengthMismatch(SeparationError):
    pass


class WindowTooShort(SeparationError):
    pass


class WeightMismatch(SeparationError):
    pass


@runtime_checkable
class Separator(Protocol):
    """Behavioral interface: separate a mixture into four class estimates.

    Implementations set `thread_safe = False` to request serialized calls.
    """

    thread_safe: bool

    def separate(self, mixture: AudioBuffer) -> Estimates: ...


#: Either a ready separator or a per-song factory (e.g. a per-song oracle).
SeparatorLike = "Separator | Callable[[SongEntry], Separator]"


def resolve_separator(sep, song: SongEntry):
    """Accept a Separator or a song->Separator factory."""
    if hasattr(sep, "separate"):
        return sep
    return sep(song)


def _validate_estimates(estimates: Estimates, n_samples: int) -> Estimates:
    for c in CLASS_ORDER:
        if c not in estimates:
            raise MissingOutput(f"separator produced no estimate for {c.value}")
        if len(estimates[c]) != n_samples:
            raise LengthMismatch(
                f"estimate for {c.value} has {len(estimates[c])} samples, "
                f"expected {n_samples}"
            )
    return estimates


class OracleIrm:
    """Ideal-ratio-mask oracle built from a song's reference stems.

    Masks are per-channel, per-bin magnitude ratios |S_c| / sum_k |S_k| of
    the reference stems; bins where all references vanish get a uniform 1/4
    so the masks always sum to one and the estimates stay
    mixture-consistent. The oracle only accepts inputs with the same length
    as its references.
    """

    thread_safe = True

    def __init__(self, stems: Estimates, frames: FrameSpec = FrameSpec()):
        self.frames = frames
        self.n_samples = len(next(iter(stems.values())))
        mags = {c: stft(stems[c], frames).magnitudes() for c in CLASS_ORDER}
        total = sum(mags.values())
        self.masks = {}
        for c in CLASS_ORDER:
            mask = np.full_like(total, 0.25)
            np.divide(mags[c], total, out=mask, where=total > 0)
            self.masks[c] = mask

    @classmethod
    def for_song(cls, song: SongEntry, frames: FrameSpec = FrameSpec()) -> "OracleIrm":
        return cls(song.stems, frames)

    def separate(self, mixture: AudioBuffer) -> Estimates:
        if len(mixture) != self.n_samples:
            raise LengthMismatch(
                f"oracle built for {self.n_samples} samples, got {len(mixture)}"
            )
        spec = stft(mixture, self.frames)
        return {
            c: istft(spec.copy_with(spec.data * self.masks[c])) for c in CLASS_ORDER
        }


def oracle_irm(stems: Estimates, frames: FrameSpec = FrameSpec()) -> OracleIrm:
    return OracleIrm(stems, frames)


def oracle_factory(
    reference: "Manifest", frames: FrameSpec = FrameSpec()
) -> Callable[[SongEntry], OracleIrm]:
    """Per-song oracle keyed by song id against a reference manifest."""

    def factory(song: SongEntry) -> OracleIrm:
        return OracleIrm.for_song(reference.load_song(song.id), frames)

    return factory


class Passthrough:
    """Routes the whole mixture to one class, silence elsewhere."""

    thread_safe = True

    def __init__(self, source: SourceClass):
        self.source = source

    def separate(self, mixture: AudioBuffer) -> Estimates:
        return {
            c: mixture.copy() if c is self.source else AudioBuffer.silent(len(mixture))
            for c in CLASS_ORDER
        }


def passthrough(source: SourceClass) -> Passthrough:
    return Passthrough(source)


class ExternalSeparator:
    """Wraps a separation process following the file-based protocol.

    A fresh directory receives `mixture.wav` (stereo float32, 44.1 kHz); the
    command runs with that directory as cwd (and `{dir}` substituted if
    present) and must write bass.wav, drums.wav, other.wav, vocals.wav of
    the same length, exiting 0. Calls are serialized per instance.
    """

    thread_safe = False

    def __init__(self, command: str, workdir: str | Path | None = None):
        self.command = command
        self.workdir = Path(workdir) if workdir else None
        self._lock = threading.Lock()

    def separate(self, mixture: AudioBuffer) -> Estimates:
        with self._lock:
            with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
                tmp_path = Path(tmp)
                save_wav(mixture, tmp_path / "mixture.wav", format="float32")
                argv = [
                    part.replace("{dir}", str(tmp_path))
                    for part in shlex.split(self.command)
                ]
                proc = subprocess.run(
                    argv, cwd=tmp_path, capture_output=True, text=True
                )
                if proc.returncode != 0:
                    raise ProcessFailed(
                        f"command exited {proc.returncode}: {proc.stderr.strip()}"
                    )
                estimates = {}
                for c in CLASS_ORDER:
                    out_path = tmp_path / f"{c.value}.wav"
                    if not out_path.exists():
                        raise MissingOutput(f"missing output {c.value}.wav")
                    estimates[c] = load_wav(out_path)
                return _validate_estimates(estimates, len(mixture))


def external_separator(command: str, workdir: str | Path | None = None) -> ExternalSeparator:
    return ExternalSeparator(command, workdir)


def residual(mixture: AudioBuffer, estimate: AudioBuffer) -> AudioBuffer:
    """Sample-wise difference mixture - estimate."""
    if len(mixture) != len(estimate):
        raise LengthMismatch(
            f"mixture has {len(mixture)} samples, estimate {len(estimate)}"
        )
    return AudioBuffer(mixture.samples - estimate.samples)


# --- Inference-time ensembling ----------------------------------------------


@dataclass(frozen=True)
class InferenceAugmentation:
    """Ensembling knobs: shifts, overlap, phase inversion."""

    n_shifts: int = 1
    max_shift: int = 22050
    overlap_ratio: float = 0.0
    phase_invert: bool = False

    def __post_init__(self):
        if self.n_shifts < 1:
            raise SeparationError("n_shifts must be >= 1")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise SeparationError("overlap_ratio must lie in [0, 1)")
        if self.max_shift < 0:
            raise SeparationError("max_shift must be >= 0")


def _triangular_weights(length: int) -> np.ndarray:
    # Nonzero at the ends so the pointwise normalizer never divides by zero.
    idx = np.arange(1, length + 1, dtype=np.float64)
    return np.minimum(idx, idx[::-1])


def infer_overlapped(
    sep: Separator,
    mixture: AudioBuffer,
    window_len: int,
    overlap_ratio: float,
    context: int = 4096,
) -> Estimates:
    """Windowed inference with triangular cross-fade on overlaps.

    Window cores exactly cover the input and the output length equals the
    input length for every (window, overlap) combination. Each window is
    separated with `context` extra samples of signal on each side (clipped
    at the signal bounds) and only its core is kept, so separator edge
    artifacts land in the discarded margin. At overlap 0 the cores form an
    exact partition and no cross-fade is applied.
    """
    if window_len < 2:
        raise WindowTooShort(f"window of {window_len} samples")
    if not 0.0 <= overlap_ratio < 1.0:
        raise SeparationError("overlap_ratio must lie in [0, 1)")
    n = len(mixture)
    if n <= window_len:
        return sep.separate(mixture)
    hop = max(1, int(round(window_len * (1.0 - overlap_ratio))))
    acc = {c: np.zeros((2, n)) for c in CLASS_ORDER}
    den = np.zeros(n)
    crossfade = hop < window_len
    start = 0
    while True:
        end = min(start + window_len, n)
        pad_left = min(context, start)
        pad_right = min(context, n - end)
        chunk = mixture.slice(start - pad_left, end + pad_right)
        estimates = _validate_estimates(sep.separate(chunk), len(chunk))
        core = end - start
        weights = _triangular_weights(core) if crossfade else np.ones(core)
        for c in CLASS_ORDER:
            acc[c][:, start:end] += (
                estimates[c].samples[:, pad_left : pad_left + core] * weights
            )
        den[start:end] += weights
        if end >= n:
            break
        start += hop
    return {c: AudioBuffer(acc[c] / den) for c in CLASS_ORDER}


def infer_shifted(
    sep: Separator,
    mixture: AudioBuffer,
    n_shifts: int,
    max_shift: int,
    seed: int = 0,
) -> Estimates:
    """Average estimates over random integer time shifts.

    Shifts are circular (exact integer-sample, no resampling) and
    compensated before averaging; draws come from a PCG64 generator seeded
    with the given seed, so results are deterministic.
    """
    if n_shifts < 1:
        raise SeparationError("n_shifts must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    shifts = rng.integers(0, max_shift + 1, size=n_shifts)
    acc = {c: np.zeros_like(mixture.samples) for c in CLASS_ORDER}
    for shift in shifts:
        shifted = AudioBuffer(np.roll(mixture.samples, int(shift), axis=1))
        estimates = _validate_estimates(sep.separate(shifted), len(mixture))
        for c in CLASS_ORDER:
            acc[c] += np.roll(estimates[c].samples, -int(shift), axis=1)
    return {c: AudioBuffer(acc[c] / n_shifts) for c in CLASS_ORDER}


def infer_phase_inverted(sep: Separator, mixture: AudioBuffer) -> Estimates:
    """Average sep(x) with -sep(-x); a no-op for odd-symmetric separators."""
    direct = _validate_estimates(sep.separate(mixture), len(mixture))
    inverted = _validate_estimates(
        sep.separate(AudioBuffer(-mixture.samples)), len(mixture)
    )
    return {
        c: AudioBuffer((direct[c].samples - inverted[c].samples) / 2.0)
        for c in CLASS_ORDER
    }


@dataclass
class BlendWeights:
    """Per-source model weights; each source's weights must sum to 1."""

    per_source: dict[SourceClass, list[tuple[str, float]]]

    def __post_init__(self):
        for c, entries in self.per_source.items():
            if any(w < 0 for _, w in entries):
                raise WeightMismatch(f"negative weight for {c.value}")
            total = sum(w for _, w in entries)
            if abs(total - 1.0) > 1e-9:
                raise WeightMismatch(
                    f"weights for {c.value} sum to {total}, expected 1"
                )

    @classmethod
    def uniform(cls, model_ids: list[str]) -> "BlendWeights":
        w = 1.0 / len(model_ids)
        return cls({c: [(m, w) for m in model_ids] for c in CLASS_ORDER})


def blend(estimate_sets: dict[str, Estimates], weights: BlendWeights) -> Estimates:
    """Per-source weighted sum of time-domain estimates across models."""
    if not estimate_sets:
        raise WeightMismatch("no estimate sets to blend")
    n = len(next(iter(estimate_sets.values()))[SourceClass.VOCALS])
    out = {}
    for c in CLASS_ORDER:
        entries = weights.per_source.get(c)
        if not entries:
            raise WeightMismatch(f"no weights for {c.value}")
        acc = np.zeros((2, n))
        for model_id, w in entries:
            if model_id not in estimate_sets:
                raise WeightMismatch(f"weights reference unknown model {model_id!r}")
            est = estimate_sets[model_id][c]
            if len(est) != n:
                raise LengthMismatch("estimate sets have mismatched lengths")
            acc += w * est.samples
        out[c] = AudioBuffer(acc)
    return out


def two_stage_instrumental(
    vocal_sep: Separator, rest_sep: Separator, mixture: AudioBuffer
) -> Estimates:
    """Separate vocals first, then the rest from the instrumental residual.

    vocals = vocal_sep(x).vocals; the instrumental x - vocals feeds the
    second separator, whose bass/drums/other estimates are returned with the
    stage-one vocals.
    """
    vocals = _validate_estimates(vocal_sep.separate(mixture), len(mixture))[
        SourceClass.VOCALS
    ]
    instrumental = residual(mixture, vocals)
    rest = _validate_estimates(rest_sep.separate(instrumental), len(mixture))
    return {
        SourceClass.VOCALS: vocals,
        SourceClass.BASS: rest[SourceClass.BASS],
        SourceClass.DRUMS: rest[SourceClass.DRUMS],
        SourceClass.OTHER: rest[SourceClass.OTHER],
    }


def infer_augmented(
    sep: Separator,
    mixture: AudioBuffer,
    aug: InferenceAugmentation,
    window_len: int | None = None,
    seed: int = 0,
) -> Estimates:
    """Apply the configured ensembling wrappers around a separator."""
    base = sep
    if aug.phase_invert:
        base = _PhaseInvertWrapper(base)
    if aug.n_shifts > 1 or aug.max_shift > 0:
        base = _ShiftWrapper(base, aug.n_shifts, aug.max_shift, seed)
    if window_len is not None:
        return infer_overlapped(base, mixture, window_len, aug.overlap_ratio)
    return base.separate(mixture)


class _PhaseInvertWrapper:
    thread_safe = True

    def __init__(self, sep: Separator):
        self.sep = sep

    def separate(self, mixture: AudioBuffer) -> Estimates:
        return infer_phase_inverted(self.sep, mixture)


class _ShiftWrapper:
    thread_safe = True

    def __init__(self, sep: Separator, n_shifts: int, max_shift: int, seed: int):
        self.sep = sep
        self.n_shifts = n_shifts
        self.max_shift = max_shift
        self.seed = seed

    def separate(self, mixture: AudioBuffer) -> Estimates:
        return infer_shifted(self.sep, mixture, self.n_shifts, self.max_shift, self.seed)
