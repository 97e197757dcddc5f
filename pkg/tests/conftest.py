"""Shared synthetic fixtures.

Songs are built from sine stems whose frequencies sit exactly on STFT bin
centers (multiples of fs/frame_len) with raised-cosine edge fades, so the
four classes occupy disjoint spectral support and ideal-ratio masks are
exactly 0/1 outside roundoff. That makes oracle-based pipelines verifiable
at tight tolerances.
"""

from __future__ import annotations

import numpy as np
import pytest

from demixlab.audio import SAMPLE_RATE, AudioBuffer, FrameSpec
from demixlab.dataset import (
    CLASS_ORDER,
    Manifest,
    SongEntry,
    SongRef,
    SourceClass,
)

#: Frame spec used by oracle separators in tests.
TEST_FRAMES = FrameSpec(frame_len=1024, hop_len=256, window="hann")

#: Bin indexes per class on the 1024-sample grid, >= 112 bins apart so hann
#: window sidelobes of faded tones stay below -100 dB at every other class's
#: bin. All are multiples of 4 so the same tones are bin-centered on the
#: 256-sample grid used by the toy mask trainer.
CLASS_BINS = {
    SourceClass.VOCALS: 120,
    SourceClass.BASS: 8,
    SourceClass.DRUMS: 376,
    SourceClass.OTHER: 248,
}

#: Raw instrument label used to populate each class in synthetic songs.
CLASS_LABELS = {
    SourceClass.VOCALS: "vocals",
    SourceClass.BASS: "bass",
    SourceClass.DRUMS: "drums",
    SourceClass.OTHER: "guitar",
}


def bin_freq(bin_index: int, frame_len: int = 1024) -> float:
    return bin_index * SAMPLE_RATE / frame_len


def tone(
    freq: float,
    n_samples: int,
    amp: float = 0.4,
    phase: float = 0.0,
    fade: int = 4096,
    pan: float = 0.8,
) -> AudioBuffer:
    """Stereo sine with squared-raised-cosine fades; right channel scaled by pan.

    The C1-smooth ramp keeps fade splatter narrow, so tones on separated
    bins stay spectrally disjoint to well below -100 dB. Fades shrink to a
    quarter of the signal when it is short.
    """
    t = np.arange(n_samples)
    x = amp * np.sin(2.0 * np.pi * freq * t / SAMPLE_RATE + phase)
    fade = min(fade, n_samples // 4)
    if fade >= 16:
        ramp = (0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)) ** 2
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return AudioBuffer(np.stack([x, pan * x]))


def synth_song(
    song_id: str,
    n_samples: int = SAMPLE_RATE,
    amps: dict[SourceClass, float] | None = None,
    frame_len: int = 1024,
) -> SongEntry:
    amps = amps or {}
    stems = {
        c: tone(
            bin_freq(CLASS_BINS[c], frame_len),
            n_samples,
            amp=amps.get(c, 0.4),
            phase=0.3 * i,
        )
        for i, c in enumerate(CLASS_ORDER)
    }
    entry = SongEntry(id=song_id, stems=stems)
    entry.mixture = entry.stem_sum()
    entry.mixture_consistent = True
    return entry


def synth_manifest(
    n_songs: int = 3,
    n_samples: int = SAMPLE_RATE,
    seed: int = 0,
    with_mixture: bool = True,
) -> Manifest:
    """In-memory manifest with one raw stem per class, random amplitudes."""
    rng = np.random.default_rng(seed)
    songs = []
    for k in range(n_songs):
        amps = {c: float(rng.uniform(0.2, 0.6)) for c in CLASS_ORDER}
        entry = synth_song(f"song{k:03d}", n_samples, amps)
        stems = {CLASS_LABELS[c]: entry.stems[c] for c in CLASS_ORDER}
        songs.append(
            SongRef(
                id=entry.id,
                stems=stems,
                mixture=entry.mixture if with_mixture else None,
            )
        )
    return Manifest(songs=songs)


#: Shared-bin index on the 1024 grid (bin 110 on the toy trainer's 256 grid).
SHARED_BIN = 440

#: Fixed per-class energy split on the shared bin: a global frequency mask
#: can fit the clean data exactly (ratios constant across songs).
SHARED_RATIOS = {
    SourceClass.VOCALS: 0.40,
    SourceClass.BASS: 0.28,
    SourceClass.DRUMS: 0.20,
    SourceClass.OTHER: 0.12,
}


def toy_corpus(n_songs: int, n_samples: int = 8000, seed: int = 0) -> Manifest:
    """Training corpus for the toy mask trainer.

    Each stem carries its class tone plus a common-phase tone on one shared
    bin whose per-class amplitude split is fixed across songs (only the
    overall level varies), so the clean data admits an exact global
    frequency mask with interior values. Mislabeled stems then pull those
    mask entries toward the wrong ratios.
    """
    rng = np.random.default_rng(seed)
    songs = []
    for k in range(n_songs):
        stems = {}
        level = float(rng.uniform(0.4, 1.2))
        for i, c in enumerate(CLASS_ORDER):
            own = tone(
                bin_freq(CLASS_BINS[c]), n_samples,
                amp=float(rng.uniform(0.2, 0.6)), phase=0.3 * i, fade=256,
            )
            shared = tone(
                bin_freq(SHARED_BIN), n_samples,
                amp=level * SHARED_RATIOS[c], phase=0.0, fade=256,
            )
            stems[CLASS_LABELS[c]] = AudioBuffer(own.samples + shared.samples)
        songs.append(SongRef(id=f"toy{k:03d}", stems=stems))
    return Manifest(songs=songs)


def write_wav_tree(manifest: Manifest, out_dir) -> Manifest:
    """Materialize an in-memory manifest and save its JSON index."""
    from demixlab.dataset import materialize_manifest, save_manifest

    materialized = materialize_manifest(manifest, out_dir)
    save_manifest(materialized, out_dir / "manifest.json")
    return materialized


_ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE_RESULTS.append((name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(
            f"[{'PASS' if passed else 'FAIL'}] {name}"
        )


@pytest.fixture
def song() -> SongEntry:
    return synth_song("fixture_song")


@pytest.fixture
def manifest() -> Manifest:
    return synth_manifest()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
