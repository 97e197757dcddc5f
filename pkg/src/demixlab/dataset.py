"""Stem dataset manifests and the four-class source taxonomy.

A manifest is a JSON index of songs; each song maps raw stem labels to WAV
paths. Audio is loaded lazily per song and grouped into the four challenge
classes (vocals, bass, drums, other) through a taxonomy. A song's mixture is
either a stored file or the sample-wise sum of its stems.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, load_wav, mix, save_wav


class DatasetError(Exception):
    pass


class SchemaError(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


class DuplicateSongId(DatasetError):
    pass


class UnknownLabel(DatasetError):
    pass


class LengthMismatch(DatasetError):
    pass


class SourceClass(Enum):
    """The four challenge source classes."""

    VOCALS = "vocals"
    BASS = "bass"
    DRUMS = "drums"
    OTHER = "other"

    @classmethod
    def from_name(cls, name: str) -> "SourceClass":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise SchemaError(f"unknown source class {name!r}") from None


CLASS_ORDER = (SourceClass.VOCALS, SourceClass.BASS, SourceClass.DRUMS, SourceClass.OTHER)


def _normalize_label(label: str) -> str:
    return label.strip().lower().replace("-", "_").replace(" ", "_")


_TAKE_SUFFIX = re.compile(r"_*\d+$")


def base_instrument(label: str) -> str:
    """Normalized label with any numbered-take suffix stripped.

    Songs often carry several takes of one instrument under labels like
    'guitar 1', 'guitar_2'; manifests key stems by label, so the take number
    is part of the key while the instrument identity is the base name.
    """
    key = _normalize_label(label)
    base = _TAKE_SUFFIX.sub("", key)
    return base or key


@dataclass(frozen=True)
class Taxonomy:
    """Map from normalized instrument labels to source classes.

    Numbered takes ('guitar_2') resolve to their base instrument. Unknown
    labels are an error, never silently 'other'.
    """

    entries: dict[str, SourceClass]

    def resolve(self, label: str) -> SourceClass:
        key = _normalize_label(label)
        if not key:
            raise UnknownLabel("empty stem label")
        if key in self.entries:
            return self.entries[key]
        base = base_instrument(label)
        if base in self.entries:
            return self.entries[base]
        raise UnknownLabel(f"label {label!r} not covered by the taxonomy")

    def with_overrides(self, overrides: dict[str, SourceClass]) -> "Taxonomy":
        merged = dict(self.entries)
        merged.update({_normalize_label(k): v for k, v in overrides.items()})
        return Taxonomy(merged)


#: Ten-instrument default plus the four class names themselves, so both
#: raw-labeled and already-grouped datasets resolve out of the box.
DEFAULT_TAXONOMY = Taxonomy(
    {
        "vocals": SourceClass.VOCALS,
        "bass": SourceClass.BASS,
        "drums": SourceClass.DRUMS,
        "guitar": SourceClass.OTHER,
        "piano": SourceClass.OTHER,
        "keys": SourceClass.OTHER,
        "strings": SourceClass.OTHER,
        "winds": SourceClass.OTHER,
        "percussion": SourceClass.OTHER,
        "fx": SourceClass.OTHER,
        "other": SourceClass.OTHER,
    }
)

#: The raw instrument vocabulary of the default taxonomy.
DEFAULT_INSTRUMENTS = (
    "vocals",
    "bass",
    "drums",
    "guitar",
    "piano",
    "keys",
    "strings",
    "winds",
    "percussion",
    "fx",
)


@dataclass
class RawStem:
    """One labeled stem recording, before class grouping."""

    label: str
    audio: AudioBuffer

    def __post_init__(self):
        if not self.label:
            raise UnknownLabel("stem label must be non-empty")


@dataclass
class SongEntry:
    """A song loaded into memory: four class stems plus an optional mixture.

    `mixture_consistent` records whether the stored mixture equals the stem
    sum at load tolerance; it stays None when no mixture is stored.
    """

    id: str
    stems: dict[SourceClass, AudioBuffer]
    mixture: AudioBuffer | None = None
    mixture_consistent: bool | None = None

    def __post_init__(self):
        missing = [c for c in CLASS_ORDER if c not in self.stems]
        if missing:
            raise SchemaError(f"song {self.id}: missing classes {missing}")
        lengths = {len(b) for b in self.stems.values()}
        if len(lengths) != 1:
            raise LengthMismatch(f"song {self.id}: stems have lengths {sorted(lengths)}")
        if self.mixture is not None and len(self.mixture) != lengths.pop():
            raise LengthMismatch(f"song {self.id}: mixture length differs from stems")

    def stem_sum(self) -> AudioBuffer:
        return mix([self.stems[c] for c in CLASS_ORDER])

    def mixture_or_sum(self) -> AudioBuffer:
        return self.mixture if self.mixture is not None else self.stem_sum()

    @property
    def n_samples(self) -> int:
        return len(self.stems[SourceClass.VOCALS])


def group_stems(
    raw: list[RawStem], taxonomy: Taxonomy = DEFAULT_TAXONOMY
) -> dict[SourceClass, AudioBuffer]:
    """Sum raw stems into the four classes; silent buffer for empty classes."""
    if not raw:
        raise LengthMismatch("cannot group an empty stem list")
    lengths = {len(s.audio) for s in raw}
    if len(lengths) != 1:
        raise LengthMismatch(f"raw stems have lengths {sorted(lengths)}")
    n = lengths.pop()
    grouped: dict[SourceClass, list[AudioBuffer]] = {c: [] for c in CLASS_ORDER}
    for stem in raw:
        grouped[taxonomy.resolve(stem.label)].append(stem.audio)
    return {
        c: mix(members) if members else AudioBuffer.silent(n)
        for c, members in grouped.items()
    }


def check_mixture_consistency(
    song: SongEntry, tolerance: float = 1e-6
) -> tuple[bool, float]:
    """Compare the stored mixture to the sample-wise stem sum.

    Returns (consistent, max_abs_error). Songs without a stored mixture are
    trivially consistent with error 0. Reports, never raises.
    """
    if song.mixture is None:
        return True, 0.0
    diff = song.mixture.samples - song.stem_sum().samples
    max_error = float(np.max(np.abs(diff))) if diff.size else 0.0
    return max_error <= tolerance, max_error


@dataclass
class SongRef:
    """Manifest entry for one song: stem label -> WAV path or in-memory audio."""

    id: str
    stems: dict[str, Path | AudioBuffer]
    mixture: Path | AudioBuffer | None = None


@dataclass
class Manifest:
    """A dataset of songs, stored as file references plus a taxonomy."""

    songs: list[SongRef]
    taxonomy: Taxonomy = field(default_factory=lambda: DEFAULT_TAXONOMY)
    provenance: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for song in self.songs:
            if song.id in seen:
                raise DuplicateSongId(f"duplicate song id {song.id!r}")
            seen.add(song.id)
        for song in self.songs:
            for label in song.stems:
                self.taxonomy.resolve(label)

    def song_ids(self) -> list[str]:
        return [s.id for s in self.songs]

    def ref(self, song_id: str) -> SongRef:
        for song in self.songs:
            if song.id == song_id:
                return song
        raise KeyError(song_id)

    def _load_audio(self, source: Path | AudioBuffer) -> AudioBuffer:
        if isinstance(source, AudioBuffer):
            return source
        return load_wav(source)

    def load_raw_stems(self, ref: SongRef) -> list[RawStem]:
        return [
            RawStem(label, self._load_audio(src)) for label, src in ref.stems.items()
        ]

    def load_song(self, song_id: str, consistency_tolerance: float = 1e-6) -> SongEntry:
        """Load one song, grouping raw stems into the four classes.

        When a mixture is stored the consistency flag records whether it
        matches the stem sum within the tolerance.
        """
        ref = self.ref(song_id)
        stems = group_stems(self.load_raw_stems(ref), self.taxonomy)
        mixture = self._load_audio(ref.mixture) if ref.mixture is not None else None
        entry = SongEntry(id=ref.id, stems=stems, mixture=mixture)
        if mixture is not None:
            entry.mixture_consistent, _ = check_mixture_consistency(
                entry, consistency_tolerance
            )
        return entry

    def load_songs(self) -> list[SongEntry]:
        return [self.load_song(song_id) for song_id in self.song_ids()]


def _resolve_path(root: Path, rel: str, missing: list[str]) -> Path:
    path = (root / rel).resolve()
    if not path.exists():
        missing.append(str(path))
    return path


def load_manifest(path: str | Path) -> Manifest:
    """Load and validate a manifest JSON file.

    Schema: {version, songs: [{id, stems: {label: relpath}, mixture?}],
    taxonomy?: {label: class}, provenance?: {...}}. Paths are relative to
    the manifest location; every referenced file must exist.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path}: no such manifest")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "songs" not in doc:
        raise SchemaError(f"{path}: manifest must be an object with a 'songs' list")
    root = path.parent
    taxonomy = DEFAULT_TAXONOMY
    if doc.get("taxonomy"):
        overrides = {
            label: SourceClass.from_name(cls) for label, cls in doc["taxonomy"].items()
        }
        taxonomy = DEFAULT_TAXONOMY.with_overrides(overrides)
    missing: list[str] = []
    songs = []
    for entry in doc["songs"]:
        if not isinstance(entry, dict) or "id" not in entry or "stems" not in entry:
            raise SchemaError(f"{path}: song entries need 'id' and 'stems'")
        stems = {
            label: _resolve_path(root, rel, missing)
            for label, rel in entry["stems"].items()
        }
        mixture = (
            _resolve_path(root, entry["mixture"], missing)
            if entry.get("mixture")
            else None
        )
        songs.append(SongRef(id=str(entry["id"]), stems=stems, mixture=mixture))
    if missing:
        raise MissingFile("missing audio files: " + ", ".join(missing))
    return Manifest(
        songs=songs,
        taxonomy=taxonomy,
        provenance=doc.get("provenance", {}),
        root=root,
    )


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest as JSON with paths relative to its location.

    In-memory stems must be materialized (see `materialize_manifest`) first.
    """
    path = Path(path)
    root = path.parent.resolve()

    def rel(p: Path | AudioBuffer) -> str:
        if isinstance(p, AudioBuffer):
            raise SchemaError("manifest holds in-memory audio; materialize it first")
        try:
            return str(Path(p).resolve().relative_to(root))
        except ValueError:
            return str(Path(p).resolve())

    doc = {
        "version": 1,
        "songs": [
            {
                "id": s.id,
                "stems": {label: rel(p) for label, p in s.stems.items()},
                **({"mixture": rel(s.mixture)} if s.mixture is not None else {}),
            }
            for s in manifest.songs
        ],
        "taxonomy": {
            label: cls.value for label, cls in sorted(manifest.taxonomy.entries.items())
        },
        "provenance": manifest.provenance,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def materialize_manifest(
    manifest: Manifest, out_dir: str | Path, wav_format: str = "float32"
) -> Manifest:
    """Write any in-memory audio of a manifest into a WAV tree under out_dir."""
    out_dir = Path(out_dir)
    songs = []
    for ref in manifest.songs:
        song_dir = out_dir / ref.id
        stems: dict[str, Path | AudioBuffer] = {}
        for label, src in ref.stems.items():
            if isinstance(src, AudioBuffer):
                dest = song_dir / f"{_normalize_label(label)}.wav"
                save_wav(src, dest, format=wav_format)
                stems[label] = dest
            else:
                stems[label] = src
        mixture = ref.mixture
        if isinstance(mixture, AudioBuffer):
            dest = song_dir / "mixture.wav"
            save_wav(mixture, dest, format=wav_format)
            mixture = dest
        songs.append(SongRef(id=ref.id, stems=stems, mixture=mixture))
    return Manifest(
        songs=songs,
        taxonomy=manifest.taxonomy,
        provenance=manifest.provenance,
        root=out_dir,
    )


def manifest_from_songs(
    entries: list[SongEntry],
    taxonomy: Taxonomy = DEFAULT_TAXONOMY,
    provenance: dict | None = None,
    keep_mixtures: bool = True,
) -> Manifest:
    """Build an in-memory manifest from loaded songs (class labels as stems)."""
    songs = [
        SongRef(
            id=e.id,
            stems={c.value: e.stems[c] for c in CLASS_ORDER},
            mixture=e.mixture if keep_mixtures else None,
        )
        for e in entries
    ]
    return Manifest(songs=songs, taxonomy=taxonomy, provenance=provenance or {})
