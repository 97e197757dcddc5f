"""Dataset manifests, taxonomy grouping, mixture consistency."""

import json

import numpy as np
import pytest

from demixlab.audio import AudioBuffer
from demixlab.dataset import (
    CLASS_ORDER,
    DEFAULT_TAXONOMY,
    DuplicateSongId,
    LengthMismatch,
    Manifest,
    MissingFile,
    RawStem,
    SchemaError,
    SongEntry,
    SongRef,
    SourceClass,
    UnknownLabel,
    check_mixture_consistency,
    group_stems,
    load_manifest,
    materialize_manifest,
    save_manifest,
)

from conftest import synth_manifest, tone, write_wav_tree


class TestTaxonomy:
    def test_default_covers_ten_instruments(self):
        for label in ("vocals", "bass", "drums", "guitar", "piano", "keys",
                      "strings", "winds", "percussion", "fx"):
            DEFAULT_TAXONOMY.resolve(label)

    def test_normalization(self):
        assert DEFAULT_TAXONOMY.resolve(" Guitar ") is SourceClass.OTHER
        assert DEFAULT_TAXONOMY.resolve("FX") is SourceClass.OTHER

    def test_unknown_label_never_other(self):
        with pytest.raises(UnknownLabel):
            DEFAULT_TAXONOMY.resolve("el_gtr")

    def test_overrides(self):
        custom = DEFAULT_TAXONOMY.with_overrides({"el_gtr": SourceClass.OTHER})
        assert custom.resolve("el_gtr") is SourceClass.OTHER


class TestGroupStems:
    def test_one_stem_per_class_identity(self):
        stems = [
            RawStem("vocals", tone(300, 1000)),
            RawStem("bass", tone(80, 1000)),
            RawStem("drums", tone(5000, 1000)),
            RawStem("guitar", tone(700, 1000)),
        ]
        grouped = group_stems(stems)
        np.testing.assert_array_equal(
            grouped[SourceClass.VOCALS].samples, stems[0].audio.samples
        )
        np.testing.assert_array_equal(
            grouped[SourceClass.OTHER].samples, stems[3].audio.samples
        )

    def test_multiple_other_stems_summed(self):
        g1, g2, p = tone(700, 500), tone(900, 500), tone(1100, 500)
        grouped = group_stems(
            [RawStem("guitar", g1), RawStem("guitar", g2), RawStem("piano", p)]
        )
        np.testing.assert_allclose(
            grouped[SourceClass.OTHER].samples,
            g1.samples + g2.samples + p.samples,
            atol=0,
        )
        assert grouped[SourceClass.VOCALS].energy() == 0.0

    def test_unknown_label_raises(self):
        with pytest.raises(UnknownLabel):
            group_stems([RawStem("el_gtr", tone(700, 100))])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            group_stems([RawStem("bass", tone(80, 100)), RawStem("drums", tone(900, 200))])

    def test_energy_conservation_by_construction(self, rng):
        labels = ["vocals", "bass", "drums", "guitar", "piano", "fx"]
        stems = [
            RawStem(label, AudioBuffer(rng.standard_normal((2, 256)))) for label in labels
        ]
        grouped = group_stems(stems)
        total_grouped = sum(grouped[c].samples for c in CLASS_ORDER)
        total_raw = sum(s.audio.samples for s in stems)
        # Regrouped float summation differs only in association order.
        np.testing.assert_allclose(total_grouped, total_raw, rtol=0, atol=1e-12)


class TestMixtureConsistency:
    def test_exact_sum_is_consistent(self, song):
        consistent, err = check_mixture_consistency(song)
        assert consistent and err == 0.0

    def test_perturbed_mixture_flagged(self, song):
        perturbed = song.mixture.samples.copy()
        perturbed[0, 100] += 1e-3
        bad = SongEntry(id=song.id, stems=song.stems, mixture=AudioBuffer(perturbed))
        consistent, err = check_mixture_consistency(bad, tolerance=1e-6)
        assert not consistent
        assert abs(err - 1e-3) < 1e-9


class TestManifestJson:
    def test_empty_manifest_valid(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"version": 1, "songs": []}))
        manifest = load_manifest(tmp_path / "m.json")
        assert manifest.song_ids() == []

    def test_missing_wav_named(self, tmp_path):
        doc = {"version": 1, "songs": [{"id": "s", "stems": {"vocals": "gone.wav"}}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(MissingFile, match="gone.wav"):
            load_manifest(tmp_path / "m.json")

    def test_round_trip_three_song_fixture(self, tmp_path):
        source = synth_manifest(n_songs=3, n_samples=4096)
        written = write_wav_tree(source, tmp_path)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.song_ids() == ["song000", "song001", "song002"]
        entry = loaded.load_song("song001")
        reference = source.load_song("song001")
        for c in CLASS_ORDER:
            np.testing.assert_allclose(
                entry.stems[c].samples, reference.stems[c].samples, atol=1e-6
            )
        assert entry.mixture_consistent is True

    def test_duplicate_song_id(self):
        stems = {"vocals": tone(300, 64)}
        with pytest.raises(DuplicateSongId):
            Manifest(songs=[SongRef("a", stems), SongRef("a", stems)])

    def test_schema_error_on_garbage(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(SchemaError):
            load_manifest(tmp_path / "m.json")
        (tmp_path / "m2.json").write_text(json.dumps({"songs": [{"id": "x"}]}))
        with pytest.raises(SchemaError):
            load_manifest(tmp_path / "m2.json")

    def test_unresolvable_label_rejected_at_load(self, tmp_path):
        source = synth_manifest(n_songs=1, n_samples=256)
        source.songs[0].stems["mystery_thing"] = tone(123, 256)
        with pytest.raises(UnknownLabel):
            write_wav_tree(source, tmp_path)

    def test_custom_taxonomy_from_json(self, tmp_path):
        source = synth_manifest(n_songs=1, n_samples=2048)
        tree = materialize_manifest(source, tmp_path)
        tree.songs[0].stems["synth_lead"] = tree.songs[0].stems.pop("guitar")
        tree = Manifest(
            songs=tree.songs,
            taxonomy=DEFAULT_TAXONOMY.with_overrides({"synth_lead": SourceClass.OTHER}),
        )
        save_manifest(tree, tmp_path / "manifest.json")
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.taxonomy.resolve("synth_lead") is SourceClass.OTHER
        loaded.load_song(loaded.song_ids()[0])


class TestSongEntry:
    def test_missing_class_rejected(self, song):
        stems = dict(song.stems)
        del stems[SourceClass.DRUMS]
        with pytest.raises(SchemaError):
            SongEntry(id="x", stems=stems)

    def test_unequal_lengths_rejected(self, song):
        stems = dict(song.stems)
        stems[SourceClass.BASS] = tone(80, 123)
        with pytest.raises(LengthMismatch):
            SongEntry(id="x", stems=stems)

    def test_lazy_load_from_disk(self, tmp_path):
        written = write_wav_tree(synth_manifest(n_songs=2, n_samples=2048), tmp_path)
        loaded = load_manifest(tmp_path / "manifest.json")
        entry = loaded.load_song("song000")
        assert entry.n_samples == 2048
