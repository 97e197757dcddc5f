"""Audio-core: WAV I/O, filters, gain, STFT round trips."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from demixlab.audio import (
    SAMPLE_RATE,
    AudioBuffer,
    FilterSpec,
    FrameSpec,
    InvalidSpec,
    MalformedFile,
    NonColaSpec,
    UnsupportedFormat,
    UnsupportedSampleRate,
    apply_filter,
    apply_gain_db,
    design_filter,
    istft,
    load_wav,
    mix,
    save_wav,
    stft,
)

from conftest import tone


class TestWavIo:
    def test_float32_round_trip_identity(self, tmp_path, rng):
        buf = AudioBuffer(rng.uniform(-1, 1, size=(2, 4410)).astype(np.float32))
        save_wav(buf, tmp_path / "x.wav", format="float32")
        loaded = load_wav(tmp_path / "x.wav")
        np.testing.assert_array_equal(loaded.samples, buf.samples)

    def test_pcm16_round_trip_quantization_bound(self, tmp_path, rng):
        buf = AudioBuffer(rng.uniform(-1, 1 - 2**-14, size=(2, 4410)))
        save_wav(buf, tmp_path / "x.wav", format="pcm16")
        loaded = load_wav(tmp_path / "x.wav")
        assert np.max(np.abs(loaded.samples - buf.samples)) <= 2**-15

    def test_identity_load_length(self, tmp_path):
        buf = tone(441.0, 441, fade=0)
        save_wav(buf, tmp_path / "x.wav")
        assert len(load_wav(tmp_path / "x.wav")) == 441

    def test_pcm16_full_scale_square_wave_decodes_exactly(self, tmp_path):
        square = np.where(np.arange(441) % 2 == 0, 32767, -32767).astype(np.int16)
        wavfile.write(tmp_path / "sq.wav", SAMPLE_RATE, np.stack([square, square], axis=1))
        loaded = load_wav(tmp_path / "sq.wav")
        expected = square.astype(np.float64) / 32768.0
        assert np.max(np.abs(loaded.samples[0] - expected)) < 1e-6

    def test_pcm24_known_bytes(self, tmp_path):
        # Hand-built 24-bit RIFF: two stereo frames with known sample values.
        frames = [(0x7FFFFF, 0x000000), (-0x800000, 0x400000)]
        data = b"".join(
            struct.pack("<i", v << 8)[1:] for frame in frames for v in frame
        )
        fmt = struct.pack("<HHIIHH", 1, 2, SAMPLE_RATE, SAMPLE_RATE * 6, 6, 24)
        body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
        body += b"data" + struct.pack("<I", len(data)) + data
        blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
        (tmp_path / "p24.wav").write_bytes(blob)
        loaded = load_wav(tmp_path / "p24.wav")
        np.testing.assert_allclose(
            loaded.samples[0], [0x7FFFFF / 0x800000, -1.0], atol=1e-12
        )
        np.testing.assert_allclose(loaded.samples[1], [0.0, 0.5], atol=1e-12)

    def test_wrong_sample_rate_rejected(self, tmp_path):
        wavfile.write(tmp_path / "x.wav", 48000, np.zeros((100, 2), dtype=np.float32))
        with pytest.raises(UnsupportedSampleRate):
            load_wav(tmp_path / "x.wav")

    def test_unsupported_bit_depth_rejected(self, tmp_path):
        wavfile.write(tmp_path / "x.wav", SAMPLE_RATE, np.zeros((100, 2), dtype=np.float64))
        with pytest.raises(UnsupportedFormat):
            load_wav(tmp_path / "x.wav")

    def test_mono_rejected_unless_allowed(self, tmp_path):
        wavfile.write(
            tmp_path / "m.wav", SAMPLE_RATE, np.linspace(-0.5, 0.5, 100, dtype=np.float32)
        )
        with pytest.raises(UnsupportedFormat):
            load_wav(tmp_path / "m.wav")
        loaded = load_wav(tmp_path / "m.wav", allow_mono=True)
        np.testing.assert_array_equal(loaded.samples[0], loaded.samples[1])

    def test_malformed_file(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFFxxxxWAVEfm")
        with pytest.raises(MalformedFile):
            load_wav(tmp_path / "bad.wav")

    def test_nan_buffer_rejected_before_write(self, tmp_path):
        buf = AudioBuffer(np.zeros((2, 16)))
        buf.samples[0, 3] = np.nan  # simulate post-construction corruption
        with pytest.raises(MalformedFile):
            save_wav(buf, tmp_path / "x.wav")

    def test_nan_constructor_rejected(self):
        with pytest.raises(MalformedFile):
            AudioBuffer(np.full((2, 4), np.nan))


class TestFilters:
    def test_lowpass_dc_gain_is_unity(self):
        coeffs = design_filter(FilterSpec("lowpass", 4, cutoff_high_hz=1000.0))
        assert abs(abs(coeffs.frequency_response(np.array([0.0]))[0]) - 1.0) < 1e-9

    @pytest.mark.parametrize("order", [3, 4, 6, 9])
    def test_lowpass_cutoff_at_minus_3db(self, order):
        coeffs = design_filter(FilterSpec("lowpass", order, cutoff_high_hz=1000.0))
        mag_db = 20 * math.log10(abs(coeffs.frequency_response(np.array([1000.0]))[0]))
        assert abs(mag_db - (-3.0)) < 0.5

    def test_bandpass_cutoffs_at_minus_3db(self):
        coeffs = design_filter(
            FilterSpec("bandpass", 5, cutoff_low_hz=300.0, cutoff_high_hz=8000.0)
        )
        mags = 20 * np.log10(np.abs(coeffs.frequency_response(np.array([300.0, 8000.0]))))
        assert np.all(np.abs(mags - (-3.0)) < 0.5)

    def test_order6_stopband_attenuation(self):
        coeffs = design_filter(FilterSpec("lowpass", 6, cutoff_high_hz=1000.0))
        mag_db = 20 * math.log10(abs(coeffs.frequency_response(np.array([4000.0]))[0]))
        assert mag_db <= -60.0

    def test_design_deterministic(self):
        spec = FilterSpec("bandpass", 7, cutoff_low_hz=250.0, cutoff_high_hz=9500.0)
        a, b = design_filter(spec), design_filter(spec)
        np.testing.assert_array_equal(a.sos, b.sos)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="lowpass", order=2, cutoff_high_hz=1000.0),
            dict(kind="lowpass", order=10, cutoff_high_hz=1000.0),
            dict(kind="lowpass", order=4, cutoff_high_hz=0.0),
            dict(kind="lowpass", order=4, cutoff_high_hz=30000.0),
            dict(kind="bandpass", order=4, cutoff_low_hz=900.0, cutoff_high_hz=400.0),
            dict(kind="highpass", order=4, cutoff_high_hz=400.0),
        ],
    )
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(InvalidSpec):
            FilterSpec(**kwargs)

    def test_zero_input_zero_output(self):
        coeffs = design_filter(FilterSpec("lowpass", 5, cutoff_high_hz=2000.0))
        out = apply_filter(AudioBuffer.silent(1000), coeffs)
        assert out.energy() == 0.0

    def test_impulse_response_matches_direct_recurrence(self):
        coeffs = design_filter(FilterSpec("lowpass", 5, cutoff_high_hz=2000.0))
        impulse = np.zeros((2, 256))
        impulse[:, 0] = 1.0
        out = apply_filter(AudioBuffer(impulse), coeffs).samples[0]

        # Independent oracle: evaluate the biquad cascade sample by sample.
        x = np.zeros(256)
        x[0] = 1.0
        for b0, b1, b2, _, a1, a2 in coeffs.sos:
            y = np.zeros_like(x)
            for n in range(len(x)):
                y[n] = b0 * x[n]
                if n >= 1:
                    y[n] += b1 * x[n - 1] - a1 * y[n - 1]
                if n >= 2:
                    y[n] += b2 * x[n - 2] - a2 * y[n - 2]
            x = y
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_noise_band_energy_drop(self, rng):
        noise = AudioBuffer(rng.standard_normal((2, SAMPLE_RATE)) * 0.3)
        coeffs = design_filter(FilterSpec("lowpass", 6, cutoff_high_hz=900.0))
        filtered = apply_filter(noise, coeffs)

        def band_energy(buf, lo_hz):
            spectrum = np.fft.rfft(buf.samples, axis=1)
            freqs = np.fft.rfftfreq(buf.samples.shape[1], 1.0 / SAMPLE_RATE)
            return float(np.sum(np.abs(spectrum[:, freqs >= lo_hz]) ** 2))

        drop_db = 10 * math.log10(band_energy(noise, 2000.0) / band_energy(filtered, 2000.0))
        assert drop_db >= 20.0


class TestGain:
    def test_zero_db_identity(self, rng):
        buf = AudioBuffer(rng.uniform(-1, 1, (2, 100)))
        np.testing.assert_array_equal(apply_gain_db(buf, 0.0).samples, buf.samples)

    def test_minus_6db_halves(self, rng):
        buf = AudioBuffer(rng.uniform(-1, 1, (2, 100)))
        out = apply_gain_db(buf, -6.02059991327962)
        np.testing.assert_allclose(out.samples, buf.samples / 2, atol=1e-9)

    def test_gain_round_trip(self, rng):
        buf = AudioBuffer(rng.uniform(-1, 1, (2, 100)))
        out = apply_gain_db(apply_gain_db(buf, -12.0), 12.0)
        np.testing.assert_allclose(out.samples, buf.samples, atol=1e-9)

    def test_non_finite_gain_rejected(self):
        with pytest.raises(InvalidSpec):
            apply_gain_db(AudioBuffer.silent(4), math.inf)


class TestLinearity:
    @given(
        a=st.floats(-2, 2, allow_nan=False),
        b=st.floats(-2, 2, allow_nan=False),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_filter_and_gain_linear(self, a, b, seed):
        gen = np.random.default_rng(seed)
        x = gen.standard_normal((2, 2048))
        y = gen.standard_normal((2, 2048))
        coeffs = design_filter(FilterSpec("lowpass", 4, cutoff_high_hz=3000.0))

        for op in (lambda s: apply_filter(AudioBuffer(s), coeffs).samples,
                    lambda s: apply_gain_db(AudioBuffer(s), -7.5).samples):
            combined = op(a * x + b * y)
            separate = a * op(x) + b * op(y)
            scale = max(1.0, np.max(np.abs(separate)))
            assert np.max(np.abs(combined - separate)) / scale < 1e-9


class TestStft:
    def test_zero_round_trip(self):
        frames = FrameSpec(1024, 256)
        spec = stft(AudioBuffer.silent(5000), frames)
        assert np.all(spec.data == 0)
        assert istft(spec).energy() == 0.0

    @pytest.mark.parametrize("hop_div", [4, 2])
    def test_perfect_reconstruction_hann(self, hop_div, rng):
        frames = FrameSpec(1024, 1024 // hop_div, "hann")
        x = AudioBuffer(rng.standard_normal((2, 44100)) * 0.4)
        y = istft(stft(x, frames))
        assert len(y) == len(x)
        assert np.abs(y.samples - x.samples).max() <= 1e-6

    def test_sine_round_trip(self):
        frames = FrameSpec(1024, 256)
        x = tone(441.0, 44100, fade=0)
        y = istft(stft(x, frames))
        assert np.abs(y.samples - x.samples).max() <= 1e-6

    def test_rectangular_no_overlap(self, rng):
        frames = FrameSpec(512, 512, "rectangular")
        x = AudioBuffer(rng.standard_normal((2, 4096)))
        y = istft(stft(x, frames))
        np.testing.assert_allclose(y.samples, x.samples, atol=1e-10)

    def test_parseval_per_frame(self, rng):
        frames = FrameSpec(1024, 256)
        x = AudioBuffer(rng.standard_normal((2, 8192)) * 0.5)
        spec = stft(x, frames).data  # (2, bins, frames)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)
        hop, frame = frames.hop_len, frames.frame_len
        padded = np.zeros((2, (spec.shape[2] - 1) * hop + frame))
        padded[:, hop : hop + len(x)] = x.samples  # mirror the analysis padding
        for k in range(spec.shape[2]):
            chunk = padded[:, k * hop : k * hop + frame]
            time_energy = np.sum((chunk * window) ** 2)
            bins = spec[:, :, k]
            spec_energy = (
                np.sum(np.abs(bins[:, 1:-1]) ** 2) * 2
                + np.sum(np.abs(bins[:, 0]) ** 2)
                + np.sum(np.abs(bins[:, -1]) ** 2)
            ) / frame
            assert abs(spec_energy - time_energy) <= 1e-6 * max(time_energy, 1e-12)

    def test_non_cola_spec_rejected(self):
        with pytest.raises(NonColaSpec):
            FrameSpec(1024, 1024, "hann")

    def test_bad_hop_rejected(self):
        with pytest.raises(InvalidSpec):
            FrameSpec(1024, 0)
        with pytest.raises(InvalidSpec):
            FrameSpec(1024, 2048)


class TestBufferBasics:
    def test_mix_length_mismatch(self):
        with pytest.raises(UnsupportedFormat):
            mix([AudioBuffer.silent(4), AudioBuffer.silent(5)])

    def test_shape_validation(self):
        with pytest.raises(UnsupportedFormat):
            AudioBuffer(np.zeros(16))
        with pytest.raises(UnsupportedSampleRate):
            AudioBuffer(np.zeros((2, 4)), sample_rate=48000)
