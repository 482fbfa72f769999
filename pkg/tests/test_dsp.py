import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aadom.corpus import AudioClip
from aadom.dsp import (
    LOG_EPS,
    DEFAULT_BANDS,
    FrequencyBand,
    Spectrogram,
    band_crop,
    build_mel_filterbank,
    frame_count,
    full_band,
    log_mel,
    mel_spectrogram,
    read_spectrogram_cache,
    segment_clip,
    stft,
    write_spectrogram_cache,
)
from aadom.errors import ClipTooShort, DataError, InvalidBand, ShapeMismatch

from conftest import tone

SR = 16000


def _slaney_mel(f):
    # scalar reference: 3 mel per 200 Hz below 1 kHz, log spacing above
    if f < 1000:
        return 3 * f / 200
    return 15 + math.log(f / 1000) / (math.log(6.4) / 27)


@pytest.fixture(scope="module")
def fb():
    return build_mel_filterbank(SR)


class TestStft:
    def test_frame_count_ten_seconds(self):
        assert stft(AudioClip(np.zeros(160000), SR)).n_frames == 155
        assert frame_count(160000) == (160000 - 2048) // 1024 + 1

    def test_sine_peak_bin(self):
        spec = stft(AudioClip(tone(1000, 1.0), SR))
        assert np.all(np.argmax(spec.mags, axis=0) == 128)

    def test_too_short(self):
        with pytest.raises(ClipTooShort):
            stft(AudioClip(np.zeros(1000), SR))

    def test_matches_direct_dft(self):
        # explicit cos/sin sums over a single frame
        rng = np.random.default_rng(0)
        x = rng.standard_normal(2048 + 1024 * 2)
        spec = stft(AudioClip(x, SR))
        n = np.arange(2048)
        w = 0.5 - 0.5 * np.cos(2 * np.pi * n / 2048)
        frame = x[1024:1024 + 2048] * w
        for k in (0, 1, 17, 512, 1024):
            re = np.sum(frame * np.cos(2 * np.pi * k * n / 2048))
            im = np.sum(frame * np.sin(2 * np.pi * k * n / 2048))
            assert spec.mags[k, 1] == pytest.approx(math.hypot(re, im), rel=1e-9, abs=1e-9)

    def test_sine_energy_concentrated(self):
        spec = stft(AudioClip(tone(1000, 1.0, amp=1.0), SR))
        energy = spec.mags ** 2
        near = energy[126:131].sum(axis=0)
        assert np.all(near / energy.sum(axis=0) >= 0.9)

    def test_shape_and_nonnegative(self):
        spec = stft(AudioClip(np.random.default_rng(1).standard_normal(20000), SR))
        assert spec.mags.shape == (1025, frame_count(20000))
        assert np.all(spec.mags >= 0)


class TestBandCrop:
    def _spec(self, seed=0):
        x = np.random.default_rng(seed).standard_normal(SR)
        return stft(AudioClip(x, SR))

    def test_three_to_six_khz_bins(self):
        s = band_crop(self._spec(), FrequencyBand(3000, 6000))
        kept = np.flatnonzero(np.any(s.mags != 0, axis=1))
        assert kept[0] == 384 and kept[-1] == 768 and len(kept) == 385

    def test_full_band_identity(self):
        s = self._spec()
        np.testing.assert_array_equal(band_crop(s, full_band(SR)).mags, s.mags)

    def test_out_of_band_energy_zero_in_band_exact(self):
        s = self._spec(2)
        c = band_crop(s, FrequencyBand(2000, 5000))
        freqs = s.bin_freqs()
        out = (freqs < 2000) | (freqs > 5000)
        assert np.sum(c.mags[out] ** 2) == 0.0
        np.testing.assert_array_equal(c.mags[~out], s.mags[~out])

    def test_invalid_band(self):
        with pytest.raises(InvalidBand):
            band_crop(self._spec(), FrequencyBand(5000, 9000))
        with pytest.raises(InvalidBand):
            band_crop(self._spec(), FrequencyBand(3000, 3000))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 7999), st.floats(1, 8000), st.floats(0, 7999), st.floats(1, 8000))
    def test_idempotent_and_intersection(self, a, b, c, d):
        s = Spectrogram(np.random.default_rng(3).random((1025, 4)), SR)
        b1 = FrequencyBand(min(a, b), max(a, b) + 1e-3)
        b2 = FrequencyBand(min(c, d), max(c, d) + 1e-3)
        if b1.f_hi > 8000 or b2.f_hi > 8000:
            return
        once = band_crop(s, b1)
        np.testing.assert_array_equal(band_crop(once, b1).mags, once.mags)
        inter = b1.intersect(b2)
        if inter.f_lo < inter.f_hi:
            np.testing.assert_array_equal(band_crop(once, b2).mags, band_crop(s, inter).mags)

    def test_default_band_grid(self):
        assert len(DEFAULT_BANDS) == 9
        assert DEFAULT_BANDS[0] == FrequencyBand(0, 3000)
        assert DEFAULT_BANDS[1] == FrequencyBand(500, 3500)
        assert DEFAULT_BANDS[-1] == FrequencyBand(4000, 7000)

    def test_parse(self):
        assert FrequencyBand.parse("2000:5000") == FrequencyBand(2000, 5000)
        with pytest.raises(InvalidBand):
            FrequencyBand.parse("2k-5k")


class TestMelFilterbank:
    def test_shape_and_interior_centres(self, fb):
        assert fb.weights.shape == (128, 1025)
        assert fb.center_freqs[0] > 0 and fb.center_freqs[-1] < SR / 2

    def test_centres_follow_slaney_scale(self, fb):
        top = _slaney_mel(SR / 2)
        for i in (0, 10, 64, 127):
            m = top * (i + 1) / 129
            assert _slaney_mel(fb.center_freqs[i]) == pytest.approx(m, rel=1e-9)

    def test_every_interior_bin_covered(self, fb):
        cover = fb.weights.sum(axis=0)
        assert np.all(cover[1:-1] > 0)

    def test_equal_row_sums(self, fb):
        sums = fb.weights.sum(axis=1)
        assert np.max(np.abs(sums - sums[0])) < 1e-6

    def test_rows_triangular(self, fb):
        for row in fb.weights:
            assert np.all(row >= 0) and np.any(row > 0)
            nz = row[np.flatnonzero(row)[0]:np.flatnonzero(row)[-1] + 1]
            peak = np.argmax(nz)
            assert np.all(np.diff(nz[:peak + 1]) >= 0)
            assert np.all(np.diff(nz[peak:]) <= 0)


class TestMelSpectrogram:
    def test_silence_floor(self, fb):
        out = mel_spectrogram(Spectrogram(np.zeros((1025, 5)), SR), fb)
        np.testing.assert_allclose(out.values, math.log(LOG_EPS))
        assert out.values[0, 0] == pytest.approx(-13.8155, abs=1e-4)

    def test_scaling_shifts_by_log10(self, fb):
        mags = np.random.default_rng(0).uniform(100, 200, (1025, 3))
        a = mel_spectrogram(Spectrogram(mags, SR), fb).values
        b = mel_spectrogram(Spectrogram(10 * mags, SR), fb).values
        np.testing.assert_allclose(b - a, math.log(10), atol=1e-6)

    def test_shape(self, fb):
        clip = AudioClip(np.random.default_rng(0).standard_normal(160000) * 0.1, SR)
        assert log_mel(clip, fb).values.shape == (128, 155)

    def test_shape_mismatch(self, fb):
        with pytest.raises(ShapeMismatch):
            mel_spectrogram(Spectrogram(np.zeros((513, 3)), SR, 1024), fb)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1024), st.floats(0.01, 100))
    def test_monotone(self, fb, k, bump):
        mags = np.random.default_rng(1).random((1025, 2))
        a = mel_spectrogram(Spectrogram(mags, SR), fb).values
        mags2 = mags.copy()
        mags2[k] += bump
        b = mel_spectrogram(Spectrogram(mags2, SR), fb).values
        assert np.all(b >= a)


class TestSegments:
    def test_ten_seconds(self):
        x = np.arange(160000, dtype=float) / 160000
        segs = segment_clip(AudioClip(x, SR))
        assert len(segs) == 7
        assert all(len(s) == 40000 for s in segs)
        starts = [int(round(s.samples[0] * 160000)) for s in segs]
        assert starts == [0, 20000, 40000, 60000, 80000, 100000, 120000]

    def test_exact_single(self):
        x = np.random.default_rng(0).standard_normal(40000)
        (seg,) = segment_clip(AudioClip(x, SR))
        np.testing.assert_array_equal(seg.samples, x)

    def test_too_short(self):
        with pytest.raises(ClipTooShort):
            segment_clip(AudioClip(np.zeros(32000), SR))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(40000, 200000))
    def test_coverage(self, n):
        x = np.arange(n, dtype=float)
        segs = segment_clip(AudioClip(x / n, SR))
        assert len(segs) == (n - 40000) // 20000 + 1
        hits = np.zeros(n, int)
        for s in segs:
            start = int(round(s.samples[0] * n))
            hits[start:start + 40000] += 1
        end = int(round(segs[-1].samples[0] * n)) + 40000
        assert hits[:end].min() >= 1 and hits.max() <= 2


class TestCacheFile:
    def test_round_trip(self, tmp_path):
        v = np.random.default_rng(0).standard_normal((128, 38)).astype(np.float32)
        write_spectrogram_cache(tmp_path / "a.aads", v, SR)
        back, rate = read_spectrogram_cache(tmp_path / "a.aads")
        np.testing.assert_array_equal(back, v)
        assert rate == SR
        raw = (tmp_path / "a.aads").read_bytes()
        assert raw[:4] == b"AADS" and len(raw) == 20 + 4 * 128 * 38

    def test_corrupt(self, tmp_path):
        (tmp_path / "b.aads").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(DataError):
            read_spectrogram_cache(tmp_path / "b.aads")
