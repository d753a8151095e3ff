import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styleforge import dsp
from styleforge.errors import InvalidInput, UndefinedSpeakerMean


def sine_clip(freq, seconds=1.0, amp=1.0):
    t = np.arange(int(seconds * dsp.SAMPLE_RATE)) / dsp.SAMPLE_RATE
    return dsp.AudioClip(amp * np.sin(2 * np.pi * freq * t), utterance_id="sine")


class TestMelSpectrogram:
    def test_silence_hits_floor_everywhere(self):
        mel = dsp.mel_spectrogram(dsp.AudioClip(np.zeros(4000)))
        assert mel.frames.shape == (20, dsp.N_MELS)
        assert np.all(mel.frames == np.log(dsp.LOG_FLOOR))

    def test_identical_clips_identical_matrices(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(5000) * 0.1
        a = dsp.mel_spectrogram(dsp.AudioClip(x.copy()))
        b = dsp.mel_spectrogram(dsp.AudioClip(x.copy()))
        assert np.array_equal(a.frames, b.frames)

    def test_440hz_argmax_band(self):
        mel = dsp.mel_spectrogram(sine_clip(440.0))
        centers = dsp.mel_band_centers_hz()
        nearest = int(np.argmin(np.abs(centers - 440.0)))
        argmax = np.argmax(mel.frames, axis=1)
        # interior frames: full-window coverage
        interior = argmax[2:-4]
        assert np.all(interior == nearest)
        assert len(set(interior.tolist())) == 1

    def test_against_direct_dft_oracle(self):
        # recompute one interior frame's mel row by explicit DFT summation
        clip = sine_clip(440.0)
        frame_idx = 10
        start = frame_idx * dsp.HOP_LENGTH
        frame = clip.samples[start : start + dsp.WIN_LENGTH]
        windowed = frame * dsp._analysis_window()
        n = np.arange(dsp.WIN_LENGTH)
        mag = np.empty(dsp.N_FFT // 2 + 1)
        for k in range(dsp.N_FFT // 2 + 1):
            mag[k] = np.abs(np.sum(windowed * np.exp(-2j * np.pi * k * n / dsp.N_FFT)))
        oracle_row = np.log(np.maximum(dsp.mel_filterbank() @ mag, dsp.LOG_FLOOR))
        mel = dsp.mel_spectrogram(clip)
        np.testing.assert_allclose(mel.frames[frame_idx], oracle_row, atol=1e-8)

    def test_floor_invariant(self):
        rng = np.random.default_rng(1)
        mel = dsp.mel_spectrogram(dsp.AudioClip(rng.standard_normal(3000) * 1e-6))
        assert np.all(mel.frames >= np.log(dsp.LOG_FLOOR) - 1e-12)

    def test_too_short_clip_rejected(self):
        with pytest.raises(InvalidInput):
            dsp.mel_spectrogram(dsp.AudioClip(np.zeros(10)))

    def test_wrong_sample_rate_rejected(self):
        with pytest.raises(InvalidInput):
            dsp.mel_spectrogram(dsp.AudioClip(np.zeros(4000), sample_rate=22050))


class TestMfcc:
    def test_silence_is_constant_c0(self):
        out = dsp.mfcc(dsp.AudioClip(np.zeros(4000)))
        assert out.frames.shape == (20, dsp.N_MFCC)
        expected_c0 = dsp.N_MELS * np.log(dsp.LOG_FLOOR) * np.sqrt(1.0 / dsp.N_MELS)
        np.testing.assert_allclose(out.frames[:, 0], expected_c0, rtol=1e-12)
        np.testing.assert_allclose(out.frames[:, 1:], 0.0, atol=1e-10)

    def test_frame_count_matches_mel(self):
        rng = np.random.default_rng(2)
        for n in (777, 4000, 4001, 16000):
            clip = dsp.AudioClip(rng.standard_normal(n) * 0.1)
            assert dsp.mfcc(clip).frames.shape[0] == dsp.mel_spectrogram(clip).n_frames

    def test_white_noise_varies_and_matches_explicit_dct(self):
        rng = np.random.default_rng(3)
        clip = dsp.AudioClip(rng.standard_normal(2000) * 0.3)
        out = dsp.mfcc(clip)
        assert np.all(np.var(out.frames[:, 1:], axis=0) > 0)
        logmel = dsp.mel_spectrogram(clip).frames
        big_n = dsp.N_MELS
        for t in range(3):
            for k in range(dsp.N_MFCC):
                scale = np.sqrt((1.0 if k == 0 else 2.0) / big_n)
                expected = scale * np.sum(
                    logmel[t] * np.cos(np.pi * k * (2 * np.arange(big_n) + 1) / (2 * big_n))
                )
                assert out.frames[t, k] == pytest.approx(expected, abs=1e-9)


class TestEstimateF0:
    def test_pure_tone(self):
        track = dsp.estimate_f0(sine_clip(220.0))
        assert np.all(track.voiced)
        np.testing.assert_allclose(np.exp(track.log_f0), 220.0, atol=2.0)

    def test_silence_unvoiced(self):
        track = dsp.estimate_f0(dsp.AudioClip(np.zeros(4000)))
        assert not np.any(track.voiced)
        np.testing.assert_allclose(np.exp(track.log_f0), dsp.UNVOICED_FILL_HZ)

    def test_interpolation_through_gap(self):
        t = np.arange(8000) / dsp.SAMPLE_RATE
        seg = np.concatenate(
            [
                np.sin(2 * np.pi * 150.0 * t),
                np.zeros(8000),
                np.sin(2 * np.pi * 300.0 * t),
            ]
        )
        track = dsp.estimate_f0(dsp.AudioClip(seg))
        voiced_idx = np.flatnonzero(track.voiced)
        gap_start = voiced_idx[voiced_idx < 45].max()
        gap_end = voiced_idx[voiced_idx > 75].min()
        segment = track.log_f0[gap_start : gap_end + 1]
        # hand oracle: linear in log between the endpoint values
        expected = np.linspace(segment[0], segment[-1], segment.size)
        np.testing.assert_allclose(segment, expected, atol=1e-9)
        assert np.all(np.diff(segment) >= 0)
        assert segment[0] == pytest.approx(np.log(150.0), abs=0.02)
        assert segment[-1] == pytest.approx(np.log(300.0), abs=0.02)

    def test_low_pitch_not_stolen_by_short_lags(self):
        track = dsp.estimate_f0(sine_clip(55.0))
        voiced = track.voiced
        assert voiced.mean() > 0.8
        np.testing.assert_allclose(np.exp(track.log_f0[voiced]), 55.0, atol=2.0)

    def test_track_always_finite(self):
        rng = np.random.default_rng(4)
        clip = dsp.AudioClip(rng.standard_normal(3210) * 0.05)
        track = dsp.estimate_f0(clip)
        assert np.all(np.isfinite(track.log_f0))
        assert track.log_f0.size == dsp.n_frames_for(3210)


class TestNormalizeLogF0:
    def _track(self, rng, n=40):
        voiced = rng.random(n) < 0.7
        log_f0 = np.log(150.0) + rng.standard_normal(n) * 0.2
        return dsp.F0Track(log_f0=log_f0, voiced=voiced)

    def test_equal_means_is_identity(self):
        track = self._track(np.random.default_rng(5))
        out = dsp.normalize_log_f0(track, np.log(180.0), np.log(180.0))
        np.testing.assert_array_equal(out.log_f0, track.log_f0)
        np.testing.assert_array_equal(out.voiced, track.voiced)

    def test_octave_shift_halves_exp_mean(self):
        track = self._track(np.random.default_rng(6))
        out = dsp.normalize_log_f0(track, np.log(200.0), np.log(100.0))
        np.testing.assert_allclose(out.log_f0, track.log_f0 - np.log(2.0))
        before = np.exp(track.log_f0[track.voiced]).mean()
        # shift in log domain scales every sample, not just the mean
        np.testing.assert_allclose(
            np.exp(out.log_f0[out.voiced]),
            np.exp(track.log_f0[track.voiced]) / 2.0,
        )
        assert np.exp(np.log(before) - np.log(2.0)) == pytest.approx(before / 2.0)

    @given(st.integers(0, 2**31 - 1), st.floats(80.0, 300.0), st.floats(80.0, 300.0))
    @settings(max_examples=25, deadline=None)
    def test_variance_preserved_and_invertible(self, seed, src_hz, tgt_hz):
        track = self._track(np.random.default_rng(seed))
        src_m, tgt_m = np.log(src_hz), np.log(tgt_hz)
        out = dsp.normalize_log_f0(track, src_m, tgt_m)
        assert np.var(out.log_f0) == pytest.approx(np.var(track.log_f0), rel=1e-9)
        back = dsp.normalize_log_f0(out, tgt_m, src_m)
        np.testing.assert_allclose(back.log_f0, track.log_f0, atol=1e-9)

    def test_undefined_mean_raises(self):
        track = self._track(np.random.default_rng(7))
        with pytest.raises(UndefinedSpeakerMean):
            dsp.normalize_log_f0(track, np.nan, np.log(100.0))

    def test_speaker_mean_requires_voiced_frames(self):
        unvoiced = dsp.F0Track(
            log_f0=np.full(10, np.log(150.0)), voiced=np.zeros(10, dtype=bool)
        )
        with pytest.raises(UndefinedSpeakerMean):
            dsp.speaker_log_f0_mean([unvoiced, unvoiced])

    def test_speaker_mean_pools_voiced_only(self):
        a = dsp.F0Track(
            log_f0=np.array([1.0, 2.0, 9.0]),
            voiced=np.array([True, True, False]),
        )
        b = dsp.F0Track(log_f0=np.array([3.0]), voiced=np.array([True]))
        assert dsp.speaker_log_f0_mean([a, b]) == pytest.approx(2.0)


class TestGriffinLim:
    def test_silence_stays_silent(self):
        mel = dsp.mel_spectrogram(dsp.AudioClip(np.zeros(4000)))
        out = dsp.griffin_lim_invert(mel, iterations=5)
        assert np.max(np.abs(out.samples)) < 1e-3

    def test_round_trip_preserves_band_argmax(self):
        mel = dsp.mel_spectrogram(sine_clip(440.0))
        audio = dsp.griffin_lim_invert(mel, iterations=100)
        again = dsp.mel_spectrogram(audio)
        np.testing.assert_array_equal(
            np.argmax(mel.frames, axis=1), np.argmax(again.frames, axis=1)
        )

    def test_deterministic(self):
        mel = dsp.mel_spectrogram(sine_clip(330.0, seconds=0.3))
        a = dsp.griffin_lim_invert(mel, iterations=30)
        b = dsp.griffin_lim_invert(mel, iterations=30)
        assert np.array_equal(a.samples, b.samples)

    def test_output_length_and_range(self):
        mel = dsp.mel_spectrogram(sine_clip(200.0, seconds=0.4))
        out = dsp.griffin_lim_invert(mel, iterations=10)
        assert out.samples.size == mel.n_frames * dsp.HOP_LENGTH
        assert np.max(np.abs(out.samples)) <= 1.0

    def test_rejects_zero_iterations(self):
        mel = dsp.mel_spectrogram(sine_clip(200.0, seconds=0.2))
        with pytest.raises(InvalidInput):
            dsp.griffin_lim_invert(mel, iterations=0)


class TestFraming:
    @given(st.integers(dsp.HOP_LENGTH, 9000))
    @settings(max_examples=20, deadline=None)
    def test_shared_frame_count(self, n):
        rng = np.random.default_rng(n)
        clip = dsp.AudioClip(rng.standard_normal(n) * 0.1)
        expected = -(-n // dsp.HOP_LENGTH)
        assert dsp.mel_spectrogram(clip).n_frames == expected
        assert dsp.mfcc(clip).frames.shape[0] == expected
        assert dsp.estimate_f0(clip).log_f0.size == expected
