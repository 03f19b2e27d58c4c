import numpy as np
import pytest
import soundfile as sf
from scipy.signal import fftconvolve

from chanfuse.config import RunConfig
from chanfuse.enhancement import (
    CompositeWave,
    build_composite,
    composite_from_devices,
    delay_and_sum,
    envelope_variance_rank,
    estimate_tdoa,
    gcc_phat_tdoa,
    reference_signal,
    wpe_dereverb,
)
from chanfuse.errors import ReferenceSignalError, WPEFrameError
from chanfuse.io_manifest import MultiChannelWave, load_session, parse_manifest
from chanfuse.spectral import istft, stft
from conftest import SAMPLE_RATE, speech_like, write_manifest, write_mono


def _wave(samples: np.ndarray) -> MultiChannelWave:
    return MultiChannelWave(sample_rate=SAMPLE_RATE, samples=np.atleast_2d(samples))


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


class TestWPE:
    """Late-reverberation prediction and removal."""

    def test_anechoic_input_nearly_unchanged(self, rng):
        # frames 3+ hops back do not overlap the current frame, so nothing is predictable
        spec = stft(_wave(rng.normal(size=(4, 10 * SAMPLE_RATE))), window_ms=1.0, hop_ms=0.5, nfft=16)
        out = wpe_dereverb(spec, taps=2, delay=3)
        change = np.linalg.norm(out.values - spec.values) / np.linalg.norm(spec.values)
        assert change <= 0.05

    def test_echo_correlation_halved(self, rng):
        lag = 800  # 50 ms
        n = 8 * SAMPLE_RATE
        s = 0.1 * rng.normal(size=n + lag)
        dry, delayed = s[lag:], s[:n]
        observed = dry + 0.8 * delayed
        restored = istft(wpe_dereverb(stft(_wave(observed)))).samples[0]
        inner = slice(2048, n - 2048)
        before = _ncc(observed[inner], delayed[inner])
        after = _ncc(restored[inner], delayed[inner])
        assert before == pytest.approx(0.8 / np.sqrt(1.64), abs=0.02)
        assert abs(after) <= 0.5 * before

    def test_shape_preserved(self, rng):
        spec = stft(_wave(rng.normal(size=(2, 8000))))
        assert wpe_dereverb(spec).values.shape == spec.values.shape

    def test_silent_input_passes_through(self):
        spec = stft(_wave(np.zeros((2, 8000))))
        np.testing.assert_array_equal(wpe_dereverb(spec).values, 0.0)

    def test_too_few_frames(self, rng):
        spec = stft(_wave(rng.normal(size=(1, 12 * 256 + 256))))
        assert spec.frames <= 13
        with pytest.raises(WPEFrameError):
            wpe_dereverb(spec, taps=10, delay=3)


class TestTDOA:
    """GCC-PHAT delays and delay-and-sum."""

    def test_recovers_eight_sample_shift(self, rng):
        n = 16000
        s = rng.normal(size=n + 8)
        wave = _wave(np.stack([s[8:], s[:n]]))
        assert gcc_phat_tdoa(wave) == [0, 8]

    def test_negative_shift(self, rng):
        n = 16000
        s = rng.normal(size=n + 8)
        wave = _wave(np.stack([s[:n], s[8:]]))
        assert gcc_phat_tdoa(wave) == [0, -8]

    def test_reference_peak_is_one(self, rng):
        estimate = estimate_tdoa(_wave(rng.normal(size=(3, 4000))), ref=1)
        assert estimate.delays[1] == 0
        assert estimate.peaks[1] == 1.0

    def test_single_channel_is_identity(self, rng):
        wave = _wave(rng.normal(size=4000))
        np.testing.assert_array_equal(delay_and_sum(wave).samples, wave.samples)

    def test_aligns_delayed_copy(self, rng):
        n = 16000
        s = rng.normal(size=n + 5)
        beam = delay_and_sum(_wave(np.stack([s[5:], s[:n]]))).samples[0]
        np.testing.assert_allclose(beam[: n - 5], s[5:n], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_three_db_gain_on_incoherent_noise(self, seed):
        rng = np.random.default_rng(seed)
        n = 16000
        t = np.arange(n) / SAMPLE_RATE
        tone = np.sin(2 * np.pi * 440.0 * t)
        noise = rng.normal(size=(2, n))
        beam = delay_and_sum(_wave(tone + noise)).samples[0]
        residual = beam - tone
        gain_db = 10 * np.log10(np.mean(noise**2) / np.mean(residual**2))
        assert gain_db == pytest.approx(3.0, abs=0.5)


class TestEnvelopeVariance:
    """Cleaner channels rank first."""

    def test_clean_beats_reverberant_and_noisy(self, rng):
        clean = speech_like(rng, 4.0)
        t = np.arange(int(0.4 * SAMPLE_RATE)) / SAMPLE_RATE
        response = np.exp(-t / 0.1) * rng.normal(size=t.size)
        response[0] = 1.0
        reverberant = fftconvolve(clean, response)[: clean.size]
        reverberant *= np.std(clean) / np.std(reverberant)
        noisy = clean + np.std(clean) * rng.normal(size=clean.size)
        ranking = envelope_variance_rank(_wave(np.stack([reverberant, clean, noisy])))
        assert ranking.order[0] == 1
        assert max(ranking.scores) == 1.0

    def test_gain_invariant(self, rng):
        clean = speech_like(rng, 2.0)
        a = envelope_variance_rank(_wave(np.stack([clean, 0.5 * rng.normal(size=clean.size)])))
        b = envelope_variance_rank(_wave(np.stack([0.1 * clean, 0.5 * rng.normal(size=clean.size)])))
        assert a.order == b.order

    def test_silent_input(self):
        ranking = envelope_variance_rank(_wave(np.zeros((3, 8000))))
        assert ranking.scores == [1.0, 1.0, 1.0]
        assert ranking.order == [0, 1, 2]


class TestComposite:
    """One beamformed channel per device, in manifest order."""

    def _session(self, tmp_path, rng):
        s = speech_like(rng, 1.0)
        path = write_manifest(
            tmp_path,
            {
                "array": [s + 0.01 * rng.normal(size=s.size), s + 0.01 * rng.normal(size=s.size)],
                "lapel": [0.5 * s],
                "wall": [0.3 * s + 0.02 * rng.normal(size=s.size)],
            },
        )
        (session,) = parse_manifest(path)
        return session

    def test_channels_follow_devices(self, tmp_path, rng):
        composite = build_composite(self._session(tmp_path, rng))
        assert composite.wave.channels == 3
        assert composite.provenance() == {"0": "array", "1": "lapel", "2": "wall"}

    def test_independent_of_jobs(self, tmp_path, rng):
        devices = load_session(self._session(tmp_path, rng))
        serial = composite_from_devices(devices, RunConfig(jobs=1))
        parallel = composite_from_devices(devices, RunConfig(jobs=3))
        np.testing.assert_array_equal(serial.wave.samples, parallel.wave.samples)

    def test_ten_devices(self, tmp_path, rng):
        s = speech_like(rng, 0.5)
        devices = [(f"mic{i}", _wave(s + 0.01 * rng.normal(size=s.size))) for i in range(10)]
        assert composite_from_devices(devices, RunConfig()).wave.channels == 10


class TestReferenceSignal:
    """External reference or the composite's beam."""

    def _composite(self, rng):
        return CompositeWave(wave=_wave(0.1 * rng.normal(size=(2, 4000))), device_ids=["a", "b"])

    def test_fallback_is_beam(self, rng):
        composite = self._composite(rng)
        np.testing.assert_array_equal(reference_signal(composite).samples, delay_and_sum(composite.wave).samples)

    def test_override(self, tmp_path, rng):
        path = write_mono(tmp_path / "gss.wav", 0.1 * rng.normal(size=4000))
        reference = reference_signal(self._composite(rng), path)
        assert reference.channels == 1

    def test_override_must_be_mono(self, tmp_path, rng):
        path = tmp_path / "stereo.wav"
        sf.write(str(path), 0.1 * rng.normal(size=(4000, 2)), SAMPLE_RATE, subtype="PCM_16")
        with pytest.raises(ReferenceSignalError):
            reference_signal(self._composite(rng), path)

    def test_override_missing(self, tmp_path, rng):
        with pytest.raises(ReferenceSignalError):
            reference_signal(self._composite(rng), tmp_path / "absent.wav")
