import numpy as np
import pytest

from chanfuse.errors import COLAError, ShapeError, SignalTooShortError
from chanfuse.io_manifest import MultiChannelWave
from chanfuse.spectral import (
    cos_ipd,
    feature_cmvn,
    istft,
    log_mel,
    mel_filterbank,
    stft,
)


def _wave(samples: np.ndarray) -> MultiChannelWave:
    return MultiChannelWave(sample_rate=16000, samples=np.atleast_2d(samples))


class TestSTFT:
    """Framing, inversion and parameter validation."""

    def test_frame_and_bin_counts(self, rng):
        spec = stft(_wave(rng.normal(size=(2, 16000))))
        assert spec.values.shape == (2, 1 + (16000 - 512) // 256, 257)

    def test_inverse_reconstructs_covered_samples(self, rng):
        samples = rng.normal(size=(2, 8000))
        restored = istft(stft(_wave(samples)))
        assert restored.samples.shape == samples.shape
        # the first and last hop are covered by a single tapered frame only
        inner = slice(256, 8000 - 512)
        np.testing.assert_allclose(restored.samples[:, inner], samples[:, inner], atol=1e-10)

    def test_window_longer_than_fft(self, rng):
        with pytest.raises(ShapeError):
            stft(_wave(rng.normal(size=4000)), window_ms=64.0, nfft=512)

    def test_signal_shorter_than_window(self, rng):
        with pytest.raises(SignalTooShortError):
            stft(_wave(rng.normal(size=100)))

    def test_non_cola_hop(self, rng):
        spec = stft(_wave(rng.normal(size=4000)), window_ms=32.0, hop_ms=12.0)
        with pytest.raises(COLAError):
            istft(spec)


class TestCosIPD:
    """Phase-difference cosines against the reference channel."""

    def test_range_and_reference_row(self, rng):
        features = cos_ipd(stft(_wave(rng.normal(size=(3, 4000))))).values
        assert np.all(features <= 1.0) and np.all(features >= -1.0)
        np.testing.assert_array_equal(features[0], 1.0)

    def test_identical_channels(self, rng):
        x = rng.normal(size=4000)
        features = cos_ipd(stft(_wave(np.stack([x, x])))).values
        np.testing.assert_allclose(features, 1.0, atol=1e-12)

    def test_silent_channel_is_one(self, rng):
        features = cos_ipd(stft(_wave(np.stack([rng.normal(size=4000), np.zeros(4000)])))).values
        np.testing.assert_array_equal(features[1], 1.0)

    def test_gain_invariant(self, rng):
        x = rng.normal(size=(2, 4000))
        scaled = x * np.array([[1.0], [0.3]])
        np.testing.assert_allclose(
            cos_ipd(stft(_wave(x))).values, cos_ipd(stft(_wave(scaled))).values, atol=1e-10
        )


class TestMel:
    """Log-mel features and normalisation."""

    def test_filterbank_shape(self):
        filters = mel_filterbank(16000, 512, 80)
        assert filters.shape == (80, 257)
        assert np.all(filters >= 0.0)

    def test_log_mel_floor(self):
        features = log_mel(stft(_wave(np.zeros(4000))), 80).values
        np.testing.assert_allclose(features, np.log(1e-10))

    def test_cmvn_per_channel(self, rng):
        values = rng.normal(loc=3.0, scale=2.0, size=(2, 50, 4))
        normalized = feature_cmvn(values)
        np.testing.assert_allclose(normalized.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(normalized.std(axis=1), 1.0, atol=1e-12)
