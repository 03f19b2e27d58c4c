import json

import numpy as np
import pytest

from chanfuse.checks import (
    COMPOSITE_TOL,
    KINKED_STEP,
    check_encoder_layer,
    check_model_forward,
    check_temporal_attention,
    tiny_encoder_config,
    weighted_check,
)
from chanfuse.config import ABLATION_PRESETS, CGCSMode
from chanfuse.errors import ShapeError
from chanfuse.model import encode, init_model, model_backward, model_forward

SEEDS = range(10)


def _streams(rng, channels=3, frames=4, config=None):
    config = config or tiny_encoder_config()
    features = rng.normal(size=(channels, frames, config.input_dim))
    ref_features = rng.normal(size=(1, frames, config.input_dim))
    cosipd = np.cos(rng.uniform(-np.pi, np.pi, size=(channels, frames + 1, config.cosipd_bins)))
    return features, ref_features, cosipd


def _log_probs(store, config, *streams):
    trace, cache = encode(store, config, *streams)
    return trace.log_probs, cache


class TestGradients:
    """Whole-layer and whole-model backward passes."""

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize(
        "check", [check_temporal_attention, check_encoder_layer, check_model_forward], ids=lambda fn: fn.__name__
    )
    def test_composite(self, check, seed):
        report = check(np.random.default_rng(seed))
        assert report.max_rel_error <= COMPOSITE_TOL, report.per_input

    @pytest.mark.parametrize("preset", sorted(ABLATION_PRESETS))
    def test_ablation_backward(self, preset):
        rng = np.random.default_rng(11)
        config = tiny_encoder_config(**ABLATION_PRESETS[preset])
        store = init_model(config, rng)
        features, ref_features, cosipd = _streams(rng, config=config)

        def backward(dy, cache):
            model_backward(store, config, dy, cache)
            return {}

        report = weighted_check(
            preset, COMPOSITE_TOL, rng,
            lambda: _log_probs(store, config, features, ref_features, cosipd),
            backward, {}, store, h=KINKED_STEP, max_coords=40,
        )
        assert report.max_rel_error <= COMPOSITE_TOL, report.per_input

    def test_mean_pooled_queries(self):
        rng = np.random.default_rng(4)
        config = tiny_encoder_config(query_pooling="mean", cgcs_mode=CGCSMode.mask)
        store = init_model(config, rng)
        assert not store.names("afe")
        features, ref_features, cosipd = _streams(rng, config=config)

        def backward(dy, cache):
            model_backward(store, config, dy, cache)
            return {}

        report = weighted_check(
            "mean_pooling", COMPOSITE_TOL, rng,
            lambda: _log_probs(store, config, features, ref_features, cosipd),
            backward, {}, store, h=KINKED_STEP, max_coords=40,
        )
        assert report.max_rel_error <= COMPOSITE_TOL, report.per_input


class TestForward:
    """One parameter set serves any channel count."""

    @pytest.fixture
    def model(self, rng):
        config = tiny_encoder_config(layers=2)
        return config, init_model(config, rng)

    @pytest.mark.parametrize("channels", range(1, 11))
    def test_channel_counts(self, model, rng, channels):
        config, store = model
        trace = model_forward(store, config, *_streams(rng, channels=channels, frames=5, config=config))
        assert trace.log_probs.shape == (5, config.vocab_size + 1)
        np.testing.assert_allclose(np.exp(trace.log_probs).sum(axis=-1), 1.0, atol=1e-12)
        assert trace.fused.shape == (5, config.d_model)
        assert trace.outer_alpha.shape == (channels,)
        assert trace.outer_alpha.sum() == pytest.approx(1.0)
        for layer in trace.layers:
            assert layer.alpha.shape == (channels,)
            assert layer.beta.shape == (channels, 5, 5)
            assert layer.mfcca.shape == (5, config.heads, channels, (2 * config.f_ctx + 1) * channels)

    def test_deterministic(self, model, rng):
        config, store = model
        streams = _streams(rng, config=config)
        first = model_forward(store, config, *streams)
        second = model_forward(store, config, *streams)
        np.testing.assert_array_equal(first.log_probs, second.log_probs)

    def test_attention_dump_is_json(self, model, rng):
        config, store = model
        dump = model_forward(store, config, *_streams(rng, config=config)).attention_dump()
        decoded = json.loads(json.dumps(dump))
        assert len(decoded["outer"]["alpha"]) == 3
        assert len(decoded["layers"]) == 2
        assert np.array(decoded["layers"][0]["beta"]).shape == (3, 4, 4)

    def test_fgcs_first_layer_only(self, rng):
        config = tiny_encoder_config(layers=2, fgcs_every_layer=False)
        store = init_model(config, rng)
        trace = model_forward(store, config, *_streams(rng, config=config))
        assert trace.layers[0].beta is not None
        assert trace.layers[1].beta is None
        assert not store.names("layers.1.fgcs")

    def test_without_selection(self, rng):
        config = tiny_encoder_config(**ABLATION_PRESETS["mfcca"])
        store = init_model(config, rng)
        features, ref_features, _ = _streams(rng, config=config)
        trace = model_forward(store, config, features, ref_features)
        assert trace.outer_alpha is None
        assert trace.attention_dump()["layers"][0] == {"alpha": None, "beta": None}

    def test_cosipd_required(self, rng):
        config = tiny_encoder_config()
        store = init_model(config, rng)
        features, ref_features, _ = _streams(rng, config=config)
        with pytest.raises(ShapeError):
            model_forward(store, config, features, ref_features)

    def test_reference_frames_must_match(self, rng):
        config = tiny_encoder_config()
        store = init_model(config, rng)
        features, _, cosipd = _streams(rng, config=config)
        with pytest.raises(ShapeError):
            model_forward(store, config, features, np.zeros((1, 3, config.input_dim)), cosipd)
