import numpy as np
import pytest

from chanfuse.checks import tiny_encoder_config
from chanfuse.config import RunConfig
from chanfuse.errors import ShapeError
from chanfuse.kernels import ctc_required_frames
from chanfuse.model import init_model
from chanfuse.toy_task import TOY_COSIPD_BINS, TOY_INPUT_DIM, make_toy_task
from chanfuse.training import (
    AFE_CTC_HEAD,
    afe_pretrain,
    batch_loss,
    toy_train_step,
    train_toy,
)


def _toy_model(seed: int = 0, **overrides):
    config = RunConfig(seed=seed, **overrides).encoder_config(TOY_INPUT_DIM, TOY_COSIPD_BINS)
    return config, init_model(config, np.random.default_rng(seed))


class TestToyTask:
    """Seeded synthetic utterances with feasible CTC labels."""

    def test_shapes_and_feasibility(self):
        task = make_toy_task(seed=1, utterances=4, channels=3, frames=30, vocab_size=5)
        assert len(task) == 4
        for utterance in task:
            assert utterance.features.shape == (3, 30, TOY_INPUT_DIM)
            assert utterance.ref_features.shape == (1, 30, TOY_INPUT_DIM)
            assert utterance.cosipd.shape == (3, 30, TOY_COSIPD_BINS)
            assert all(1 <= label <= 5 for label in utterance.labels)
            assert ctc_required_frames(utterance.labels) <= 30

    def test_seeded(self):
        a = make_toy_task(seed=7, utterances=2)
        b = make_toy_task(seed=7, utterances=2)
        np.testing.assert_array_equal(a[1].features, b[1].features)
        assert a[1].labels == b[1].labels

    def test_reference_channel_cosipd(self):
        (utterance,) = make_toy_task(seed=2, utterances=1)
        np.testing.assert_array_equal(utterance.cosipd[0], 1.0)

    def test_too_few_frames(self):
        with pytest.raises(ShapeError):
            make_toy_task(frames=5, labels_per_utterance=3)


class TestTrainStep:
    """Full-batch gradient descent on the mean CTC loss."""

    def test_small_step_lowers_loss(self):
        config = tiny_encoder_config(input_dim=TOY_INPUT_DIM, cosipd_bins=TOY_COSIPD_BINS)
        store = init_model(config, np.random.default_rng(0))
        batch = make_toy_task(seed=0, utterances=2, channels=2, frames=12, vocab_size=config.vocab_size)
        before = toy_train_step(store, config, batch, learning_rate=1e-4)
        after = batch_loss(store, config, batch, backward=False)
        assert after < before

    def test_report_records_every_step(self):
        config = tiny_encoder_config(input_dim=TOY_INPUT_DIM, cosipd_bins=TOY_COSIPD_BINS)
        store = init_model(config, np.random.default_rng(0))
        batch = make_toy_task(seed=0, utterances=1, channels=2, frames=12, vocab_size=config.vocab_size)
        report = train_toy(store, config, batch, learning_rate=1e-4, steps=3)
        assert len(report.losses) == 3
        assert report.initial_loss == report.losses[0]

    @pytest.mark.slow
    def test_loss_halves_within_default_steps(self):
        defaults = RunConfig()
        config, store = _toy_model()
        task = make_toy_task(
            seed=0,
            utterances=defaults.toy_utterances,
            channels=defaults.toy_channels,
            frames=defaults.toy_frames,
            vocab_size=defaults.vocab_size,
        )
        report = train_toy(store, config, task, defaults.learning_rate, defaults.train_steps)
        assert min(report.losses) <= 0.5 * report.initial_loss


class TestAFEPretrain:
    """CTC pre-training of the AFE GRU on the reference streams."""

    def test_touches_only_afe_parameters(self):
        config = tiny_encoder_config(input_dim=TOY_INPUT_DIM, cosipd_bins=TOY_COSIPD_BINS)
        store = init_model(config, np.random.default_rng(0))
        frozen = {name: value.copy() for name, value in store.arrays().items() if not name.startswith("afe.")}
        gru = {name: value.copy() for name, value in store.arrays("afe.gru").items()}
        batch = make_toy_task(seed=0, utterances=2, channels=2, frames=12, vocab_size=config.vocab_size)
        report = afe_pretrain(store, config, batch, learning_rate=0.005, steps=2)
        assert len(report.losses) == 2
        assert store.names(AFE_CTC_HEAD)
        for name, value in frozen.items():
            np.testing.assert_array_equal(store.value(name), value)
        assert any(not np.array_equal(store.value(name), value) for name, value in gru.items())

    @pytest.mark.slow
    def test_loss_halves_within_default_steps(self):
        defaults = RunConfig()
        config, store = _toy_model()
        task = make_toy_task(
            seed=0,
            utterances=defaults.toy_utterances,
            channels=defaults.toy_channels,
            frames=defaults.toy_frames,
            vocab_size=defaults.vocab_size,
        )
        report = afe_pretrain(store, config, task, defaults.afe_learning_rate, defaults.afe_steps)
        assert min(report.losses) <= 0.5 * report.initial_loss
