import numpy as np
import pytest

import chanfuse.kernels as kernels
from chanfuse.checks import (
    CHECKS,
    PRIMITIVE_TOL,
    RECURRENT_TOL,
    check_conv2d,
    check_ctc_loss,
    check_ctc_oracle,
    check_gru_sequence,
    check_layer_norm,
    check_linear,
    check_log_softmax,
    check_prelu,
    check_relu,
    check_sigmoid,
    check_softmax,
    ctc_enumeration_loss,
    run_check,
)
from chanfuse.errors import InfeasibleLabelsError, ShapeError

SEEDS = range(10)

PRIMITIVES = [
    check_linear,
    check_softmax,
    check_log_softmax,
    check_prelu,
    check_sigmoid,
    check_relu,
    check_layer_norm,
    check_conv2d,
]


class TestPrimitiveGradients:
    """Backward passes of the elementary kernels match central differences."""

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("check", PRIMITIVES, ids=lambda fn: fn.__name__)
    def test_primitive(self, check, seed):
        report = check(np.random.default_rng(seed))
        assert report.max_rel_error <= PRIMITIVE_TOL, report.per_input

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("check", [check_gru_sequence, check_ctc_loss], ids=lambda fn: fn.__name__)
    def test_recurrent(self, check, seed):
        report = check(np.random.default_rng(seed))
        assert report.max_rel_error <= RECURRENT_TOL, report.per_input

    def test_perturbed_backward_is_caught(self, monkeypatch):
        original = kernels.softmax_backward
        monkeypatch.setattr(kernels, "softmax_backward", lambda dy, cache: 1.001 * original(dy, cache))
        (softmax,) = [check for check in CHECKS if check.name == "softmax"]
        assert not run_check(softmax, [0]).passed


class TestForwardValues:
    """Forward kernels on known inputs."""

    def test_softmax_rows_sum_to_one(self, rng):
        y, _ = kernels.softmax_forward(rng.normal(size=(4, 7)) * 50)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(kernels.log_softmax_forward(x)[0], np.log(kernels.softmax_forward(x)[0]))

    def test_prelu(self):
        y, _ = kernels.prelu_forward(np.array([[-2.0, 3.0]]), np.array([[0.25]]))
        np.testing.assert_array_equal(y, [[-0.5, 3.0]])

    def test_conv2d_same_padding(self, rng):
        y, _ = kernels.conv2d_forward(rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)))
        assert y.shape == (3, 5, 6)

    def test_conv2d_identity_kernel(self, rng):
        x = rng.normal(size=(1, 4, 4))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(kernels.conv2d_forward(x, k)[0], x)

    def test_layer_norm_statistics(self, rng):
        y, _ = kernels.layer_norm_forward(rng.normal(size=(3, 8)) * 4 + 2, np.ones(8), np.zeros(8))
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_gru_zero_input_stays_zero(self):
        hidden = 3
        states, final, _ = kernels.gru_sequence_forward(
            np.zeros((4, 2)), np.ones((2, 3 * hidden)), np.ones((hidden, 3 * hidden)), np.zeros(3 * hidden)
        )
        np.testing.assert_array_equal(states, 0.0)
        np.testing.assert_array_equal(final, 0.0)

    def test_attention_weights_normalised(self, rng):
        _, weights, _ = kernels.attention_forward(
            rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
        )
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


class TestCTC:
    """CTC against exhaustive path enumeration and its edge cases."""

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_enumeration(self, seed):
        assert check_ctc_oracle(np.random.default_rng(seed)) <= 1e-10

    def test_one_hot_single_path(self):
        labels = [1, 2, 3]
        log_probs, _ = kernels.log_softmax_forward(50.0 * np.eye(4)[labels])
        loss, _ = kernels.ctc_loss_forward(log_probs, labels)
        assert abs(loss) <= 1e-10

    def test_uniform_posteriors(self):
        # two frames, one label: paths (a,a), (a,-), (-,a) out of 4 equiprobable
        log_probs = np.log(np.full((2, 2), 0.5))
        loss, _ = kernels.ctc_loss_forward(log_probs, [1])
        assert loss == pytest.approx(-np.log(3 / 4), abs=1e-12)
        assert ctc_enumeration_loss(log_probs, [1]) == pytest.approx(loss, abs=1e-12)

    def test_repeated_labels_need_separator(self):
        log_probs = np.log(np.full((2, 3), 1 / 3))
        with pytest.raises(InfeasibleLabelsError):
            kernels.ctc_loss_forward(log_probs, [1, 1])
        assert kernels.ctc_required_frames([1, 1]) == 3

    def test_blank_label_rejected(self):
        with pytest.raises(ShapeError):
            kernels.ctc_loss_forward(np.zeros((3, 3)), [0])

    def test_gradient_is_negative_occupancy(self, rng):
        log_probs, _ = kernels.log_softmax_forward(rng.normal(size=(6, 4)))
        _, cache = kernels.ctc_loss_forward(log_probs, [1, 2])
        grad = kernels.ctc_loss_backward(1.0, cache)
        # each frame's state occupancies sum to one
        np.testing.assert_allclose(grad.sum(axis=1), -1.0, atol=1e-10)


class TestGradCheckHarness:
    """The finite-difference harness itself."""

    def test_exact_gradient_passes(self, rng):
        x = rng.normal(size=(3, 2))
        report = kernels.grad_check(lambda: float(np.sum(x**2)), {"x": x}, {"x": 2 * x}, tolerance=1e-6)
        assert report.passed
        assert report.coordinates == 6

    def test_wrong_gradient_fails(self, rng):
        x = rng.normal(size=(3, 2))
        report = kernels.grad_check(lambda: float(np.sum(x**2)), {"x": x}, {"x": 2.1 * x}, tolerance=1e-6)
        assert not report.passed

    def test_sampling_and_restore(self, rng):
        x = rng.normal(size=(5, 5))
        before = x.copy()
        report = kernels.grad_check(lambda: float(np.sum(x**3)), {"x": x}, {"x": 3 * x**2}, max_coords=7, rng=rng)
        assert report.coordinates == 7
        np.testing.assert_array_equal(x, before)

    def test_non_contiguous_rejected(self, rng):
        x = rng.normal(size=(4, 4)).T
        with pytest.raises(ShapeError):
            kernels.grad_check(lambda: 0.0, {"x": x}, {"x": np.zeros_like(x)})
