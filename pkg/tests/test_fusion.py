import numpy as np
import pytest

from chanfuse.checks import COMPOSITE_TOL, check_unet_fuse
from chanfuse.errors import FusionCapacityError, ShapeError
from chanfuse.fusion import (
    FUSION_CHANNELS,
    expand_channels,
    expand_channels_backward,
    init_unet_fusion,
    mean_fuse,
    mean_fuse_backward,
    unet_fuse_forward,
)
from chanfuse.params import ParamStore


@pytest.fixture
def fusion_store(rng):
    store = ParamStore()
    init_unet_fusion(store, "fusion", rng)
    return store


class TestExpandChannels:
    """Cyclic repetition up to the fusion capacity."""

    def test_cyclic_order(self):
        x = np.arange(3, dtype=float)[:, None, None]
        np.testing.assert_array_equal(expand_channels(x)[:, 0, 0], [0, 1, 2, 0, 1, 2, 0, 1, 2, 0])

    def test_backward_sums_copies(self):
        dx = expand_channels_backward(np.ones((FUSION_CHANNELS, 2, 2)), 3)
        np.testing.assert_array_equal(dx[:, 0, 0], [4.0, 3.0, 3.0])

    def test_capacity_exceeded(self):
        with pytest.raises(FusionCapacityError):
            expand_channels(np.zeros((11, 2, 2)))

    def test_no_channels(self):
        with pytest.raises(ShapeError):
            expand_channels(np.zeros((0, 2, 2)))


class TestUNetFusion:
    """Channel collapse by the convolutional encoder-decoder."""

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        report = check_unet_fuse(np.random.default_rng(seed))
        assert report.max_rel_error <= COMPOSITE_TOL, report.per_input

    @pytest.mark.parametrize("channels", range(1, FUSION_CHANNELS + 1))
    def test_any_channel_count_up_to_capacity(self, fusion_store, rng, channels):
        out, _ = unet_fuse_forward(fusion_store, "fusion", rng.normal(size=(channels, 5, 6)))
        assert out.shape == (5, 6)
        assert np.all(np.isfinite(out))

    def test_duplicated_channel_equals_single(self, fusion_store, rng):
        x = rng.normal(size=(1, 4, 6))
        single, _ = unet_fuse_forward(fusion_store, "fusion", x)
        doubled, _ = unet_fuse_forward(fusion_store, "fusion", np.concatenate([x, x]))
        np.testing.assert_array_equal(single, doubled)

    def test_too_many_channels(self, fusion_store, rng):
        with pytest.raises(FusionCapacityError):
            unet_fuse_forward(fusion_store, "fusion", rng.normal(size=(11, 4, 6)))


class TestMeanFusion:
    def test_mean_and_backward(self, rng):
        x = rng.normal(size=(4, 3, 2))
        np.testing.assert_allclose(mean_fuse(x), x.mean(axis=0))
        np.testing.assert_allclose(mean_fuse_backward(np.ones((3, 2)), 4), 0.25)
