import numpy as np
import pytest

from chanfuse.checks import (
    COMPOSITE_TOL,
    RECURRENT_TOL,
    check_afe_embed,
    check_cgcs_mask,
    check_cgcs_mix,
    check_fgcs,
    check_grc,
    check_outer_selection,
)
from chanfuse.config import CGCSMode
from chanfuse.errors import ShapeError
from chanfuse.params import ParamStore, init_linear
from chanfuse.selection import (
    QueryContext,
    afe_forward,
    cgcs_forward,
    fgcs_forward,
    grc_forward,
    init_afe,
    init_grc,
    init_outer_selection,
    init_projection_triple,
    mean_pool,
    outer_selection_forward,
)

SEEDS = range(10)


def _identity_triple(prefix, dim, rng):
    store = ParamStore()
    for role in ("q", "k", "v"):
        init_linear(store, f"{prefix}.{role}", dim, dim, rng, identity=True)
    return store


class TestGradients:
    """Selection blocks pass the finite-difference check for every seed."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_afe(self, seed):
        assert check_afe_embed(np.random.default_rng(seed)).max_rel_error <= RECURRENT_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize(
        "check",
        [check_cgcs_mix, check_cgcs_mask, check_grc, check_fgcs, check_outer_selection],
        ids=lambda fn: fn.__name__,
    )
    def test_composite(self, check, seed):
        report = check(np.random.default_rng(seed))
        assert report.max_rel_error <= COMPOSITE_TOL, report.per_input


class TestAFE:
    """One embedding per channel from its final GRU states."""

    def test_shape(self, rng):
        store = ParamStore()
        init_afe(store, "afe", 5, 3, 2, 8, rng)
        embedding, _ = afe_forward(store, "afe", rng.normal(size=(4, 6, 5)), 2)
        assert embedding.shape == (4, 1, 8)

    def test_channels_are_independent(self, rng):
        store = ParamStore()
        init_afe(store, "afe", 5, 3, 1, 8, rng)
        features = rng.normal(size=(2, 6, 5))
        before, _ = afe_forward(store, "afe", features, 1)
        features[1] += 1.0
        after, _ = afe_forward(store, "afe", features, 1)
        np.testing.assert_array_equal(before[0], after[0])
        assert not np.allclose(before[1], after[1])

    def test_empty_sequence_rejected(self, rng):
        store = ParamStore()
        init_afe(store, "afe", 5, 3, 1, 8, rng)
        with pytest.raises(ShapeError):
            afe_forward(store, "afe", np.zeros((2, 0, 5)), 1)


class TestCGCS:
    """Channel weights from the reference embedding."""

    def _inputs(self, rng, channels=3, frames=4, dim=6):
        store = ParamStore()
        init_projection_triple(store, "cgcs", dim, rng)
        q = rng.normal(size=(1, 1, dim))
        k = rng.normal(size=(channels, 1, dim))
        v = rng.normal(size=(channels, frames, dim))
        return store, q, k, v

    @pytest.mark.parametrize("mode", list(CGCSMode))
    def test_weights_form_a_distribution(self, rng, mode):
        store, q, k, v = self._inputs(rng)
        out, alpha, _ = cgcs_forward(store, "cgcs", q, k, v, mode)
        assert out.shape == v.shape
        assert alpha.shape == (3,)
        assert np.all(alpha > 0)
        assert alpha.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mix_is_permutation_invariant(self, rng):
        store, q, k, v = self._inputs(rng)
        perm = [2, 0, 1]
        out, alpha, _ = cgcs_forward(store, "cgcs", q, k, v, CGCSMode.mix)
        out_p, alpha_p, _ = cgcs_forward(store, "cgcs", q, k[perm], v[perm], CGCSMode.mix)
        np.testing.assert_allclose(out_p, out, atol=1e-12)
        np.testing.assert_allclose(alpha_p, alpha[perm], atol=1e-12)
        # every channel carries the same mixture
        np.testing.assert_allclose(out[0], out[2], atol=1e-12)

    def test_mask_is_permutation_equivariant(self, rng):
        store, q, k, v = self._inputs(rng)
        perm = [1, 2, 0]
        out, _, _ = cgcs_forward(store, "cgcs", q, k, v, CGCSMode.mask)
        out_p, _, _ = cgcs_forward(store, "cgcs", q, k[perm], v[perm], CGCSMode.mask)
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_single_channel_keeps_values(self, rng):
        store, q, k, v = self._inputs(rng, channels=1)
        for mode in CGCSMode:
            out, alpha, _ = cgcs_forward(store, "cgcs", q, k, v, mode)
            np.testing.assert_array_equal(alpha, [1.0])
            np.testing.assert_allclose(out, v @ store.value("cgcs.v.W") + store.value("cgcs.v.b"), atol=1e-12)

    def test_two_channel_scores_ln3_and_zero(self, rng):
        store = _identity_triple("cgcs", 4, rng)
        q = np.array([[[1.0, 0.0, 0.0, 0.0]]])
        k = np.zeros((2, 1, 4))
        # scores are divided by sqrt(4)
        k[0, 0, 0] = 2.0 * np.log(3.0)
        v = rng.normal(size=(2, 3, 4))
        out, alpha, _ = cgcs_forward(store, "cgcs", q, k, v, CGCSMode.mix)
        np.testing.assert_allclose(alpha, [0.75, 0.25], atol=1e-12)
        for channel in range(2):
            np.testing.assert_allclose(out[channel], 0.75 * v[0] + 0.25 * v[1], atol=1e-12)

    def test_identical_keys_give_uniform_weights(self, rng):
        store = _identity_triple("cgcs", 4, rng)
        k = np.tile(rng.normal(size=(1, 1, 4)), (3, 1, 1))
        v = rng.normal(size=(3, 5, 4))
        out, alpha, _ = cgcs_forward(store, "cgcs", rng.normal(size=(1, 1, 4)), k, v, CGCSMode.mask)
        np.testing.assert_allclose(alpha, np.full(3, 1 / 3), atol=1e-12)
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_mismatched_key_rejected(self, rng):
        store, q, k, v = self._inputs(rng)
        with pytest.raises(ShapeError):
            cgcs_forward(store, "cgcs", q, k[:2], v)


class TestGRC:
    """Gated residual around the selected channels."""

    def test_zero_gate_weights_give_half_residual(self, rng):
        store = ParamStore()
        init_grc(store, "grc", 4, rng)
        store.value("grc.gate.W")[...] = 0.0
        x, h = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        out, _ = grc_forward(store, "grc", x, h)
        np.testing.assert_allclose(out, h + 0.5 * x)

    @pytest.mark.parametrize("bias, x_weight", [(-40.0, 0.0), (40.0, 1.0)])
    def test_saturated_gate(self, rng, bias, x_weight):
        store = ParamStore()
        init_grc(store, "grc", 4, rng)
        store.value("grc.gate.W")[...] = 0.0
        store.value("grc.gate.b")[...] = bias
        x, h = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        out, _ = grc_forward(store, "grc", x, h)
        np.testing.assert_allclose(out, h + x_weight * x, atol=1e-12)

    def test_shape_mismatch(self, rng):
        store = ParamStore()
        init_grc(store, "grc", 4, rng)
        with pytest.raises(ShapeError):
            grc_forward(store, "grc", np.zeros((2, 3, 4)), np.zeros((2, 2, 4)))


class TestFGCS:
    """Frame-level attention against the reference frames."""

    def test_weights_per_channel_and_frame(self, rng):
        store = ParamStore()
        init_projection_triple(store, "fgcs", 4, rng)
        out, beta, _ = fgcs_forward(store, "fgcs", rng.normal(size=(1, 5, 4)), rng.normal(size=(3, 5, 4)))
        assert out.shape == (3, 5, 4)
        assert beta.shape == (3, 5, 5)
        np.testing.assert_allclose(beta.sum(axis=-1), 1.0, atol=1e-12)

    def test_concentrates_on_matching_key(self, rng):
        store = _identity_triple("fgcs", 4, rng)
        kv = np.tile(np.eye(4)[None], (2, 1, 1))
        # query equals the frame-2 key scaled by 10·sqrt(D)
        q = np.tile(20.0 * np.eye(4)[2], (1, 4, 1))
        out, beta, _ = fgcs_forward(store, "fgcs", q, kv)
        assert np.all(beta[:, :, 2] >= 0.99)
        np.testing.assert_allclose(out, np.broadcast_to(np.eye(4)[2], out.shape), atol=1e-3)

    def test_identical_keys_give_uniform_weights(self, rng):
        store = ParamStore()
        init_projection_triple(store, "fgcs", 4, rng)
        kv = np.tile(rng.normal(size=(1, 1, 4)), (2, 5, 1))
        _, beta, _ = fgcs_forward(store, "fgcs", rng.normal(size=(1, 5, 4)), kv)
        np.testing.assert_allclose(beta, 0.2, atol=1e-12)

    def test_query_must_be_single_reference(self, rng):
        store = ParamStore()
        init_projection_triple(store, "fgcs", 4, rng)
        with pytest.raises(ShapeError):
            fgcs_forward(store, "fgcs", rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4)))


class TestOuterSelection:
    """CGCS followed by the gated residual."""

    def _context(self, rng, channels=3, frames=4, dim=4):
        return QueryContext(
            a_ref=rng.normal(size=(1, 1, dim)),
            a_channels=rng.normal(size=(channels, 1, dim)),
            x_ref=rng.normal(size=(1, frames, dim)),
            x_channels=rng.normal(size=(channels, frames, dim)),
        )

    def test_without_gate_equals_cgcs(self, rng):
        store = ParamStore()
        init_outer_selection(store, "outer", 4, rng)
        ctx = self._context(rng)
        out, alpha, _ = outer_selection_forward(store, "outer", ctx, CGCSMode.mask, use_grc=False)
        expected, expected_alpha, _ = cgcs_forward(
            store, "outer.cgcs", ctx.a_ref, ctx.a_channels, ctx.x_channels, CGCSMode.mask
        )
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_array_equal(alpha, expected_alpha)

    @pytest.mark.parametrize("mode", list(CGCSMode))
    def test_single_channel_closed_gate_is_identity(self, rng, mode):
        store = ParamStore()
        init_outer_selection(store, "outer", 4, rng)
        for role in ("q", "k", "v"):
            store.value(f"outer.cgcs.{role}.W")[...] = np.eye(4)
        store.value("outer.grc.gate.W")[...] = 0.0
        store.value("outer.grc.gate.b")[...] = -40.0
        ctx = self._context(rng, channels=1)
        out, alpha, _ = outer_selection_forward(store, "outer", ctx, mode)
        np.testing.assert_array_equal(alpha, [1.0])
        np.testing.assert_allclose(out, ctx.x_channels, atol=1e-12)

    def test_context_shapes_validated(self, rng):
        with pytest.raises(ValueError):
            QueryContext(
                a_ref=np.zeros((1, 1, 4)),
                a_channels=np.zeros((2, 1, 4)),
                x_ref=np.zeros((1, 5, 4)),
                x_channels=np.zeros((3, 5, 4)),
            )

    def test_mean_pool(self, rng):
        x = rng.normal(size=(3, 6, 4))
        np.testing.assert_allclose(mean_pool(x)[:, 0], x.mean(axis=1))
