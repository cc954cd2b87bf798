import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layersplit import autodiff as ad
from layersplit import core
from layersplit import fusion as fus


def _level_inputs(gen, net, h=6, w=8, frames=5, channels=3, alpha=False):
    warped = [gen.random((h, w, channels)) for _ in range(frames)]
    diffs = [gen.random((h, w, channels)) for _ in range(frames)]
    masks = [(gen.random((h, w)) > 0.2).astype(float) for _ in range(frames)]
    prev_b = ad.constant(gen.random((h, w, channels)).astype(np.float32))
    prev_o = ad.constant(gen.random((h, w, 1 if alpha else channels)).astype(np.float32))
    return fus.LevelInputs(warped, diffs, masks, prev_b, prev_o)


class TestInitCoarseLayers:
    def test_identical_frames_zero_flow(self, rng):
        frame = rng.random((5, 7, 3))
        frames = [frame.copy() for _ in range(4)]
        zero = np.zeros((5, 7, 2))
        b0, r0 = fus.init_coarse_layers(frames, [zero] * 4, [zero] * 4)
        np.testing.assert_allclose(b0, frame, atol=1e-12)
        np.testing.assert_allclose(r0, frame, atol=1e-12)

    def test_two_constant_frames(self):
        a = np.full((4, 4, 1), 0.2)
        b = np.full((4, 4, 1), 0.6)
        zero = np.zeros((4, 4, 2))
        b0, _ = fus.init_coarse_layers([a, b], [zero, zero], None)
        np.testing.assert_allclose(b0, 0.4)

    def test_matches_warp_then_mean_oracle(self, rng):
        frames = [rng.random((6, 8, 3)) for _ in range(3)]
        flows = [rng.normal(0, 1, (6, 8, 2)) for _ in range(3)]
        b0, _ = fus.init_coarse_layers(frames, flows, None)
        expected = np.mean([core.warp_bilinear(f, fl)[0] for f, fl in zip(frames, flows)], axis=0)
        np.testing.assert_allclose(b0, expected, rtol=1e-12)

    def test_zero_flows_equal_temporal_mean(self, rng):
        frames = [rng.random((4, 4, 3)) for _ in range(5)]
        zero = np.zeros((4, 4, 2))
        b0, _ = fus.init_coarse_layers(frames, [zero] * 5, None)
        np.testing.assert_allclose(b0, np.mean(frames, axis=0), atol=1e-12)

    def test_empty_error(self):
        with pytest.raises(ValueError):
            fus.init_coarse_layers([], [], None)


class TestFuseBaseline:
    def test_identical_stack(self, rng):
        img = rng.random((5, 5, 3))
        stack = [img.copy() for _ in range(4)]
        masks = [np.ones((5, 5))] * 4
        for method in ("mean", "median"):
            np.testing.assert_allclose(fus.fuse_baseline(stack, masks, method), img)

    def test_three_values(self):
        vals = [np.full((2, 2, 1), v) for v in (0.0, 0.5, 1.0)]
        masks = [np.ones((2, 2))] * 3
        np.testing.assert_allclose(fus.fuse_baseline(vals, masks, "mean"), 0.5)
        np.testing.assert_allclose(fus.fuse_baseline(vals, masks, "median"), 0.5)

    def test_five_values_skewed(self):
        vals = [np.full((2, 2, 1), v) for v in (0.0, 0.0, 1.0, 1.0, 1.0)]
        masks = [np.ones((2, 2))] * 5
        np.testing.assert_allclose(fus.fuse_baseline(vals, masks, "median"), 1.0)
        np.testing.assert_allclose(fus.fuse_baseline(vals, masks, "mean"), 0.6)

    def test_even_count_takes_lower_median(self):
        vals = [np.full((1, 1, 1), v) for v in (0.1, 0.9)]
        masks = [np.ones((1, 1))] * 2
        np.testing.assert_allclose(fus.fuse_baseline(vals, masks, "median"), 0.1)

    def test_all_invalid_copies_keyframe(self, rng):
        vals = [rng.random((3, 3, 1)) for _ in range(5)]
        masks = [np.zeros((3, 3))] * 5
        out = fus.fuse_baseline(vals, masks, "mean", key_index=2)
        np.testing.assert_allclose(out, vals[2])

    @given(st.integers(0, 2 ** 31 - 1), st.permutations(list(range(5))))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariance(self, seed, perm):
        gen = np.random.default_rng(seed)
        vals = [gen.random((4, 4, 2)) for _ in range(5)]
        masks = [(gen.random((4, 4)) > 0.3).astype(float) for _ in range(5)]
        key = 2
        for method in ("mean", "median"):
            base = fus.fuse_baseline(vals, masks, method, key)
            # keyframe identity travels with the permutation
            new_key = perm.index(key)
            permuted = fus.fuse_baseline([vals[i] for i in perm],
                                         [masks[i] for i in perm], method, new_key)
            np.testing.assert_allclose(permuted, base, atol=1e-12)

    def test_unknown_method_error(self):
        with pytest.raises(ValueError):
            fus.fuse_baseline([np.zeros((2, 2, 1))], [np.ones((2, 2))], "mode")


class TestReconstructLayer:
    def test_residual_identity_at_zero_init(self, rng):
        net = fus.FusionNetwork(5, "background", seed=0)
        inputs = _level_inputs(rng, net)
        out = fus.reconstruct_layer(inputs, net)
        np.testing.assert_array_equal(out.data, inputs.prev_background.data)

    def test_obstruction_mode_uses_obstruction_prev(self, rng):
        net = fus.FusionNetwork(5, "obstruction", seed=0)
        inputs = _level_inputs(rng, net)
        out = fus.reconstruct_layer(inputs, net)
        np.testing.assert_array_equal(out.data, inputs.prev_obstruction.data)

    def test_deterministic(self, rng):
        net = fus.FusionNetwork(5, "background", seed=1)
        net.params["conv3.w"].data += 0.01
        inputs = _level_inputs(rng, net)
        o1 = fus.reconstruct_layer(inputs, net)
        o2 = fus.reconstruct_layer(inputs, net)
        np.testing.assert_array_equal(o1.data, o2.data)

    def test_channel_mismatch_error(self, rng):
        net = fus.FusionNetwork(4, "background", seed=0)   # expects T=4 layout
        inputs = _level_inputs(rng, net, frames=5)
        with pytest.raises(ValueError):
            fus.reconstruct_layer(inputs, net)

    def test_alpha_net_rejected(self, rng):
        net = fus.FusionNetwork(5, "background_with_alpha", seed=0)
        inputs = _level_inputs(rng, net, alpha=True)
        with pytest.raises(ValueError):
            fus.reconstruct_layer(inputs, net)


class TestReconstructWithAlpha:
    def test_zero_init_midpoint_alpha(self, rng):
        net = fus.FusionNetwork(5, "background_with_alpha", seed=0)
        inputs = _level_inputs(rng, net, alpha=True)
        background, alpha = fus.reconstruct_with_alpha(inputs, net)
        np.testing.assert_array_equal(background.data, inputs.prev_background.data)
        np.testing.assert_allclose(alpha.data, 0.5)

    def test_alpha_bounded(self, rng):
        net = fus.FusionNetwork(5, "background_with_alpha", seed=2)
        net.params["conv3.w"].data += rng.normal(0, 0.5, net.params["conv3.w"].data.shape).astype(np.float32)
        inputs = _level_inputs(rng, net, alpha=True)
        _, alpha = fus.reconstruct_with_alpha(inputs, net)
        assert alpha.data.min() >= 0.0 and alpha.data.max() <= 1.0

    def test_reflection_net_rejected(self, rng):
        net = fus.FusionNetwork(5, "background", seed=0)
        inputs = _level_inputs(rng, net)
        with pytest.raises(ValueError):
            fus.reconstruct_with_alpha(inputs, net)


class TestFusionNetwork:
    def test_no_parameter_sharing(self):
        b = fus.FusionNetwork(5, "background", seed=1)
        r = fus.FusionNetwork(5, "obstruction", seed=2)
        assert not np.array_equal(b.params["conv1.w"].data, r.params["conv1.w"].data)

    def test_input_channel_layout(self):
        assert fus.FusionNetwork(5, "background").in_channels == 5 * 7 + 6
        assert fus.FusionNetwork(5, "background_with_alpha").in_channels == 5 * 7 + 4
