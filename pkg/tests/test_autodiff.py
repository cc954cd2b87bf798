"""Gradient checks against central finite differences, all in float64."""

import numpy as np
import pytest

from layersplit import autodiff as ad

SEEDS = range(10)


def _param(gen, shape, name="p"):
    return ad.Parameter(gen.normal(0, 1, shape), name)


def _check(loss_fn, param, tol=1e-6, eps=1e-4):
    err = ad.grad_check(loss_fn, param, eps=eps)
    assert err < tol, f"grad_check error {err:.3g} >= {tol}"


class TestForward:
    def test_add(self):
        x = ad.constant(np.array(1.5))
        assert ad.add(x, x).data == pytest.approx(3.0)

    def test_conv2d_identity_kernel(self, rng):
        img = ad.constant(rng.random((6, 6, 1)))
        w = np.zeros((3, 3, 1, 1))
        w[1, 1, 0, 0] = 1.0
        out = ad.conv2d(img, ad.constant(w), ad.constant(np.zeros(1)))
        np.testing.assert_allclose(out.data, img.data, atol=1e-12)

    def test_global_avg_pool(self):
        x = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
        assert ad.global_avg_pool(x).data[0] == pytest.approx(2.5)

    def test_sum_gradient_ones(self, rng):
        p = _param(rng, (3, 4))
        loss = ad.total_sum(p)
        loss.backward()
        np.testing.assert_array_equal(p.grad, 1.0)

    def test_abs_gradient_sign(self, rng):
        data = rng.normal(0, 1, (4, 4))
        data[np.abs(data) < 0.1] = 0.5  # keep away from the kink
        p = ad.Parameter(data, "p")
        ad.total_sum(ad.abs_(p)).backward()
        np.testing.assert_array_equal(p.grad, np.sign(data))

    def test_backward_requires_scalar(self, rng):
        p = _param(rng, (3,))
        with pytest.raises(ValueError):
            ad.add(p, p).backward()

    def test_backward_twice_identical(self, rng):
        p = _param(rng, (4, 4))
        loss = ad.mean(ad.abs_(ad.leaky_relu(p)))
        loss.backward()
        g1 = p.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(p.grad, g1)


class TestGradCheck:
    def test_linear_graph_near_exact(self, rng):
        p = _param(rng, (5,))
        w = rng.normal(0, 1, (5,))
        _check(lambda: ad.total_sum(ad.mul(p, ad.constant(w))), p, tol=1e-10)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_relu_sum(self, seed):
        gen = np.random.default_rng(seed)
        x = ad.constant(gen.normal(0, 1, (5, 5, 2)))
        w = _param(gen, (3, 3, 2, 3), "w")
        b = _param(gen, (3,), "b")
        for p in (w, b):
            _check(lambda: ad.total_sum(ad.leaky_relu(ad.conv2d(x, w, b))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_wrt_input(self, seed):
        gen = np.random.default_rng(seed)
        x = _param(gen, (5, 5, 2), "x")
        w = ad.constant(gen.normal(0, 1, (3, 3, 2, 3)))
        b = ad.constant(gen.normal(0, 1, (3,)))
        _check(lambda: ad.total_sum(ad.conv2d(x, w, b)), x)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_fully_connected(self, seed):
        gen = np.random.default_rng(seed)
        x = _param(gen, (6,), "x")
        w = _param(gen, (6, 4), "w")
        b = _param(gen, (4,), "b")
        for p in (x, w, b):
            _check(lambda: ad.total_sum(ad.sigmoid(ad.fully_connected(x, w, b))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_ops(self, seed):
        gen = np.random.default_rng(seed)
        a = _param(gen, (4, 4, 2), "a")
        b = ad.constant(gen.normal(0, 1, (4, 4, 2)))

        def loss():
            y = ad.add(ad.mul(a, b), ad.scale(ad.sub(a, b), 0.3))
            return ad.mean(ad.mul(y, y))

        _check(loss, a)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_structural_ops(self, seed):
        gen = np.random.default_rng(seed)
        a = _param(gen, (4, 4, 2), "a")
        v = _param(gen, (3,), "v")

        def loss():
            x = ad.concat_channels([a, ad.tile2d(v, 4, 4)])
            x = ad.narrow(x, 2, 1, 4)
            return ad.total_sum(ad.global_avg_pool(x))

        for p in (a, v):
            _check(loss, p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample_grad(self, seed):
        gen = np.random.default_rng(seed)
        p = _param(gen, (3, 4, 2), "p")
        # smooth loss: abs kinks would poison the finite differences
        _check(lambda: ad.mean(ad.mul(ad.upsample2x(p), ad.upsample2x(p))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_ops(self, seed):
        gen = np.random.default_rng(seed)
        p = _param(gen, (5, 5, 1), "p")
        _check(lambda: ad.add(ad.mean(ad.mul(ad.grad_x(p), ad.grad_x(p))),
                              ad.mean(ad.mul(ad.grad_y(p), ad.grad_y(p)))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_warp_wrt_src(self, seed):
        gen = np.random.default_rng(seed)
        src = _param(gen, (6, 6, 2), "src")
        flow = ad.constant(gen.uniform(-1.3, 1.3, (6, 6, 2)))
        _check(lambda: ad.total_sum(ad.bilinear_warp(src, flow)), src)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_warp_wrt_flow(self, seed):
        gen = np.random.default_rng(seed)
        src = ad.constant(gen.random((8, 8, 1)))
        # keep samples interior and away from integer grid lines
        base = gen.uniform(0.2, 0.8, (8, 8, 2)) + gen.integers(-1, 2, (8, 8, 2))
        flow = ad.Parameter(base, "flow")
        _check(lambda: ad.total_sum(ad.bilinear_warp(src, flow)), flow, tol=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_correlate(self, seed):
        gen = np.random.default_rng(seed)
        cj = _param(gen, (5, 5, 3), "cj")
        ck = _param(gen, (5, 5, 3), "ck")
        for p in (cj, ck):
            _check(lambda: ad.mean(ad.abs_(ad.correlate(cj, ck, radius=2))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_l1_mean_masked(self, seed):
        gen = np.random.default_rng(seed)
        a = _param(gen, (4, 4, 2), "a")
        b = ad.constant(gen.normal(0, 1, (4, 4, 2)))
        mask = (gen.random((4, 4)) > 0.4).astype(np.float64)
        _check(lambda: ad.l1_mean(a, b, mask=mask), a)


class TestLeakyRelu:
    def test_zero_takes_negative_branch(self):
        p = ad.Parameter(np.zeros((3,)), "p")
        ad.total_sum(ad.leaky_relu(p)).backward()
        np.testing.assert_allclose(p.grad, 0.1)


class TestAdam:
    def test_zero_gradient_no_move(self, rng):
        p = _param(rng, (3,))
        before = p.data.copy()
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.zeros(3)
        opt.step()
        np.testing.assert_array_equal(p.data, before)
        assert opt.step_count == 1

    def test_first_step_is_lr_times_sign(self, rng):
        p = _param(rng, (5,))
        before = p.data.copy()
        g = rng.normal(0, 1, (5,))
        opt = ad.Adam([p], lr=0.01)
        p.grad = g
        opt.step()
        np.testing.assert_allclose(p.data, before - 0.01 * np.sign(g), atol=1e-6)

    def test_quadratic_convergence(self):
        p = ad.Parameter(np.array([0.0]), "p")
        opt = ad.Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            loss = ad.total_sum(ad.mul(ad.sub(p, ad.constant(np.array([3.0]))),
                                       ad.sub(p, ad.constant(np.array([3.0])))))
            loss.backward()
            opt.step()
        assert abs(p.data[0] - 3.0) < 0.01

    def test_nan_gradient_raises(self, rng):
        p = _param(rng, (2,))
        opt = ad.Adam([p])
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError):
            opt.step()


class TestCheckpoint:
    def test_bit_exact_round_trip(self, rng, tmp_path):
        params = {
            "net/conv1.w": rng.normal(0, 1, (3, 3, 4, 8)).astype(np.float32),
            "net/conv1.b": rng.normal(0, 1, (8,)).astype(np.float32),
            "scalarish": rng.normal(0, 1, (1,)).astype(np.float32),
        }
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(path, params)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].dtype == np.float32
            np.testing.assert_array_equal(loaded[k], params[k])

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)

    def test_magic_value(self):
        assert ad.CHECKPOINT_MAGIC == b"LSCKPT1\n"
