import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcasynth import tensor as tn
from wcasynth.diffusion import (LatentCodec, codec_decode, codec_encode, codec_train, ddim_sample, ddim_timesteps,
                                ddpm_sample, forward_diffuse, make_schedule, schedule_from_betas, training_loss)
from wcasynth.errors import ShapeError
from wcasynth.tensor import Tensor


def product_oracle(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return np.array(out)


class TestSchedule:
    def test_constant_beta(self):
        s = schedule_from_betas([0.1, 0.1, 0.1])
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.81, 0.729], atol=1e-12)
        s = make_schedule(3, 0.1, 0.1)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.81, 0.729], atol=1e-12)

    def test_single_step(self):
        np.testing.assert_allclose(make_schedule(1, 0.5, 0.5).alpha_bars, [0.5])

    def test_default_schedule(self):
        s = make_schedule(1000, 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[-1] < 1e-4
        assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 1000), st.floats(1e-5, 0.05), st.floats(0, 0.2))
    def test_product_oracle(self, T, start, span):
        s = make_schedule(T, start, min(start + span, 0.5))
        np.testing.assert_allclose(s.alpha_bars, product_oracle(s.betas), rtol=0, atol=1e-7)

    @pytest.mark.parametrize("T,a,b", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_bounds(self, T, a, b):
        with pytest.raises(ValueError):
            make_schedule(T, a, b)

    def test_alpha_bar_zero_is_one(self):
        assert make_schedule(10).alpha_bar(0) == 1.0


class TestForward:
    def test_identity_limit(self):
        x0 = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = forward_diffuse(x0, 1, np.ones_like(x0), alpha_bar=1.0)
        np.testing.assert_array_equal(out.data, x0)

    def test_pure_noise_limit(self):
        eta = np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = forward_diffuse(np.ones_like(eta), 1, eta, alpha_bar=0.0)
        np.testing.assert_array_equal(out.data, eta)

    def test_hand_value(self):
        out = forward_diffuse(np.array([2.0]), 1, np.array([1.0]), alpha_bar=0.81)
        assert out.data[0] == pytest.approx(0.9 * 2 + math.sqrt(0.19), abs=1e-6)
        assert out.data[0] == pytest.approx(2.23589, abs=1e-5)

    def test_per_sample_timesteps(self):
        s = make_schedule(10, 0.1, 0.2)
        x0 = np.ones((2, 1, 2, 2), np.float32)
        out = forward_diffuse(x0, np.array([1, 10]), np.zeros_like(x0), s).data
        np.testing.assert_allclose(out[0], math.sqrt(s.alpha_bars[0]), rtol=1e-6)
        np.testing.assert_allclose(out[1], math.sqrt(s.alpha_bars[9]), rtol=1e-6)

    @pytest.mark.parametrize("t", [0, 11])
    def test_t_out_of_range(self, t):
        s = make_schedule(10)
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros((1, 1)), t, np.zeros((1, 1)), s)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_diffuse(np.zeros((1, 2)), 1, np.zeros((1, 3)), make_schedule(10))


class TestLoss:
    sched = make_schedule(50)

    def test_oracle_denoiser_zero(self):
        eta = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
        loss = training_loss(lambda x, t, a: Tensor(eta), np.zeros_like(eta), 5, eta, None, self.sched)
        assert loss.item() == 0.0

    def test_zero_model_unit_noise(self):
        eta = np.ones((2, 3, 4, 4), np.float32)
        loss = training_loss(lambda x, t, a: Tensor(np.zeros_like(eta)), np.zeros_like(eta), 5, eta, None, self.sched)
        assert loss.item() == pytest.approx(1.0)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(4)
        eta = rng.standard_normal((3, 2, 5, 5)).astype(np.float32)
        pred = rng.standard_normal(eta.shape).astype(np.float32)
        loss = training_loss(lambda x, t, a: Tensor(pred), np.zeros_like(eta), 7, eta, None, self.sched)
        ref = np.sum((eta.astype(np.float64) - pred) ** 2) / eta.size
        assert loss.item() == pytest.approx(ref, rel=1e-6)

    def test_shape_mismatch(self):
        eta = np.zeros((1, 3, 4, 4), np.float32)
        with pytest.raises(ShapeError):
            training_loss(lambda x, t, a: Tensor(np.zeros((1, 3, 2, 2))), eta, 1, eta, None, self.sched)

    def test_gradient_reaches_model(self):
        w = tn.tensor(0.5, requires_grad=True)
        eta = np.ones((1, 1, 2, 2), np.float32)
        with tn.Tape() as tape:
            loss = training_loss(lambda x, t, a: tn.mul(x, w), np.zeros_like(eta), 3, eta, None, self.sched)
        tn.backward(loss, tape)
        assert w.grad is not None and float(w.grad) != 0


def noise_oracle(x0, sched):
    """Model that returns the exact noise consistent with x_t and the known x0."""
    def fn(xt, t, args):
        ab = sched.alpha_bar(t).reshape(-1, *([1] * (xt.ndim - 1)))
        return Tensor((xt.data - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab))
    return fn


class TestDDIM:
    def test_timesteps(self):
        assert ddim_timesteps(10, 5) == [(10, 8), (8, 6), (6, 4), (4, 2), (2, 0)]
        assert ddim_timesteps(200, 20)[0] == (200, 190)
        assert ddim_timesteps(200, 20)[-1] == (10, 0)
        assert ddim_timesteps(7, 3) == [(7, 5), (5, 3), (3, 0)]

    def test_steps_out_of_range(self):
        with pytest.raises(ValueError):
            ddim_sample(lambda x, t, a: x, make_schedule(10), 11, (1, 1, 2, 2), 0)

    def test_oracle_inversion_full_steps(self):
        sched = make_schedule(200, 5e-4, 0.1)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
        eta = rng.standard_normal(x0.shape).astype(np.float32)
        xT = forward_diffuse(x0, 200, eta, sched).data
        out = ddim_sample(noise_oracle(x0, sched), sched, 200, x0.shape, 0, x_start=xT).data
        assert np.max(np.abs(out - x0)) < 1e-4

    def test_single_step_shape_and_finite(self):
        sched = make_schedule(50)
        out = ddim_sample(lambda x, t, a: Tensor(np.zeros(x.shape)), sched, 1, (2, 3, 4, 4), 5).data
        assert out.shape == (2, 3, 4, 4) and np.all(np.isfinite(out))

    def test_deterministic(self):
        sched = make_schedule(30)
        fn = lambda x, t, a: tn.mul(x, 0.3)  # noqa: E731
        a = ddim_sample(fn, sched, 10, (2, 1, 4, 4), 9).data
        b = ddim_sample(fn, sched, 10, (2, 1, 4, 4), 9).data
        assert a.tobytes() == b.tobytes()

    def test_per_element_streams(self):
        sched = make_schedule(30)
        fn = lambda x, t, a: tn.mul(x, 0.3)  # noqa: E731
        pair = ddim_sample(fn, sched, 5, (2, 1, 4, 4), 9).data
        single = ddim_sample(fn, sched, 5, (1, 1, 4, 4), 10).data
        np.testing.assert_array_equal(pair[1], single[0])

    def test_stochastic_variant_rejected(self):
        with pytest.raises(NotImplementedError):
            ddim_sample(lambda x, t, a: x, make_schedule(10), 5, (1, 1, 2, 2), 0, eta_coeff=0.5)


def rollout_oracle(x0, sched, seed):
    """Ancestral sampling written out step by step in float64 with the noise oracle."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(x0.shape[1:], dtype=np.float32)[None].astype(np.float64)
    for t in range(sched.T, 0, -1):
        ab = sched.alpha_bars[t - 1]
        ab_prev = 1.0 if t == 1 else sched.alpha_bars[t - 2]
        beta = sched.betas[t - 1]
        eps = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        xhat = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        mean = (math.sqrt(ab_prev) * beta * xhat + math.sqrt(1 - beta) * (1 - ab_prev) * x) / (1 - ab)
        if t > 1:
            mean = mean + math.sqrt(beta) * rng.standard_normal(x0.shape[1:], dtype=np.float32)[None]
        x = mean
    return x


class TestDDPM:
    def test_single_step_no_noise(self):
        sched = make_schedule(1, 0.5, 0.5)
        x0 = np.full((1, 1, 2, 2), 0.25, np.float32)
        out = ddpm_sample(noise_oracle(x0, sched), sched, 3, shape=x0.shape).data
        np.testing.assert_allclose(out, x0, atol=1e-6)

    def test_deterministic(self):
        sched = make_schedule(20)
        fn = lambda x, t, a: tn.mul(x, 0.5)  # noqa: E731
        a = ddpm_sample(fn, sched, 4, shape=(2, 1, 3, 3)).data
        b = ddpm_sample(fn, sched, 4, shape=(2, 1, 3, 3)).data
        assert a.tobytes() == b.tobytes()

    def test_oracle_rollout(self):
        sched = make_schedule(5, 0.05, 0.3)
        x0 = np.array([[[[0.5, -0.5], [0.2, 0.9]]]], np.float32)
        out = ddpm_sample(noise_oracle(x0, sched), sched, 11, shape=x0.shape).data
        ref = rollout_oracle(x0.astype(np.float64), sched, 11)
        np.testing.assert_allclose(out, ref, atol=1e-5)
        assert np.mean(np.abs(out - x0)) < math.sqrt(sched.betas[0])


class TestCodec:
    def test_identity_codec_exact(self):
        x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
        c = LatentCodec(mode="pixel")
        assert codec_decode(c, codec_encode(c, Tensor(x))).data.tobytes() == x.tobytes()

    def test_latent_shapes(self):
        c = LatentCodec(latent_channels=4)
        z = codec_encode(c, Tensor(np.zeros((2, 3, 32, 32))))
        assert z.shape == (2, 4, 8, 8)
        assert codec_decode(c, z).shape == (2, 3, 32, 32)

    def test_decode_rejects_wrong_latent(self):
        with pytest.raises(ShapeError):
            LatentCodec(latent_channels=4).decode(Tensor(np.zeros((1, 3, 8, 8))))

    def test_training_halves_reconstruction_error(self):
        from wcasynth.data import make_dataset, stack

        x, _, _ = stack(make_dataset(64, 0, 32).samples)
        c = LatentCodec(seed=0)
        initial = c.reconstruction_mse(x)
        hist = codec_train(c, x, epochs=200)
        assert hist[-1] < hist[0]
        assert c.reconstruction_mse(x) < 0.5 * initial

    def test_sklearn_roundtrip(self):
        c = LatentCodec(mode="pixel")
        x = np.ones((1, 3, 4, 4), np.float32)
        assert c.fit(x).inverse_transform(c.transform(x)).shape == x.shape
        assert c.get_params()["mode"] == "pixel"
