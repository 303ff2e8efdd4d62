"""Flow path, loss and the guided Euler sampler."""

import numpy as np
import pytest

import compo_flow
from compo_model import ModelConfig, CompoModel
from compo_errors import NumericsError, SamplingError


def small_model(seed=None):
    cfg = ModelConfig(width=8, heads=2, block_pairs=1, latent_dim=4,
                      points=8, grid=4, sigma=4)
    model = CompoModel(cfg)
    if seed is not None:
        rng = np.random.default_rng(seed)
        for _, tensor in model.params.items():
            tensor.value[...] = rng.normal(0.0, 0.2, size=tensor.shape)
    return model


class TestFlowBatch:
    def test_interpolation_and_target(self):
        rng = np.random.default_rng(0)
        Z0 = rng.standard_normal((3, 8, 4))
        batch = compo_flow.make_flow_batch(Z0, np.random.default_rng(1),
                                           t=0.25)
        eps = np.random.default_rng(1).standard_normal(Z0.shape)
        np.testing.assert_array_equal(batch.eps, eps)
        np.testing.assert_allclose(batch.Z_t, 0.75 * Z0 + 0.25 * eps,
                                   atol=1e-15)
        np.testing.assert_array_equal(batch.target, eps - Z0)

    def test_endpoints(self):
        Z0 = np.random.default_rng(2).standard_normal((2, 4, 3))
        clean = compo_flow.make_flow_batch(Z0, np.random.default_rng(3), t=0.0)
        noise = compo_flow.make_flow_batch(Z0, np.random.default_rng(3), t=1.0)
        np.testing.assert_array_equal(clean.Z_t, Z0)
        np.testing.assert_array_equal(noise.Z_t, noise.eps)

    def test_drawn_t_is_shared_and_in_range(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            batch = compo_flow.make_flow_batch(np.zeros((3, 2, 2)), rng)
            assert 0.0 <= batch.t <= 1.0
            # one level for every component: Z_t = t * eps when Z0 = 0
            np.testing.assert_allclose(batch.Z_t, batch.t * batch.eps)

    def test_t_out_of_range(self):
        with pytest.raises(NumericsError):
            compo_flow.make_flow_batch(np.zeros((1, 2, 2)),
                                       np.random.default_rng(0), t=1.5)

    def test_non_finite_latents(self):
        with pytest.raises(NumericsError):
            compo_flow.make_flow_batch(np.full((1, 2, 2), np.inf),
                                       np.random.default_rng(0))


class TestLoss:
    def test_perfect_prediction(self):
        target = np.random.default_rng(5).standard_normal((2, 3, 4))
        assert float(compo_flow.fm_loss(target, target).value) == 0.0

    def test_mean_squared_error(self):
        loss = compo_flow.fm_loss(np.ones((2, 2)), np.zeros((2, 2)))
        assert float(loss.value) == 1.0
        loss = compo_flow.fm_loss(np.array([[3.0, 0.0]]), np.zeros((1, 2)))
        assert float(loss.value) == 4.5

    def test_shape_mismatch(self):
        with pytest.raises(NumericsError):
            compo_flow.fm_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSampler:
    def test_exact_velocity_recovers_data(self):
        model = small_model()
        Z0 = np.random.default_rng(6).standard_normal((3, 8, 4))

        def velocity(Z, t):
            # straight line through Z0: v = (Z - Z0) / t
            return (Z - Z0) / t

        Z = compo_flow.sample(model, 3, 10, model.null_condition(), 1.0,
                              np.random.default_rng(7), velocity=velocity)
        np.testing.assert_allclose(Z, Z0, atol=1e-10)

    def test_fresh_model_keeps_the_noise(self):
        model = small_model()
        cond = model.encode_condition(np.ones((4, 4)))
        Z = compo_flow.sample(model, 2, 3, cond, 4.0,
                              np.random.default_rng(8))
        np.testing.assert_array_equal(
            Z, np.random.default_rng(8).standard_normal((2, 8, 4)))

    def test_seeded(self):
        model = small_model(seed=9)
        cond = model.encode_condition(np.eye(4))
        first = compo_flow.sample(model, 3, 4, cond, 2.0,
                                  np.random.default_rng(10))
        second = compo_flow.sample(model, 3, 4, cond, 2.0,
                                   np.random.default_rng(10))
        assert np.array_equal(first, second)
        assert first.shape == (3, 8, 4)

    def test_non_finite_state_names_the_step(self):
        model = small_model()
        calls = []

        def velocity(Z, t):
            calls.append(t)
            return np.full_like(Z, np.inf if len(calls) == 3 else 0.0)

        with pytest.raises(SamplingError) as info:
            compo_flow.sample(model, 2, 5, model.null_condition(), 1.0,
                              np.random.default_rng(0), velocity=velocity)
        assert info.value.step == 2

    def test_numerics_error_becomes_sampling_error(self):
        model = small_model()

        def velocity(Z, t):
            raise NumericsError("empty attention context")

        with pytest.raises(SamplingError, match="step 0") as info:
            compo_flow.sample(model, 2, 5, model.null_condition(), 1.0,
                              np.random.default_rng(0), velocity=velocity)
        assert info.value.step == 0

    def test_steps_must_be_positive(self):
        model = small_model()
        with pytest.raises(SamplingError):
            compo_flow.sample(model, 2, 0, model.null_condition(), 1.0,
                              np.random.default_rng(0))


class TestGuidance:
    def count_calls(self, model, monkeypatch):
        calls = []
        forward_routed = model.forward_routed

        def counting(*args, **kwargs):
            calls.append(kwargs.get('routings'))
            return forward_routed(*args, **kwargs)

        monkeypatch.setattr(model, 'forward_routed', counting)
        return calls

    def test_scale_one_skips_the_unconditional_branch(self, monkeypatch):
        model = small_model(seed=11)
        calls = self.count_calls(model, monkeypatch)
        Z = np.random.default_rng(12).standard_normal((3, 8, 4))
        compo_flow.guided_velocity(model, Z, 0.5,
                                   model.encode_condition(np.eye(4)), 1.0,
                                   [0, 1, 2])
        assert len(calls) == 1

    def test_null_condition_skips_the_unconditional_branch(self,
                                                           monkeypatch):
        model = small_model(seed=13)
        calls = self.count_calls(model, monkeypatch)
        Z = np.random.default_rng(14).standard_normal((3, 8, 4))
        compo_flow.guided_velocity(model, Z, 0.5, model.null_condition(), 4.0,
                                   [0, 1, 2])
        assert len(calls) == 1

    def test_branches_share_the_conditional_routing(self, monkeypatch):
        model = small_model(seed=15)
        cond = model.encode_condition(np.eye(4))
        Z = np.random.default_rng(16).standard_normal((5, 8, 4))
        ids = [4, 8, 15, 16, 23]
        v_cond, routings = model.forward_routed(Z, 0.5, cond, ids=ids)
        v_uncond, _ = model.forward_routed(Z, 0.5, model.null_condition(),
                                           routings=routings, ids=ids)
        calls = self.count_calls(model, monkeypatch)
        guided = compo_flow.guided_velocity(model, Z, 0.5, cond, 3.0, ids)
        assert len(calls) == 2
        assert calls[0] is None
        assert calls[1] is not None and len(calls[1]) == 1
        assert calls[1][0] == routings[0]
        expected = v_uncond.value + 3.0 * (v_cond.value - v_uncond.value)
        np.testing.assert_allclose(guided, expected, atol=1e-12)
