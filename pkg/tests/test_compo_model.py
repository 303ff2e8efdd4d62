"""Model config, forward pass, gradients and checkpoints."""

from configparser import ConfigParser

import numpy as np
import pytest

import compo_globals
import compo_numerics as cn
import compo_local
import compo_model
import compo_moc
from compo_flow import fm_loss
from compo_model import ModelConfig, CompoModel, cfg_dropout
from compo_errors import CheckpointError, ConfigError, NumericsError, \
    TokenError


def small_cfg(**overrides):
    values = dict(width=8, heads=2, block_pairs=1, latent_dim=4, points=8,
                  grid=4, sigma=4)
    values.update(overrides)
    return ModelConfig(**values)


def randomize(model, seed=0, std=0.2):
    rng = np.random.default_rng(seed)
    for _, tensor in model.params.items():
        tensor.value[...] = rng.normal(0.0, std, size=tensor.shape)
    return model


def scene_inputs(cfg, N, seed=1):
    rng = np.random.default_rng(seed)
    Z_t = rng.standard_normal((N, cfg.points, cfg.latent_dim))
    layout = (rng.random((cfg.grid, cfg.grid)) < 0.3).astype(np.uint8)
    return Z_t, layout


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.width, cfg.heads, cfg.block_pairs) == (64, 4, 4)
        assert cfg.n_p == 4
        assert cfg.gate_target == 'key'
        assert cfg.use_routing and cfg.use_compressed_context

    @pytest.mark.parametrize("overrides", [
        {'width': 10, 'heads': 4},
        {'block_pairs': 0},
        {'router_activation': 'relu'},
        {'gate_target': 'query'},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            ModelConfig(**overrides)

    def test_from_config(self):
        parser = ConfigParser()
        parser.read_dict(compo_globals.DEFAULTS)
        assert ModelConfig.from_config(parser) == ModelConfig()
        parser['moc']['gate_target'] = 'value'
        parser['router']['multi_head'] = 'False'
        cfg = ModelConfig.from_config(parser, width=32)
        assert cfg.gate_target == 'value'
        assert cfg.multi_head is False
        assert cfg.width == 32

    def test_chunk_is_not_part_of_identity(self):
        assert ModelConfig(chunk=2) == ModelConfig()
        assert 'chunk' not in ModelConfig().as_strings()


class TestConditioning:
    def test_dropout(self):
        model = CompoModel(small_cfg())
        cond = model.encode_condition(np.ones((4, 4)))
        rng = np.random.default_rng(0)
        assert cfg_dropout(cond, 0.0, rng) is cond
        dropped = cfg_dropout(cond, 1.0, rng)
        assert dropped.null
        assert dropped.embedding is model.params['cond.null']
        with pytest.raises(ConfigError):
            cfg_dropout(cond, 1.5, rng)

    def test_dropout_frequency(self):
        model = CompoModel(small_cfg())
        cond = model.encode_condition(np.ones((4, 4)))
        rng = np.random.default_rng(30)
        dropped = sum(cfg_dropout(cond, 0.1, rng).null for _ in range(10000))
        # three binomial standard deviations: 3 * sqrt(0.1 * 0.9 / 10000)
        assert abs(dropped / 10000 - 0.1) <= 0.009

    def test_condition_encoding(self):
        model = randomize(CompoModel(small_cfg()), seed=31)
        layout = (np.random.default_rng(32).random((4, 4)) < 0.4)
        layout = layout.astype(np.uint8)
        x = layout.reshape(1, -1).astype(np.float64) @ \
            model.params['cond.l1.w'].value + model.params['cond.l1.b'].value
        expected = 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) *
                                            (x + 0.044715 * x ** 3)))
        first = model.encode_condition(layout)
        second = model.encode_condition(layout.copy())
        np.testing.assert_allclose(first.embedding.value, expected,
                                   rtol=0, atol=1e-12)
        assert np.array_equal(first.embedding.value, second.embedding.value)
        assert not first.null
        assert first.null_embedding is model.params['cond.null']

    def test_layout_size_must_match_grid(self):
        model = CompoModel(small_cfg())
        with pytest.raises(ConfigError):
            model.encode_condition(np.ones((8, 8)))

    def test_timestep_features(self):
        features = compo_model.timestep_features(0.0, 6)
        assert features.shape == (1, 6)
        np.testing.assert_array_equal(features[0], [1, 1, 1, 0, 0, 0])
        assert compo_model.timestep_features(0.3, 7).shape == (1, 7)


class TestForward:
    def test_fresh_model_predicts_zero(self):
        cfg = small_cfg(block_pairs=2)
        model = CompoModel(cfg, rng=np.random.default_rng(3))
        Z_t, layout = scene_inputs(cfg, 3)
        v = model.forward(Z_t, 0.4, model.encode_condition(layout))
        assert v.shape == (3, cfg.points, cfg.latent_dim)
        assert not v.value.any()

    def test_one_routing_per_block_pair(self):
        cfg = small_cfg(block_pairs=3)
        model = randomize(CompoModel(cfg), seed=4)
        Z_t, layout = scene_inputs(cfg, 5)
        _, routings = model.forward_routed(Z_t, 0.5,
                                           model.encode_condition(layout))
        assert len(routings) == 3
        assert all(r.k == 1 and r.mode == 'deterministic' for r in routings)

    def test_replayed_routing_reproduces_output(self):
        cfg = small_cfg()
        model = randomize(CompoModel(cfg), seed=5)
        Z_t, layout = scene_inputs(cfg, 6)
        cond = model.encode_condition(layout)
        v, routings = model.forward_routed(Z_t, 0.7, cond,
                                           rng=np.random.default_rng(6))
        replayed, again = model.forward_routed(Z_t, 0.7, cond,
                                               routings=routings)
        assert again[0] is routings[0]
        assert np.array_equal(v.value, replayed.value)

    def test_single_pair_is_local_then_global(self):
        cfg = small_cfg()
        model = randomize(CompoModel(cfg), seed=33)
        Z_t, layout = scene_inputs(cfg, 4, seed=34)
        cond = model.encode_condition(layout)
        ids = [6, 1, 30, 12]
        x = model.pack(cn.as_tensor(Z_t), ids)
        mod = cn.add(model.time_embedding(0.45), cond.embedding)
        pair = model.params.scope('pair0')
        x = compo_local.local_block_forward(x, mod, pair.scope('local'),
                                            cfg.heads)
        x, _ = compo_moc.global_block_forward(x, mod, pair.scope('global'),
                                              cfg)
        manual = model.readout(x, mod).value
        v = model.forward(Z_t, 0.45, cond, ids=ids).value
        assert np.array_equal(v, manual)

    @pytest.mark.parametrize("trial", range(10))
    def test_components_are_permutation_equivariant(self, trial):
        cfg = small_cfg(block_pairs=2)
        model = randomize(CompoModel(cfg), seed=100 + trial)
        rng = np.random.default_rng(200 + trial)
        N = int(rng.integers(3, 7))
        Z_t, layout = scene_inputs(cfg, N, seed=300 + trial)
        cond = model.encode_condition(layout)
        ids = [int(n) for n in rng.choice(cfg.codebook_size, N,
                                          replace=False)]
        t = float(rng.uniform(0.05, 0.95))
        v = model.forward(Z_t, t, cond, ids=ids).value
        perm = rng.permutation(N)
        v_perm = model.forward(Z_t[perm], t, cond,
                               ids=[ids[n] for n in perm]).value
        np.testing.assert_allclose(v_perm, v[perm], rtol=0, atol=1e-8)

    def test_single_component(self):
        cfg = small_cfg()
        model = randomize(CompoModel(cfg), seed=10)
        Z_t, layout = scene_inputs(cfg, 1)
        v, routings = model.forward_routed(Z_t, 0.5,
                                           model.encode_condition(layout))
        assert v.shape == (1, cfg.points, cfg.latent_dim)
        assert routings[0].k == 0

    def test_too_many_components(self):
        cfg = small_cfg(codebook_size=3)
        model = CompoModel(cfg)
        Z_t, layout = scene_inputs(cfg, 4)
        with pytest.raises(TokenError,
                           match="component count exceeds ID codebook"):
            model.forward(Z_t, 0.5, model.encode_condition(layout))

    def test_bad_inputs(self):
        cfg = small_cfg()
        model = CompoModel(cfg)
        cond = model.null_condition()
        with pytest.raises(NumericsError):
            model.forward(np.zeros((2, 8, 5)), 0.5, cond)
        Z_t = np.zeros((2, 8, 4))
        Z_t[1, 3, 0] = np.nan
        with pytest.raises(NumericsError):
            model.forward(Z_t, 0.5, cond)

    def test_end_to_end_gradient(self):
        cfg = small_cfg(points=8, sigma=4)
        model = randomize(CompoModel(cfg), seed=12, std=0.3)
        Z_t, layout = scene_inputs(cfg, 4, seed=13)
        target = np.random.default_rng(14).standard_normal(Z_t.shape)
        ids = [0, 5, 9, 2]

        def loss_fn(params):
            m = CompoModel(cfg, params=params)
            v = m.forward(Z_t, 0.6, m.encode_condition(layout), ids=ids)
            return fm_loss(v, target)

        errors = cn.grad_errors(loss_fn, model.params, max_elements=12,
                                rng=np.random.default_rng(15))
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, worst


class TestCheckpoints:
    def test_save_and_load(self, tmp_path):
        cfg = small_cfg(gate_target='value', multi_head=False)
        model = randomize(CompoModel(cfg), seed=20)
        for _, tensor in model.params.items():
            tensor.value[...] = tensor.value.astype(np.float32)
        path = str(tmp_path / "model")
        compo_model.save_checkpoint(model, path)
        loaded = compo_model.load_checkpoint(path, expected=cfg)
        assert loaded.cfg == cfg
        assert sorted(loaded.params.names()) == sorted(model.params.names())
        for name, tensor in model.params.items():
            assert np.array_equal(loaded.params[name].value, tensor.value)
        Z_t, layout = scene_inputs(cfg, 3)
        v = model.forward(Z_t, 0.2, model.encode_condition(layout)).value
        v_loaded = loaded.forward(Z_t, 0.2,
                                  loaded.encode_condition(layout)).value
        assert np.array_equal(v, v_loaded)

    def test_config_mismatch(self, tmp_path):
        path = str(tmp_path / "model")
        compo_model.save_checkpoint(CompoModel(small_cfg()), path)
        with pytest.raises(CheckpointError, match="width"):
            compo_model.load_checkpoint(path, expected=small_cfg(width=16))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            compo_model.load_checkpoint(str(tmp_path / "absent"))

    def test_truncated_blob(self, tmp_path):
        path = str(tmp_path / "model")
        compo_model.save_checkpoint(CompoModel(small_cfg()), path)
        blob = path + compo_model.BLOB_SUFFIX
        with open(blob, "rb") as blob_file:
            payload = blob_file.read()
        with open(blob, "wb") as blob_file:
            blob_file.write(payload[:len(payload) // 2])
        with pytest.raises(CheckpointError):
            compo_model.load_checkpoint(path)

    def test_warm_start_rebuilds_compressed_queries(self, tmp_path):
        path = str(tmp_path / "model")
        source = randomize(CompoModel(small_cfg(sigma=4)), seed=21)
        compo_model.save_checkpoint(source, path)
        target = CompoModel(small_cfg(sigma=2), rng=np.random.default_rng(22))
        fresh_p = target.params['pack.p'].value.copy()
        compo_model.load_parameters(target, path)
        assert target.params['pack.p'].shape == (4, 8)
        assert np.array_equal(target.params['pack.p'].value, fresh_p)
        np.testing.assert_allclose(target.params['embed.w'].value,
                                   source.params['embed.w'].value, atol=1e-6)

    def test_warm_start_shape_mismatch(self, tmp_path):
        path = str(tmp_path / "model")
        compo_model.save_checkpoint(CompoModel(small_cfg()), path)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            compo_model.load_parameters(CompoModel(small_cfg(width=16)), path)
