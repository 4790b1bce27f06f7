import numpy as np
import pytest
import torch
from torch import nn

from latent_relight import model as M


def _random_image(size, seed=0):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


def _unit_code(dim=16, seed=0):
    code = np.random.default_rng(seed).standard_normal(dim).astype(np.float32)
    return code / np.linalg.norm(code)


class TestModelConfig:
    def test_defaults(self):
        cfg = M.ModelConfig().validate()
        assert cfg.base_resolution == 256
        assert cfg.blocks_per_level == [1, 2, 2, 4, 4, 4]
        assert cfg.channels_per_level == [32, 64, 128, 128, 256, 512]
        assert cfg.extrinsic_dim == 16
        assert cfg.alpha == 5e-3
        assert cfg.bottleneck_resolution == 8

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            M.ModelConfig(blocks_per_level=[1, 1], channels_per_level=[8]).validate()
        with pytest.raises(ValueError):
            M.ModelConfig(base_resolution=100).validate()
        with pytest.raises(ValueError):
            M.ModelConfig(alpha=-1e-3).validate()

    def test_roundtrip(self):
        cfg = M.ModelConfig(base_resolution=64, blocks_per_level=[1, 1], channels_per_level=[8, 16])
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInitModel:
    def test_deterministic_weights(self, tiny_model_config):
        a = M.init_model(tiny_model_config)
        b = M.init_model(tiny_model_config)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_tiny_parameter_count(self, untrained_model):
        assert sum(p.numel() for p in untrained_model.parameters()) < 2_000_000

    def test_default_config_level_structure(self):
        net = M.init_model(M.ModelConfig())
        names = set(net.state_dict())
        for i in range(6):
            assert any(n.startswith(f"encoder_levels.{i}.") for n in names)
            assert any(n.startswith(f"decoder_levels.{i}.") for n in names)
        assert not any(n.startswith("encoder_levels.6.") for n in names)
        assert not any(n.startswith("decoder_levels.6.") for n in names)

    def test_name_set_fixed_by_config(self, tiny_model_config):
        a = M.init_model(tiny_model_config)
        cfg2 = M.ModelConfig(**{**tiny_model_config.to_dict(), "seed": 999})
        b = M.init_model(cfg2)
        assert set(a.state_dict()) == set(b.state_dict())


class TestEncode:
    def test_level_shapes_default_config(self):
        net = M.init_model(M.ModelConfig(seed=1))
        feats, code = M.encode(net, _random_image(256))
        shapes = [lvl.shape for lvl in feats.levels]
        assert shapes == [
            (128, 128, 64),
            (64, 64, 128),
            (32, 32, 128),
            (16, 16, 256),
            (8, 8, 512),
        ]
        assert code.code.shape == (16,)

    def test_unit_norm_contracts(self, untrained_model):
        feats, code = M.encode(untrained_model, _random_image(64, seed=2))
        feats.validate(tol=1e-5)
        code.validate(tol=1e-5)

    def test_bitwise_determinism(self, untrained_model):
        img = _random_image(64, seed=3)
        f1, c1 = M.encode(untrained_model, img)
        f2, c2 = M.encode(untrained_model, img)
        assert np.array_equal(c1.code, c2.code)
        for a, b in zip(f1.levels, f2.levels):
            assert np.array_equal(a, b)

    def test_wrong_size_rejected(self, untrained_model):
        with pytest.raises(ValueError):
            M.encode(untrained_model, _random_image(32))


class TestConstrainedScale:
    def _head(self, channels=8, dim=16, seed=0):
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            head = M.InjectionMLP(dim, 32, channels)
        return head

    def test_alpha_zero_identity(self, rng):
        head = self._head()
        for _ in range(20):
            fmap = rng.standard_normal((6, 6, 8)).astype(np.float32)
            code = _unit_code(seed=int(rng.integers(1 << 30)))
            out = M.constrained_scale(fmap, code, 0.0, head)
            assert out is fmap

    def test_zero_mlp_output_is_identity(self):
        head = self._head()
        nn.init.zeros_(head.net[-1].weight)
        nn.init.zeros_(head.net[-1].bias)
        fmap = np.random.default_rng(4).standard_normal((5, 5, 8)).astype(np.float32)
        out = M.constrained_scale(fmap, _unit_code(seed=5), 5e-3, head)
        assert np.array_equal(out, fmap)

    def test_saturated_closed_form(self):
        head = self._head()
        nn.init.zeros_(head.net[-1].weight)
        nn.init.constant_(head.net[-1].bias, 50.0)  # tanh saturates to +1
        fmap = np.ones((4, 4, 8), dtype=np.float32)
        out = M.constrained_scale(fmap, _unit_code(seed=6), 5e-3, head)
        assert out == pytest.approx(np.full_like(fmap, 1.005), abs=1e-7)

    def test_modulation_bound(self, rng):
        for alpha in (5e-4, 1e-3, 5e-3, 1e-2):
            head = self._head(seed=int(rng.integers(1 << 30)))
            fmap = np.full((4, 4, 8), 2.0, dtype=np.float32)
            code = _unit_code(seed=int(rng.integers(1 << 30)))
            out = M.constrained_scale(fmap, code, alpha, head)
            ratio = out.astype(np.float64) / fmap.astype(np.float64)
            assert np.abs(ratio - 1.0).max() <= alpha

    def test_channel_mismatch(self):
        head = self._head(channels=4)
        fmap = np.zeros((4, 4, 8), dtype=np.float32)
        with pytest.raises(ValueError):
            M.constrained_scale(fmap, _unit_code(), 5e-3, head)


class TestDecode:
    def test_output_contract(self, untrained_model):
        feats, code = M.encode(untrained_model, _random_image(64, seed=7))
        out = M.decode(untrained_model, feats, code)
        assert out.shape == (64, 64, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_alpha_zero_ignores_code(self, untrained_model):
        feats, _ = M.encode(untrained_model, _random_image(64, seed=8))
        outs = [
            M.decode(untrained_model, feats, _unit_code(seed=s), alpha_override=0.0)
            for s in range(5)
        ]
        for other in outs[1:]:
            assert np.array_equal(outs[0], other)

    def test_shape_mismatch_rejected(self, untrained_model):
        feats, code = M.encode(untrained_model, _random_image(64, seed=9))
        broken = M.IntrinsicFeatures(levels=[lvl[:-1] for lvl in feats.levels])
        with pytest.raises(ValueError):
            M.decode(untrained_model, broken, code)
        with pytest.raises(ValueError):
            M.decode(untrained_model, M.IntrinsicFeatures(levels=feats.levels[:-1]), code)


class TestRelight:
    def test_self_reference_equals_reconstruction(self, untrained_model):
        img = _random_image(64, seed=10)
        feats, code = M.encode(untrained_model, img)
        recon = M.decode(untrained_model, feats, code)
        assert np.array_equal(M.relight(untrained_model, img, img), recon)

    def test_output_in_range(self, untrained_model):
        out = M.relight(untrained_model, _random_image(64, seed=11), _random_image(64, seed=12))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_size_mismatch(self, untrained_model):
        with pytest.raises(ValueError):
            M.relight(untrained_model, _random_image(64), _random_image(32))


class TestEstimateAlbedo:
    def test_matches_alpha_zero_decode(self, untrained_model):
        img = _random_image(64, seed=13)
        feats, code = M.encode(untrained_model, img)
        direct = M.decode(untrained_model, feats, code, alpha_override=0.0)
        assert np.array_equal(M.estimate_albedo(untrained_model, img), direct)


class TestInterpolateExtrinsics:
    def test_endpoints_exact(self):
        a, b = _unit_code(seed=1), _unit_code(seed=2)
        assert np.array_equal(M.interpolate_extrinsics(a, b, 0.0).code, a)
        assert np.array_equal(M.interpolate_extrinsics(a, b, 1.0).code, b)

    def test_orthogonal_midpoint(self):
        a = np.zeros(16, dtype=np.float64)
        b = np.zeros(16, dtype=np.float64)
        a[0] = 1.0
        b[1] = 1.0
        blend = 0.5 * a + 0.5 * b
        assert np.linalg.norm(blend) == pytest.approx(np.sqrt(0.5), abs=1e-12)
        mid = M.interpolate_extrinsics(a, b, 0.5)
        assert float(mid.code @ a) == pytest.approx(np.sqrt(2) / 2, abs=1e-6)
        assert float(mid.code @ b) == pytest.approx(np.sqrt(2) / 2, abs=1e-6)
        assert np.linalg.norm(mid.code) == pytest.approx(1.0, abs=1e-9)

    def test_antipodal_midpoint_rejected(self):
        a = _unit_code(seed=3)
        with pytest.raises(M.DegenerateInterpolationError):
            M.interpolate_extrinsics(a, -a, 0.5)

    def test_t_out_of_range(self):
        a, b = _unit_code(seed=4), _unit_code(seed=5)
        with pytest.raises(ValueError):
            M.interpolate_extrinsics(a, b, 1.5)

    def test_unit_output_between_random_codes(self, rng):
        for _ in range(20):
            a = _unit_code(seed=int(rng.integers(1 << 30)))
            b = _unit_code(seed=int(rng.integers(1 << 30)))
            t = float(rng.uniform(0, 1))
            out = M.interpolate_extrinsics(a, b, t)
            assert np.linalg.norm(out.code) == pytest.approx(1.0, abs=1e-6)
