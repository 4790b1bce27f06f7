import math

import numpy as np
import pytest
import torch

from latent_relight import losses as L


def _unit_rows(n, d, seed=0):
    rows = np.random.default_rng(seed).standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestCodingRate:
    def test_scalar_closed_form(self):
        assert L.coding_rate(np.array([[1.0]]), 1.0) == pytest.approx(math.log(2), abs=1e-9)

    def test_zero_matrix(self):
        assert L.coding_rate(np.zeros((4, 3)), 0.5) == 0.0

    def test_two_by_two_family(self):
        collinear = np.array([[1.0, 0.0], [1.0, 0.0]])
        orthogonal = np.array([[1.0, 0.0], [0.0, 1.0]])
        r_col = L.coding_rate(collinear, 1.0)
        r_orth = L.coding_rate(orthogonal, 1.0)
        assert r_col == pytest.approx(math.log(3), abs=1e-9)
        assert r_orth == pytest.approx(math.log(4), abs=1e-9)
        assert r_orth > r_col

    def test_rejects_nonfinite(self):
        bad = np.array([[1.0, np.nan]])
        with pytest.raises(ValueError):
            L.coding_rate(bad, 0.5)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            L.coding_rate(np.eye(2), 0.0)

    def test_gradient_matches_finite_differences(self):
        S = _unit_rows(16, 8, seed=3)
        St = torch.tensor(S, requires_grad=True)
        L.coding_rate(St, 0.5).backward()
        analytic = St.grad.numpy()
        h = 1e-5
        numeric = np.zeros_like(S)
        for i in range(S.shape[0]):
            for j in range(S.shape[1]):
                plus, minus = S.copy(), S.copy()
                plus[i, j] += h
                minus[i, j] -= h
                numeric[i, j] = (L.coding_rate(plus, 0.5) - L.coding_rate(minus, 0.5)) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4


class TestSsim:
    def test_self_similarity(self):
        x = np.random.default_rng(0).random((16, 16, 3))
        assert L.ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_constant_closed_form(self):
        zeros = np.zeros((16, 16, 3))
        ones = np.ones((16, 16, 3))
        expected = L.SSIM_C1 / (1 + L.SSIM_C1)
        assert L.ssim(zeros, ones) == pytest.approx(expected, abs=1e-6)

    def test_symmetry(self):
        a = np.random.default_rng(1).random((12, 12, 3))
        b = np.random.default_rng(2).random((12, 12, 3))
        assert L.ssim(a, b) == pytest.approx(L.ssim(b, a), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.ssim(np.zeros((8, 8, 3)), np.zeros((9, 9, 3)))

    def test_range(self):
        a = np.random.default_rng(3).random((16, 16, 3))
        b = 1.0 - a
        assert -1.0 <= L.ssim(a, b) <= 1.0


class TestPixelLoss:
    def test_zero_at_equality(self):
        x = np.random.default_rng(4).random((16, 16, 3))
        assert L.pixel_loss(x, x, L.LossWeights()) == pytest.approx(0.0, abs=1e-9)

    def test_constant_closed_form(self):
        zeros = np.zeros((16, 16, 3))
        ones = np.ones((16, 16, 3))
        expected = 10.0 + 0.1 * (1 - L.SSIM_C1 / (1 + L.SSIM_C1))
        assert L.pixel_loss(zeros, ones, L.LossWeights()) == pytest.approx(expected, abs=1e-4)

    def test_linearity_in_weights(self):
        a = np.random.default_rng(5).random((12, 12, 3))
        b = np.random.default_rng(6).random((12, 12, 3))
        w1 = L.LossWeights()
        w2 = L.LossWeights(w_l2=20.0, w_ssim=0.2, w_grad=2.0)
        assert L.pixel_loss(a, b, w2) == pytest.approx(2 * L.pixel_loss(a, b, w1), abs=1e-9)

    def test_nonnegative(self):
        a = np.random.default_rng(7).random((12, 12, 3))
        b = np.random.default_rng(8).random((12, 12, 3))
        assert L.pixel_loss(a, b, L.LossWeights()) >= 0.0


class TestImageGradients:
    def test_forward_differences_with_zero_trailing_edge(self):
        img = torch.arange(12, dtype=torch.float64).reshape(1, 1, 3, 4)
        dx, dy = L.image_gradients(img)
        assert torch.equal(dx[..., :, -1], torch.zeros(1, 1, 3, dtype=torch.float64))
        assert torch.equal(dy[..., -1, :], torch.zeros(1, 1, 4, dtype=torch.float64))
        assert torch.equal(dx[..., :, :-1], torch.ones(1, 1, 3, 3, dtype=torch.float64))
        assert torch.equal(dy[..., :-1, :], torch.full((1, 1, 2, 4), 4.0, dtype=torch.float64))


class TestUniformity:
    def test_zero_at_cached_sample(self):
        target = L.UniformityTarget(seed=1, lam=0.5)
        sample = target.sample(64, 16)
        assert L.uniformity_reg(sample, target) == pytest.approx(0.0, abs=1e-9)

    def test_collapsed_rows_worse_than_fresh_sample(self):
        target = L.UniformityTarget(seed=2, lam=0.5)
        collapsed = np.tile(_unit_rows(1, 16, seed=5), (64, 1))
        fresh = _unit_rows(64, 16, seed=9)
        assert L.uniformity_reg(collapsed, target) > L.uniformity_reg(fresh, target)
        assert L.uniformity_reg(collapsed, target) > 0.0

    def test_row_permutation_invariance(self):
        target = L.UniformityTarget(seed=3, lam=0.5)
        S = _unit_rows(32, 8, seed=11)
        perm = np.random.default_rng(0).permutation(32)
        assert L.uniformity_reg(S, target) == pytest.approx(
            L.uniformity_reg(S[perm], target), abs=1e-9
        )

    def test_cache_is_request_order_independent(self):
        t1 = L.UniformityTarget(seed=4, lam=0.5)
        t2 = L.UniformityTarget(seed=4, lam=0.5)
        r1 = (t1.rate(16, 4), t1.rate(8, 2))
        r2 = (t2.rate(8, 2), t2.rate(16, 4))
        assert r1 == (r2[1], r2[0])

    def test_lambda_mismatch_rejected(self):
        target = L.UniformityTarget(seed=5, lam=0.5)
        with pytest.raises(ValueError):
            L.uniformity_reg(_unit_rows(4, 4), target, lam=1.0)

    def test_degenerate_shape(self):
        target = L.UniformityTarget(seed=6, lam=0.5)
        with pytest.raises(ValueError):
            target.rate(0, 4)


class TestIntrinsicLoss:
    def _levels(self, seed, shape=(6, 6, 8)):
        arr = np.random.default_rng(seed).standard_normal(shape)
        arr /= np.linalg.norm(arr, axis=-1, keepdims=True)
        return [arr.astype(np.float32)]

    def test_identical_leaves_only_regularizer(self):
        target = L.UniformityTarget(seed=7, lam=0.5)
        weights = L.LossWeights()
        a = self._levels(0)
        loss = L.intrinsic_loss(a, [lvl.copy() for lvl in a], target, weights)
        rows = a[0].reshape(-1, a[0].shape[-1])
        expected = weights.w_intrinsic_reg * L.uniformity_reg(
            rows.astype(np.float64), target
        )
        assert loss == pytest.approx(expected, rel=1e-5)

    def test_antipodal_distance(self):
        target = L.UniformityTarget(seed=8, lam=0.5)
        weights = L.LossWeights(w_intrinsic_reg=0.0)
        a = self._levels(1)
        b = [-lvl for lvl in a]
        loss = L.intrinsic_loss(a, b, target, weights)
        assert loss == pytest.approx(2.0, abs=1e-6)

    def test_symmetric_up_to_regularizer(self):
        target = L.UniformityTarget(seed=9, lam=0.5)
        no_reg = L.LossWeights(w_intrinsic_reg=0.0)
        a, b = self._levels(2), self._levels(3)
        assert L.intrinsic_loss(a, b, target, no_reg) == pytest.approx(
            L.intrinsic_loss(b, a, target, no_reg), abs=1e-9
        )

    def test_level_count_mismatch(self):
        target = L.UniformityTarget(seed=10, lam=0.5)
        with pytest.raises(ValueError):
            L.intrinsic_loss(self._levels(4), self._levels(4) * 2, target, L.LossWeights())


class TestTotalLoss:
    def _batch(self, seed=0, perfect=False):
        rng = np.random.default_rng(seed)
        target = rng.random((2, 3, 16, 16)).astype(np.float32)
        levels = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
        levels /= np.linalg.norm(levels, axis=1, keepdims=True)
        codes = rng.standard_normal((2, 16)).astype(np.float32)
        codes /= np.linalg.norm(codes, axis=1, keepdims=True)
        relit = target.copy() if perfect else rng.random((2, 3, 16, 16)).astype(np.float32)
        recon = target.copy() if perfect else rng.random((2, 3, 16, 16)).astype(np.float32)
        return {
            "relit": torch.from_numpy(relit),
            "recon": torch.from_numpy(recon),
            "target": torch.from_numpy(target),
            "intrinsics_a": [torch.from_numpy(levels)],
            "intrinsics_b": [torch.from_numpy(levels.copy())],
            "codes": torch.from_numpy(codes),
        }

    def test_perfect_predictions_leave_regularizers(self):
        target = L.UniformityTarget(seed=11, lam=0.5)
        weights = L.LossWeights()
        total, breakdown = L.total_loss(self._batch(perfect=True), weights, target)
        assert breakdown["pixel_relight"] == pytest.approx(0.0, abs=1e-6)
        assert breakdown["pixel_recon"] == pytest.approx(0.0, abs=1e-6)
        assert float(total) == pytest.approx(
            breakdown["intrinsic"] + breakdown["extrinsic"], abs=1e-6
        )

    def test_extrinsic_weight_scales_only_extrinsic_term(self):
        target = L.UniformityTarget(seed=12, lam=0.5)
        w1 = L.LossWeights()
        w2 = L.LossWeights(w_extrinsic=2e-4)
        _, b1 = L.total_loss(self._batch(seed=1), w1, target)
        _, b2 = L.total_loss(self._batch(seed=1), w2, target)
        assert b2["extrinsic"] == pytest.approx(2 * b1["extrinsic"], rel=1e-6)
        for key in ("pixel_relight", "pixel_recon", "intrinsic"):
            assert b2[key] == b1[key]

    def test_breakdown_sums_to_total(self):
        target = L.UniformityTarget(seed=13, lam=0.5)
        _, breakdown = L.total_loss(self._batch(seed=2), L.LossWeights(), target)
        parts = (
            breakdown["pixel_relight"]
            + breakdown["pixel_recon"]
            + breakdown["intrinsic"]
            + breakdown["extrinsic"]
        )
        assert breakdown["total"] == pytest.approx(parts, abs=1e-9)

    def test_missing_component(self):
        target = L.UniformityTarget(seed=14, lam=0.5)
        batch = self._batch()
        del batch["codes"]
        with pytest.raises(ValueError, match="codes"):
            L.total_loss(batch, L.LossWeights(), target)

    def test_reproducible_bitwise(self):
        target = L.UniformityTarget(seed=15, lam=0.5)
        _, b1 = L.total_loss(self._batch(seed=3), L.LossWeights(), target)
        _, b2 = L.total_loss(self._batch(seed=3), L.LossWeights(), target)
        assert b1 == b2


class TestLossWeights:
    def test_defaults_match_objective(self):
        w = L.LossWeights()
        assert (w.w_l2, w.w_ssim, w.w_grad) == (10.0, 0.1, 1.0)
        assert (w.w_intrinsic, w.w_intrinsic_reg, w.w_extrinsic) == (0.1, 1e-3, 1e-4)
        assert w.lambda_distortion == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            L.LossWeights(w_l2=-1.0).validate()
        with pytest.raises(ValueError):
            L.LossWeights(lambda_distortion=0.0).validate()
