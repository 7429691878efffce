import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deformreg.losses import (
    LossWeights,
    SampledFeatureSet,
    info_nce,
    registration_loss,
    sample_locations,
    total_loss,
)


def brute_force_info_nce(vectors_a, vectors_b, tau):
    """Direct double-loop evaluation of the contrastive ratio per anchor."""
    a = np.asarray(vectors_a, dtype=np.float64)
    b = np.asarray(vectors_b, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-8)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-8)
    n = a.shape[0]
    total = 0.0
    for j in range(n):
        pos = np.exp(a[j] @ b[j] / tau)
        denom = pos
        for l in range(n):
            if l == j:
                continue
            denom += np.exp(a[j] @ a[l] / tau)
            denom += np.exp(a[j] @ b[l] / tau)
        total += -np.log(pos / denom)
    return total


def make_samples(vectors_a, vectors_b):
    n = np.asarray(vectors_a).shape[0]
    return SampledFeatureSet(
        torch.as_tensor(vectors_a, dtype=torch.float64),
        torch.as_tensor(vectors_b, dtype=torch.float64),
        np.zeros((n, 3), dtype=np.int64),
    )


class TestRegistrationLoss:
    def test_equal_fields_zero(self, rng):
        u = torch.tensor(rng.standard_normal((3, 5, 5, 5)))
        assert float(registration_loss(u, u.clone())) == 0.0

    def test_uniform_unit_difference(self):
        pred = torch.zeros(3, 4, 4, 4)
        target = torch.zeros(3, 4, 4, 4)
        pred[0] += 1.0
        assert float(registration_loss(pred, target)) == pytest.approx(1.0 / 3.0)

    def test_constant_target_closed_form(self):
        pred = torch.zeros(3, 4, 4, 4)
        target = torch.zeros(3, 4, 4, 4)
        target[0], target[1], target[2] = 1.0, 2.0, 2.0
        assert float(registration_loss(pred, target)) == pytest.approx(3.0)

    def test_symmetry_and_nonnegativity(self, rng):
        a = torch.tensor(rng.standard_normal((3, 4, 4, 4)))
        b = torch.tensor(rng.standard_normal((3, 4, 4, 4)))
        assert float(registration_loss(a, b)) == pytest.approx(float(registration_loss(b, a)))
        assert float(registration_loss(a, b)) > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            registration_loss(torch.zeros(3, 4, 4, 4), torch.zeros(3, 5, 4, 4))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        a = torch.tensor(rng.standard_normal((3, 3, 3, 3)))
        b = a + torch.tensor(rng.standard_normal((3, 3, 3, 3))) * rng.integers(0, 2)
        loss = float(registration_loss(a, b))
        if torch.equal(a, b):
            assert loss == 0.0
        else:
            assert loss > 0.0


class TestInfoNCE:
    def test_single_sample_is_zero(self, rng):
        s = make_samples(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)))
        assert float(info_nce(s, tau=0.1)) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_all_identical_closed_form(self, n, rng):
        v = rng.standard_normal((1, 6))
        stack = np.repeat(v, n, axis=0)
        s = make_samples(stack, stack.copy())
        expected = n * np.log(2 * n - 1)
        assert float(info_nce(s, tau=0.1)) == pytest.approx(expected, rel=1e-9)

    def test_orthonormal_case_matches_oracle(self):
        # matching positives, orthogonal negatives, computed by the oracle
        a = np.eye(2, 4)
        b = np.eye(2, 4)
        s = make_samples(a, b)
        expected = brute_force_info_nce(a, b, 0.1)
        assert float(info_nce(s, tau=0.1)) == pytest.approx(expected, rel=1e-10)
        assert expected == pytest.approx(2 * np.log1p(2 * np.exp(-10.0)), rel=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 5), c=st.integers(2, 6), seed=st.integers(0, 2**16))
    def test_matches_brute_force(self, n, c, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n, c))
        b = rng.standard_normal((n, c))
        got = float(info_nce(make_samples(a, b), tau=0.1))
        expected = brute_force_info_nce(a, b, 0.1)
        assert got == pytest.approx(expected, abs=1e-10, rel=1e-10)

    def test_nonnegative_and_zero_norm_safe(self, rng):
        a = np.zeros((3, 4))  # zero vectors exercise the epsilon floor
        b = rng.standard_normal((3, 4))
        value = float(info_nce(make_samples(a, b), tau=0.1))
        assert np.isfinite(value)
        assert value >= 0.0

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(2, 5), seed=st.integers(0, 2**16))
    def test_permutation_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n, 4))
        b = rng.standard_normal((n, 4))
        perm = rng.permutation(n)
        before = float(info_nce(make_samples(a, b), tau=0.1))
        after = float(info_nce(make_samples(a[perm], b[perm]), tau=0.1))
        assert before == pytest.approx(after, rel=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        n, c, tau = 4, 3, 0.1
        a = torch.tensor(rng.standard_normal((n, c)), requires_grad=True)
        b = torch.tensor(rng.standard_normal((n, c)), requires_grad=True)
        locs = np.zeros((n, 3), dtype=np.int64)
        loss = info_nce(SampledFeatureSet(a, b, locs), tau=tau)
        ga, gb = torch.autograd.grad(loss, [a, b])
        h = 1e-6
        for tensor, grad in ((a, ga), (b, gb)):
            flat = tensor.detach().view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                hi = brute_force_info_nce(a.detach(), b.detach(), tau)
                flat[i] = orig - h
                lo = brute_force_info_nce(a.detach(), b.detach(), tau)
                flat[i] = orig
                fd = (hi - lo) / (2 * h)
                ref = float(grad.view(-1)[i])
                assert abs(fd - ref) <= 1e-3 * max(abs(fd), abs(ref), 1e-4)

    def test_invalid_tau(self, rng):
        s = make_samples(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))
        with pytest.raises(ValueError):
            info_nce(s, tau=0.0)


class TestSampleLocations:
    def test_exact_mask_returned_in_order(self):
        mask = np.zeros((4, 4, 4), dtype=bool)
        mask[1, 2, 3] = mask[0, 0, 0] = mask[3, 1, 2] = True
        locs = sample_locations(mask, 3, seed=0)
        np.testing.assert_array_equal(locs, np.argwhere(mask))

    def test_full_mask_thousand_distinct(self):
        mask = np.ones((16, 16, 16), dtype=bool)
        locs = sample_locations(mask, 1000, seed=7)
        assert locs.shape == (1000, 3)
        assert len({tuple(row) for row in locs}) == 1000
        assert locs.min() >= 0 and locs.max() <= 15

    def test_empty_mask_warns_and_returns_empty(self, caplog):
        with caplog.at_level(logging.WARNING):
            locs = sample_locations(np.zeros((3, 3, 3), dtype=bool), 5, seed=0)
        assert locs.shape == (0, 3)
        assert "empty" in caplog.text

    def test_short_mask_reports_actual_count(self, caplog):
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[0, 0, 0] = mask[1, 1, 1] = True
        with caplog.at_level(logging.WARNING):
            locs = sample_locations(mask, 10, seed=0)
        assert locs.shape == (2, 3)
        assert "only 2 valid" in caplog.text

    def test_deterministic_given_seed(self):
        mask = np.ones((8, 8, 8), dtype=bool)
        a = sample_locations(mask, 20, seed=5)
        b = sample_locations(mask, 20, seed=5)
        c = sample_locations(mask, 20, seed=6)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_accepts_torch_mask(self):
        mask = torch.ones(4, 4, 4, dtype=torch.bool)
        locs = sample_locations(mask, 4, seed=1)
        assert locs.shape == (4, 3)


class TestTotalLoss:
    def test_alpha_zero_is_registration_only(self):
        w = LossWeights(alpha=0.0)
        assert float(total_loss(torch.tensor(2.5), torch.tensor(9.0), torch.tensor(1.0), w)) == 2.5

    def test_combination(self):
        w = LossWeights(alpha=1.0)
        out = total_loss(torch.tensor(0.0), torch.tensor(0.5), torch.tensor(0.5), w)
        assert float(out) == pytest.approx(1.0)

    def test_both_branches_weighted(self):
        w = LossWeights(alpha=0.5)
        out = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(4.0), w)
        assert float(out) == pytest.approx(1.0 + 0.5 * 6.0)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
