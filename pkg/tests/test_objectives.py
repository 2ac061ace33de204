import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimkit import tensor as T
from mimkit.errors import EmptyMask, ShapeMismatch
from mimkit.objectives import (
    LossKind,
    NormKind,
    kd_objective,
    mim_objective,
    normalize_targets,
    pairwise_loss,
)
from mimkit.patches import MaskSet
from mimkit.teachers import TargetFeatures
from mimkit.tensor import Tensor


def features(seed=0, n=4, d=6):
    return TargetFeatures(np.random.default_rng(seed).standard_normal((n, d)), "pixel")


class TestNormalizeTargets:
    def test_identity(self):
        t = features()
        assert normalize_targets(t, NormKind("identity")).t is t.t

    def test_l2_rows_unit_norm(self):
        out = normalize_targets(features(1), NormKind("l2"))
        np.testing.assert_allclose(np.linalg.norm(out.t, axis=1), np.ones(4), atol=1e-6)

    def test_ln_hand_value(self):
        t = TargetFeatures(np.array([[1.0, 2.0, 3.0]]), "pixel")
        out = normalize_targets(t, NormKind("ln"))
        np.testing.assert_allclose(out.t[0], [-1.22474, 0.0, 1.22474], atol=1e-5)

    def test_bn_standardizes_columns(self):
        out = normalize_targets(features(2, n=64), NormKind("bn"))
        np.testing.assert_allclose(out.t.mean(axis=0), np.zeros(6), atol=1e-6)
        np.testing.assert_allclose(out.t.var(axis=0), np.ones(6), atol=1e-3)

    @pytest.mark.parametrize("variant", ["ln", "l2"])
    def test_idempotent(self, variant):
        kind = NormKind(variant)
        once = normalize_targets(features(3), kind)
        twice = normalize_targets(once, kind)
        assert np.linalg.norm(twice.t - once.t) < 1e-5


class TestPairwiseLoss:
    @pytest.mark.parametrize("variant", ["mse", "l1", "smooth_l1", "cosine"])
    def test_zero_at_match(self, variant):
        v = np.array([1.0, -2.0, 0.5])
        assert pairwise_loss(v, v, LossKind(variant)).item() < 1e-6

    def test_smooth_l1_piecewise(self):
        kind = LossKind("smooth_l1", beta=1.0)
        assert pairwise_loss(np.array([0.5]), np.array([0.0]), kind).item() == pytest.approx(0.125)
        assert pairwise_loss(np.array([2.0]), np.array([0.0]), kind).item() == pytest.approx(1.5)

    def test_cosine_orthogonal_and_opposite(self):
        kind = LossKind("cosine")
        a = np.array([1.0, 0.0])
        assert pairwise_loss(a, np.array([0.0, 1.0]), kind).item() == pytest.approx(1.0, abs=1e-6)
        assert pairwise_loss(a, -a, kind).item() == pytest.approx(2.0, abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            pairwise_loss(np.ones(3), np.ones(4), LossKind("mse"))


class TestMimObjective:
    def test_zero_when_predictions_match_normalized_targets(self):
        targets = features(4, n=4, d=6)
        norm = NormKind("ln")
        normalized = np.asarray(
            np.vstack([np.zeros((1, 6)), normalize_targets(targets, norm).t]),
            dtype=np.float64)
        out = Tensor(normalized)
        mask = MaskSet.from_indices([0, 2], 4)
        val = mim_objective(out, targets, mask, norm, LossKind("smooth_l1")).item()
        assert val < 1e-12

    def test_hand_value_and_independence_from_unmasked(self):
        targets = TargetFeatures(np.zeros((2, 2)), "pixel")
        mask = MaskSet.from_indices([0], 2)
        o = np.array([[9.0, 9.0], [0.5, 0.5], [7.0, -3.0]])
        val = mim_objective(Tensor(o), targets, mask, NormKind("identity"),
                            LossKind("smooth_l1", beta=1.0)).item()
        assert val == pytest.approx(0.125)

        o2 = o.copy()
        o2[0] = [123.0, -55.0]   # cls row
        o2[2] = [1e6, 1e6]       # unmasked row
        val2 = mim_objective(Tensor(o2), targets, mask, NormKind("identity"),
                             LossKind("smooth_l1", beta=1.0)).item()
        assert val2 == val

    def test_gradient_zero_outside_mask(self):
        targets = features(5, n=4, d=6)
        mask = MaskSet.from_indices([1, 3], 4)
        o = Tensor(np.random.default_rng(6).standard_normal((5, 6)), requires_grad=True)
        tape = T.Tape()
        with tape:
            loss = mim_objective(o, targets, mask, NormKind("ln"), LossKind("mse"))
        g = T.backward(tape, loss)[o]
        assert np.all(g[0] == 0.0)          # cls row
        assert np.all(g[1 + 0] == 0.0)      # unmasked patch 0
        assert np.all(g[1 + 2] == 0.0)      # unmasked patch 2
        assert np.any(g[1 + 1] != 0.0)
        assert np.any(g[1 + 3] != 0.0)

    def test_empty_mask_rejected(self):
        targets = features(7)
        with pytest.raises(EmptyMask):
            mim_objective(Tensor(np.zeros((5, 6))), targets, MaskSet((), 4, 0.0),
                          NormKind("ln"), LossKind("mse"))

    def test_row_count_checked(self):
        targets = features(8)
        with pytest.raises(ShapeMismatch):
            mim_objective(Tensor(np.zeros((4, 6))), targets,
                          MaskSet.from_indices([0], 4), NormKind("ln"), LossKind("mse"))


class TestKdObjective:
    def test_equals_mim_with_full_mask(self):
        targets = features(9, n=4, d=6)
        o = Tensor(np.random.default_rng(10).standard_normal((5, 6)))
        full = MaskSet.from_indices(range(4), 4)
        for variant in ("mse", "l1", "smooth_l1", "cosine"):
            kind = LossKind(variant)
            a = mim_objective(o, targets, full, NormKind("ln"), kind).item()
            b = kd_objective(o, targets, NormKind("ln"), kind).item()
            assert a == b

    def test_perfect_mimicry(self):
        targets = features(11, n=3, d=4)
        normalized = normalize_targets(targets, NormKind("l2")).t
        o = Tensor(np.vstack([np.zeros((1, 4)), normalized]))
        assert kd_objective(o, targets, NormKind("l2"), LossKind("mse")).item() < 1e-12

    def test_hand_mean(self):
        targets = TargetFeatures(np.zeros((2, 1)), "pixel")
        o = Tensor(np.array([[0.0], [1.0], [3.0]]))
        val = kd_objective(o, targets, NormKind("identity"), LossKind("mse")).item()
        assert val == pytest.approx((1.0 + 9.0) / 2.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000),
       variant=st.sampled_from(["mse", "l1", "smooth_l1", "cosine"]))
def test_loss_nonnegative(seed, variant):
    rng = np.random.default_rng(seed)
    o = rng.standard_normal(5)
    t = rng.standard_normal(5)
    assert pairwise_loss(o, t, LossKind(variant)).item() >= 0.0
