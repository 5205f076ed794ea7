import math

import numpy as np
import pytest

from conftest import numerical_gradient, relative_error
from src.autodiff import ops
from src.autodiff.tensor import Tape, Tensor
from src.errors import LossError, ShapeError
from src.losses import (LossConfig, consistency_l1, downsample_target, focal_loss, segmentation_term, soft_dice,
                        supervised_loss, variance_weights, vwsl)


def t(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


def grid(pattern) -> Tensor:
    return t(np.asarray(pattern, dtype=np.float64).reshape(1, 1, *np.shape(pattern)))


# Big enough that sigmoid saturates to within float64 rounding of 0/1.
SURE = 40.0


class TestSoftDice:
    def test_perfect_overlap(self):
        target = grid([[1, 0], [1, 1]])
        assert soft_dice(target, target).item() == pytest.approx(1.0, abs=1e-6)

    def test_disjoint(self):
        assert soft_dice(grid([[1, 0], [0, 0]]), grid([[0, 0], [0, 1]])).item() == pytest.approx(0.0, abs=1e-5)

    def test_half_weighted_out_still_perfect(self):
        target = grid(np.tile([[1, 0, 1, 1]], (4, 1)))
        weights = grid(np.repeat([[1.0], [0.0]], 2, axis=0).repeat(4, axis=1))
        assert soft_dice(target, target, weights).item() == pytest.approx(1.0, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_dice(grid([[1, 0]]), grid([[1], [0]]))

    def test_gradient(self):
        pred = Tensor.parameter(np.random.default_rng(0).uniform(0.1, 0.9, size=(1, 1, 3, 3)))
        target = grid(np.eye(3))
        weights = grid(np.full((3, 3), 0.7))
        with Tape() as tape:
            loss = soft_dice(pred, target, weights)
        grad = tape.backward(loss, {"p": pred})["p"]
        numeric = numerical_gradient(lambda: soft_dice(pred, target, weights).item(), pred.data)
        assert relative_error(grad, numeric) <= 1e-6


class TestFocal:
    def test_reduces_to_cross_entropy(self):
        p = grid(np.full((2, 2), 0.5))
        assert focal_loss(p, grid(np.ones((2, 2))), alpha=1.0, gamma=0.0).item() == pytest.approx(math.log(2))

    def test_perfect_prediction(self):
        target = grid([[1, 0], [0, 1]])
        assert focal_loss(target, target).item() < 1e-10

    def test_hand_value(self):
        value = focal_loss(grid([[0.9]]), grid([[1.0]]), gamma=2.0).item()
        assert value == pytest.approx(0.01 * -math.log(0.9), rel=1e-9)
        assert value == pytest.approx(1.054e-3, rel=1e-3)

    def test_weighted_mean(self):
        p = grid([[0.9, 0.6]])
        target = grid([[1.0, 1.0]])
        per_pixel = [0.01 * -math.log(0.9), 0.16 * -math.log(0.6)]
        value = focal_loss(p, target, grid([[3.0, 1.0]])).item()
        assert value == pytest.approx((3 * per_pixel[0] + per_pixel[1]) / 4)

    def test_zero_weights_fall_back_to_mean(self):
        p = grid([[0.9, 0.6]])
        target = grid([[1.0, 1.0]])
        unweighted = focal_loss(p, target).item()
        assert focal_loss(p, target, grid([[0.0, 0.0]])).item() == pytest.approx(unweighted)

    def test_all_wrong_is_finite(self):
        value = focal_loss(grid([[0.0, 1.0]]), grid([[1.0, 0.0]])).item()
        assert math.isfinite(value) and value == pytest.approx(-math.log(1e-7), rel=1e-3)


class TestConsistency:
    def test_equal_is_zero(self):
        p = grid([[0.2, 0.7]])
        assert consistency_l1(p, p).item() == 0.0

    def test_opposite_is_one(self):
        assert consistency_l1(grid([[0.0, 0.0]]), grid([[1.0, 1.0]])).item() == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop(self, seed):
        gen = np.random.default_rng(seed)
        a, b = gen.random((1, 1, 3, 4)), gen.random((1, 1, 3, 4))
        expected = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(consistency_l1(t(a), t(b)).item() - expected) <= 1e-6


def test_variance_weights_clamp():
    std = np.array([0.0, 0.1, 0.5, 0.7])
    assert np.allclose(variance_weights(std), [1.0, 0.8, 0.0, 0.0])
    assert np.allclose(variance_weights(std, clamp=False), [1.0, 0.8, 0.0, -0.4])


@pytest.mark.parametrize("seed", range(20))
def test_soft_dice_symmetric_and_bounded(seed):
    gen = np.random.default_rng(seed)
    shape = (2, 1, *gen.integers(1, 7, size=2))
    p, q, w = gen.random(shape), gen.random(shape), gen.random(shape) * 2
    for weights in (None, t(w)):
        forward = soft_dice(t(p), t(q), weights).item()
        assert forward == pytest.approx(soft_dice(t(q), t(p), weights).item(), rel=1e-12)
        assert 0.0 <= forward <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_variance_weights_never_grow_with_std(seed):
    gen = np.random.default_rng(seed)
    std = gen.uniform(0.0, 0.7, size=50)
    bumped = std + gen.uniform(0.0, 0.2, size=50)
    for clamp in (True, False):
        assert np.all(variance_weights(bumped, clamp) <= variance_weights(std, clamp))
    assert np.all(np.diff(variance_weights(np.sort(std))) <= 0)


@pytest.mark.parametrize("n_runs", [2, 3, 10])
def test_clamp_is_a_no_op_for_probabilities(n_runs):
    gen = np.random.default_rng(n_runs)
    runs = gen.random((n_runs, 1, 1, 8, 8))
    # Push a few pixels to the worst case: half the runs at 0, half at 1.
    runs[:, 0, 0, 0, :] = np.arange(n_runs)[:, None] % 2
    std = runs.std(axis=0)
    assert std.max() <= 0.5
    assert np.array_equal(variance_weights(std), variance_weights(std, clamp=False))


def test_downsample_target_rebinarizes():
    target = grid(np.kron([[1, 0], [0, 0]], np.ones((2, 2))))
    small = downsample_target(target, 2, 2)
    assert np.array_equal(small.data[0, 0], [[1, 0], [0, 0]])
    assert set(np.unique(downsample_target(grid(np.eye(4)), 2, 2).data)) <= {0.0, 1.0}


class TestSupervised:
    def _targets(self):
        full = grid(np.kron([[1, 0], [1, 1]], np.ones((2, 2))))
        return {"level1": downsample_target(full, 2, 2), "level2": full}

    def test_perfect_is_near_zero(self):
        targets = self._targets()
        outputs = {k: ops.scalar_mul(v, 2 * SURE) - SURE for k, v in targets.items()}
        assert supervised_loss(outputs, targets).item() < 1e-6

    def test_all_wrong_is_finite(self):
        targets = self._targets()
        outputs = {k: ops.scalar_mul(v, -2 * SURE) + SURE for k, v in targets.items()}
        value = supervised_loss(outputs, targets).item()
        assert math.isfinite(value)
        assert value <= 2 * (1 + -math.log(1e-7)) + 1e-6

    def test_is_sum_of_components(self):
        gen = np.random.default_rng(1)
        targets = self._targets()
        outputs = {k: t(gen.normal(size=v.shape)) for k, v in targets.items()}
        cfg = LossConfig()
        expected = 0.0
        for level in ("level1", "level2"):
            p = ops.sigmoid(outputs[level])
            expected += 1 - soft_dice(p, targets[level]).item() + focal_loss(p, targets[level]).item()
        assert supervised_loss(outputs, targets, cfg).item() == pytest.approx(expected, rel=1e-12)


class TestVwsl:
    def _setup(self, seed=0):
        gen = np.random.default_rng(seed)
        target = t((gen.random((1, 1, 8, 8)) > 0.5).astype(np.float64))
        o1 = {"level1": t(gen.normal(size=(1, 1, 4, 4))), "level2": t(gen.normal(size=(1, 1, 8, 8)))}
        o2 = {k: t(v.data + gen.normal(scale=0.3, size=v.shape)) for k, v in o1.items()}
        return target, o1, o2

    def test_zero_std_and_equal_passes_reduce_to_supervised(self):
        target, o1, _ = self._setup()
        ones = t(np.ones((1, 1, 8, 8)))
        outputs = {k: (v, v) for k, v in o1.items()}
        targets = {"level1": downsample_target(target, 4, 4), "level2": target}
        assert vwsl(outputs, target, ones).item() == pytest.approx(supervised_loss(o1, targets).item(), rel=1e-12)

    def test_gamma_zero_drops_consistency(self):
        target, o1, o2 = self._setup(1)
        weights = t(np.random.default_rng(2).uniform(0.2, 1.0, size=(1, 1, 8, 8)))
        outputs = {k: (o1[k], o2[k]) for k in o1}
        cfg = LossConfig(vwsl_gamma=0.0)
        expected = sum(
            segmentation_term(ops.sigmoid(o1[level]), tgt, w, cfg).item()
            for level, tgt, w in (
                ("level1", downsample_target(target, 4, 4), Tensor(ops.resample(weights, 4, 4).data)),
                ("level2", target, weights),
            )
        )
        assert vwsl(outputs, target, weights, cfg).item() == pytest.approx(expected, rel=1e-12)

    def test_gamma_scales_consistency(self):
        target, o1, o2 = self._setup(3)
        weights = t(np.ones((1, 1, 8, 8)))
        outputs = {k: (o1[k], o2[k]) for k in o1}
        base = vwsl(outputs, target, weights, LossConfig(vwsl_gamma=0.0)).item()
        l1 = sum(consistency_l1(ops.sigmoid(o1[k]), ops.sigmoid(o2[k])).item() for k in o1)
        assert vwsl(outputs, target, weights, LossConfig(vwsl_gamma=1e3)).item() == pytest.approx(base + 1e3 * l1)

    def test_missing_weights_refused(self):
        target, o1, o2 = self._setup()
        with pytest.raises(LossError):
            vwsl({k: (o1[k], o2[k]) for k in o1}, target, None)

    def test_gradient_reaches_both_passes(self):
        target, o1, o2 = self._setup(4)
        weights = t(np.full((1, 1, 8, 8), 0.9))
        first = {k: Tensor.parameter(v.data) for k, v in o1.items()}
        second = {k: Tensor.parameter(v.data) for k, v in o2.items()}
        params = {f"a.{k}": v for k, v in first.items()} | {f"b.{k}": v for k, v in second.items()}

        def loss():
            return vwsl({k: (first[k], second[k]) for k in first}, target, weights, LossConfig(vwsl_gamma=10.0))

        with Tape() as tape:
            value = loss()
        grads = tape.backward(value, params)
        for name, tensor in params.items():
            assert relative_error(grads[name], numerical_gradient(lambda: loss().item(), tensor.data)) <= 1e-6
