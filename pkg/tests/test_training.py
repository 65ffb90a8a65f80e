import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradformer import tensor as T
from gradformer.checks import check_loss
from gradformer.data_io import BitemporalDataset, make_dataset
from gradformer.errors import ConfigError, ContractError, DimensionError
from gradformer.layers import Parameter
from gradformer.model import build, tiny_config
from gradformer.training import (AdamW, TrainConfig, cross_entropy_loss, evaluate, flip_pair,
                                 focal_loss, lr_at, miou_loss, train)
from oracles import cross_entropy_scalar


class TestLosses:
    def test_cross_entropy_matches_scalar_oracle(self, rng, f64):
        logits = rng.standard_normal((2, 2, 5, 3)) * 3
        target = rng.integers(0, 2, (2, 5, 3))
        got = cross_entropy_loss(T.Tensor(logits), target).item()
        assert got == pytest.approx(cross_entropy_scalar(logits, target), abs=1e-12)

    def test_cross_entropy_of_uniform_logits_is_log_two(self):
        loss = cross_entropy_loss(T.Tensor(np.zeros((1, 2, 2, 2))), np.array([[[0, 1], [1, 0]]]))
        assert loss.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_focal_loss_single_pixel(self, f64):
        # z1 - z0 = log 3 gives p(change) = 0.75
        logits = T.Tensor(np.array([0.0, math.log(3.0)]).reshape(1, 2, 1, 1))
        got = focal_loss(logits, np.ones((1, 1, 1), int)).item()
        assert got == pytest.approx(-0.25 * 0.25 ** 2 * math.log(0.75), rel=1e-12)
        got = focal_loss(logits, np.zeros((1, 1, 1), int)).item()
        assert got == pytest.approx(-0.75 * 0.75 ** 2 * math.log(0.25), rel=1e-12)

    def test_soft_iou_at_half_probability(self, f64):
        # p = 0.5 on one changed pixel: intersection 0.5, union 0.5 + 1 - 0.5 = 1
        loss = miou_loss(T.Tensor(np.zeros((1, 2, 1, 1))), np.ones((1, 1, 1), int))
        assert loss.item() == pytest.approx(0.5, abs=1e-15)

    def test_perfect_prediction_drives_losses_down(self):
        target = np.array([[[0, 1], [1, 0]]])
        logits = np.stack([1 - target, target], axis=1).astype(np.float64) * 40 - 20
        assert cross_entropy_loss(T.Tensor(logits), target).item() < 1e-8
        assert miou_loss(T.Tensor(logits), target).item() < 1e-8
        assert focal_loss(T.Tensor(logits), target).item() < 1e-8

    @pytest.mark.parametrize("loss_fn", [cross_entropy_loss, focal_loss, miou_loss])
    def test_loss_gradients(self, loss_fn):
        assert check_loss(loss_fn).passed

    def test_target_must_be_binary(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(T.Tensor(np.zeros((1, 2, 1, 1))), np.full((1, 1, 1), 2))

    def test_target_shape_checked(self):
        with pytest.raises(DimensionError):
            cross_entropy_loss(T.Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 2)))


@given(hnp.arrays(np.float64, (1, 2, 2, 3), elements=st.floats(-20, 20)),
       hnp.arrays(np.int64, (1, 2, 3), elements=st.integers(0, 1)))
def test_losses_are_bounded(logits, target):
    t = T.Tensor(logits)
    assert cross_entropy_loss(t, target).item() >= 0
    assert 0 <= miou_loss(t, target).item() <= 1
    assert focal_loss(t, target).item() >= 0


class TestAdamW:
    def _reference(self, p0, grads, lr, b1, b2, eps, wd):
        p, m, v = float(p0), 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p -= lr * wd * p
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        return p

    def test_matches_scalar_reference(self, f64):
        grads = [0.5, -1.0, 0.25, 2.0, -0.1]
        p = Parameter(np.array([1.5]))
        opt = AdamW([p], lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.05)
        for g in grads:
            p.grad = np.array([g])
            opt.step()
        assert p.data[0] == pytest.approx(self._reference(1.5, grads, 0.1, 0.9, 0.99, 1e-8, 0.05), rel=1e-13)

    def test_first_step_moves_by_lr(self, f64):
        p = Parameter(np.array([0.0, 0.0]))
        p.grad = np.array([3.0, -0.001])
        AdamW([p], lr=0.01, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-5)

    def test_decay_is_decoupled_from_gradient(self, f64):
        p = Parameter(np.array([2.0]))
        p.grad = np.array([0.0])
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_step_without_gradient(self):
        with pytest.raises(ContractError):
            AdamW([Parameter(np.ones(2))]).step()


class TestSchedule:
    def test_step_decay(self):
        cfg = TrainConfig(lr0=1e-4, decay_epochs=(100, 200))
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(99, cfg) == 1e-4
        assert lr_at(100, cfg) == pytest.approx(1e-5)
        assert lr_at(250, cfg) == pytest.approx(1e-6)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(decay_epochs=(200, 100)).validate()
        with pytest.raises(ConfigError):
            TrainConfig(loss="dice").validate()
        with pytest.raises(ConfigError):
            TrainConfig(lr0=-1.0).validate()
        TrainConfig(lr0=0.0).validate()


def test_flip_pair_keeps_alignment(rng):
    pre = rng.standard_normal((3, 4, 4))
    mask = (pre[0] > 0).astype(np.uint8)
    a, b, m = flip_pair(pre, pre.copy(), mask, True, True)
    np.testing.assert_array_equal(m, (a[0] > 0).astype(np.uint8))
    np.testing.assert_array_equal(a, pre[:, ::-1, ::-1])


@pytest.fixture(scope="module")
def small_data():
    ds = make_dataset(6, 32, seed=3)
    return (BitemporalDataset(ds.pre[:4], ds.post[:4], ds.mask[:4]),
            BitemporalDataset(ds.pre[4:], ds.post[4:], ds.mask[4:]))


class TestTrainLoop:
    def test_history_and_best_state(self, small_data):
        train_set, val_set = small_data
        model = build(tiny_config())
        result = train(model, train_set, val_set, TrainConfig(lr0=1e-3, epochs=2))
        assert [r.epoch for r in result.history] == [0, 1]
        assert result.best_f1 == max(r.val_f1 for r in result.history)
        assert result.history[0].line().startswith("epoch=0 lr=0.001 loss=")
        model.load_state_dict(result.best_state)

    def test_zero_learning_rate_changes_nothing(self, small_data):
        train_set, val_set = small_data
        model = build(tiny_config())
        before = model.state_dict()
        train(model, train_set, val_set, TrainConfig(lr0=0.0, epochs=1))
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_evaluate_counts_every_pixel(self, small_data):
        _, val_set = small_data
        counts = evaluate(build(tiny_config()), val_set)
        assert counts.total == 2 * 32 * 32

    def test_empty_training_set(self, small_data):
        empty = BitemporalDataset(np.zeros((0, 3, 32, 32)), np.zeros((0, 3, 32, 32)), np.zeros((0, 32, 32)))
        with pytest.raises(ValueError):
            train(build(tiny_config()), empty, small_data[1], TrainConfig(epochs=1))
