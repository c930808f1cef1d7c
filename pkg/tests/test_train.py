import math

import numpy as np
import pytest

from resnorm_asc.data import FeatureSet
from resnorm_asc.model import ModelConfig, build
from resnorm_asc.ops import softmax_xent
from resnorm_asc.tensor import Tensor
from resnorm_asc.train import (SGD, EvalReport, SpecAugConfig, TrainConfig, TrainingDiverged, apply_masks, draw_masks,
                               evaluate, kd_loss, lr_at, mask_fill, mixup, report_from_logits, select_checkpoint,
                               spec_augment, time_roll, train)


def toy_set(n=64, t=12, seed=0):
    """Two classes that differ by a broad spectral tilt."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    tilt = np.linspace(-1, 1, 256)[None, :, None] * np.where(y == 1, 1.0, -1.0)[:, None, None]
    x = (rng.normal(size=(n, 256, t)) + 2 * tilt).astype(np.float32)
    return FeatureSet(x, y, np.array(["A"] * n, dtype=object), np.arange(n))


class TestSchedule:
    cfg = TrainConfig()

    def test_starts_at_zero(self):
        assert lr_at(self.cfg, 0, 10) == 0.0

    def test_peak_at_warmup_end(self):
        assert lr_at(self.cfg, 50, 10) == 0.06

    def test_cosine_midpoint(self):
        # epoch 52.5 of 100
        assert abs(lr_at(self.cfg, 525, 10) - 0.03) < 1e-12

    def test_final_step(self):
        assert lr_at(self.cfg, 1000, 10) < 1e-9

    def test_non_negative_and_continuous(self):
        vals = [lr_at(self.cfg, s, 10) for s in range(1001)]
        assert min(vals) >= 0
        assert abs(lr_at(self.cfg, 49, 10) - 0.06) < 0.06 / 50 + 1e-12
        assert abs(lr_at(self.cfg, 51, 10) - 0.06) < 1e-4

    def test_no_warmup(self):
        cfg = TrainConfig(epochs=4, warmup_epochs=0)
        assert lr_at(cfg, 0, 5) == 0.06

    def test_validation_lists_all_errors(self):
        with pytest.raises(ValueError) as exc:
            TrainConfig(epochs=0, batch_size=-1, kd_beta=2)
        msg = str(exc.value)
        assert "epochs" in msg and "batch_size" in msg and "kd_beta" in msg


class TestTimeRoll:
    def test_zero_and_full_wrap(self, rng):
        x = rng.normal(size=(4, 30))
        np.testing.assert_array_equal(time_roll(x, 0), x)
        np.testing.assert_array_equal(time_roll(x, 30), x)

    def test_fifty_frames(self, rng):
        x = rng.normal(size=(2, 330))
        assert TrainConfig().roll_frames == 50
        np.testing.assert_array_equal(time_roll(x, 50)[:, 50], x[:, 0])

    def test_random_within_range(self, rng):
        x = np.arange(200.0)[None]
        for _ in range(50):
            shift = int(np.argmax(time_roll(x, rng=rng, max_shift=50) == 0))
            assert shift <= 50 or shift >= 150

    def test_needs_shift_or_rng(self):
        with pytest.raises(ValueError):
            time_roll(np.zeros((2, 3)))


class TestMixup:
    def test_weight_one_is_identity(self, rng):
        x, y = rng.normal(size=(4, 3)), np.eye(4)
        mx, my, _ = mixup(x, y, 0.3, rng, weight=1.0)
        np.testing.assert_array_equal(mx, x)
        np.testing.assert_array_equal(my, y)

    def test_midpoint(self, rng):
        x = np.array([[0.0], [2.0]])
        mx, _, _ = mixup(x, np.eye(2), 0.3, rng, weight=0.5, perm=np.array([1, 0]))
        np.testing.assert_allclose(mx, [[1.0], [1.0]])

    def test_soft_labels(self, rng):
        y = np.eye(3)[[0, 2]]
        _, my, _ = mixup(np.zeros((2, 1)), y, 0.3, rng, weight=0.3, perm=np.array([1, 0]))
        np.testing.assert_allclose(my[0], [0.3, 0.0, 0.7])
        np.testing.assert_allclose(my.sum(axis=1), 1.0)

    def test_random_draws_stay_distributions(self, rng):
        y = np.eye(10)[rng.integers(0, 10, 16)]
        for _ in range(20):
            mx, my, w = mixup(rng.normal(size=(16, 4)), y, 0.3, rng)
            assert 0 <= w <= 1 and mx.shape == (16, 4)
            assert np.all(my >= 0) and np.allclose(my.sum(axis=1), 1.0)


class TestSpecAugment:
    def test_zero_width_is_identity(self, rng):
        x = rng.normal(size=(256, 40))
        cfg = SpecAugConfig(freq_param=0, time_param=0)
        np.testing.assert_array_equal(spec_augment(x, cfg, rng), x)

    def test_freq_mask_rows(self, rng):
        x = rng.normal(size=(256, 40))
        out = apply_masks(x, [("F", 100, 40)])
        fill = mask_fill(x)
        np.testing.assert_array_equal(out[100:140], np.broadcast_to(fill[100:140], (40, 40)))
        np.testing.assert_array_equal(out[:100], x[:100])
        np.testing.assert_array_equal(out[140:], x[140:])

    def test_time_mask_uses_bin_means(self, rng):
        x = rng.normal(size=(8, 20)) + np.arange(8)[:, None]
        out = apply_masks(x, [("T", 5, 3)])
        np.testing.assert_allclose(out[:, 5:8], np.repeat(x.mean(axis=1, keepdims=True), 3, axis=1))

    @pytest.mark.parametrize("how", ["mean", "zero"])
    def test_other_fills(self, how, rng):
        x = rng.normal(size=(4, 6))
        out = apply_masks(x, [("T", 0, 2)], fill=mask_fill(x, how))
        expected = x.mean() if how == "mean" else 0.0
        np.testing.assert_allclose(out[:, :2], expected)

    def test_masked_fraction_bound(self, rng):
        f, t = 256, 330
        cfg = SpecAugConfig()
        bound = (2 * 40 * t + 2 * 80 * f) / (f * t)
        for _ in range(1000):
            masked = np.zeros((f, t), bool)
            for axis, start, width in draw_masks(f, t, cfg, rng):
                if axis == "F":
                    masked[start : start + width] = True
                else:
                    masked[:, start : start + width] = True
            assert masked.mean() <= bound

    def test_shape_preserved(self, rng):
        x = rng.normal(size=(256, 33))
        assert spec_augment(x, SpecAugConfig(), rng).shape == x.shape


class TestKDLoss:
    def test_identical_logits_beta_zero(self, rng):
        z = rng.normal(size=(4, 10))
        assert abs(float(kd_loss(Tensor(z), z, np.zeros(4, int), 4.0, 0.0).data)) < 1e-6

    def test_beta_one_is_cross_entropy(self, rng):
        z = Tensor(rng.normal(size=(4, 10)))
        labels = rng.integers(0, 10, 4)
        a = kd_loss(z, rng.normal(size=(4, 10)), labels, 4.0, 1.0).data
        assert a == softmax_xent(z, labels).data

    def test_closed_form(self):
        # T=1, uniform student, teacher logits (2, 0): KL(p_t || uniform)
        teacher = np.array([[2.0, 0.0]])
        p = np.exp(teacher[0]) / np.exp(teacher[0]).sum()
        expected = float((p * np.log(p / 0.5)).sum())
        got = float(kd_loss(Tensor(np.zeros((1, 2)), dtype=np.float64), teacher, np.array([0]), 1.0, 0.0).data)
        assert got == pytest.approx(expected, rel=1e-9)

    def test_non_negative(self, rng):
        for _ in range(20):
            s, t = rng.normal(size=(3, 5)) * 3, rng.normal(size=(3, 5)) * 3
            assert float(kd_loss(Tensor(s, dtype=np.float64), t, np.zeros(3, int), 4.0, 0.0).data) >= -1e-12

    def test_temperature_squared_scaling(self):
        s, t = np.array([[0.0, 0.0]]), np.array([[4.0, 0.0]])
        one = float(kd_loss(Tensor(s, dtype=np.float64), t, np.array([0]), 2.0, 0.0).data)
        ps = np.array([0.5, 0.5])
        pt = np.exp(t[0] / 2) / np.exp(t[0] / 2).sum()
        assert one == pytest.approx(4 * float((pt * np.log(pt / ps)).sum()))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kd_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)), np.zeros(2, int))


class TestEvaluation:
    def test_perfect(self):
        logits = np.eye(10)[np.arange(10)] * 50
        rep = report_from_logits(logits, np.arange(10), ["A"] * 10)
        assert rep.overall == 100.0 and rep.log_loss < 1e-15 + 1e-12

    def test_uniform(self):
        rep = report_from_logits(np.zeros((100, 10)), np.arange(100) % 10, ["A"] * 100)
        assert rep.overall == pytest.approx(10.0)
        assert rep.log_loss == pytest.approx(math.log(10))

    def test_per_device_counts(self):
        logits = np.eye(2)[[0, 0, 1, 1, 0, 1]]
        y = np.array([0, 1, 1, 1, 0, 0])
        rep = report_from_logits(logits, y, ["A", "A", "A", "B", "B", "B"])
        assert rep.per_device == pytest.approx({"A": 200 / 3, "B": 200 / 3})
        assert rep.counts == {"A": 3, "B": 3}

    def test_missing_device_flagged(self):
        rep = report_from_logits(np.zeros((2, 2)), np.array([0, 1]), ["A", "A"], expected=["A", "S4"])
        assert rep.flagged == ["S4"] and "S4" not in rep.per_device

    def test_mean_over(self):
        rep = EvalReport({"A": 80.0, "S4": 60.0}, 70.0, 70.0, 0.5, 100.0, {"A": 1, "S4": 1})
        assert rep.mean_over(["S4"]) == 60.0


class TestCheckpointSelection:
    def test_single(self):
        assert select_checkpoint([3.0], "min_var") == 0

    def test_argmin(self):
        assert select_checkpoint([4.0, 1.0, 2.5], "min_var") == 1

    def test_ties_go_later(self):
        assert select_checkpoint([1.0, 1.0, 1.0], "min_var") == 2

    def test_last(self):
        assert select_checkpoint([1.0, 5.0], "last") == 1


class TestSGD:
    def test_lr_zero_leaves_params(self, rng):
        p = Tensor(rng.normal(size=5), requires_grad=True)
        before = p.data.copy()
        p.grad = rng.normal(size=5).astype(np.float32)
        opt = SGD([p], 0.9, 0.001)
        opt.step(0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_weight_decay_in_gradient(self):
        p = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.0])
        SGD([p], 0.0, 0.5).step(0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_momentum(self):
        p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        opt = SGD([p], 0.9, 0.0)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step(1.0)
        assert p.data[0] == pytest.approx(-(1.0 + 1.9))


class TestTrainLoop:
    cfg = dict(epochs=1, warmup_epochs=0, batch_size=16, peak_lr=0.05,
               specaug=SpecAugConfig(freq_param=10, time_param=3))

    def test_loss_decreases(self):
        data = toy_set()
        wins = 0
        for seed in range(3):
            model = build(ModelConfig(base_channels=2), seed=seed)
            before = evaluate(model, data).log_loss
            train(model, data, TrainConfig(seed=seed, augment=False, **self.cfg))
            wins += evaluate(model, data).log_loss < before
        assert wins >= 2

    def test_bitwise_reproducible(self):
        data = toy_set(32)
        states = []
        for _ in range(2):
            model = build(ModelConfig(base_channels=2), seed=0)
            train(model, data, TrainConfig(seed=5, **self.cfg))
            states.append(model.state_dict())
        for k in states[0]:
            np.testing.assert_array_equal(states[0][k], states[1][k])

    def test_zero_lr_keeps_weights(self):
        data = toy_set(32)
        model = build(ModelConfig(base_channels=2), seed=0)
        before = {n: p.data.copy() for n, p, _ in model.named_params()}
        train(model, data, TrainConfig(seed=0, **{**self.cfg, "peak_lr": 0.0}))
        for n, p, _ in model.named_params():
            np.testing.assert_array_equal(p.data, before[n])

    def test_history_and_eval(self):
        data = toy_set(32)
        model = build(ModelConfig(base_channels=2), seed=0)
        _, hist = train(model, data, TrainConfig(seed=0, **{**self.cfg, "epochs": 2}), eval_set=data,
                        keep_checkpoints=True)
        assert [h["epoch"] for h in hist] == [1, 2]
        assert "per_device" in hist[0] and "state" in hist[1]

    def test_masks_survive_training(self):
        data = toy_set(32)
        model = build(ModelConfig(base_channels=2), seed=0)
        conv = model.conv_layers()[0]
        conv.mask = np.zeros(conv.weight.shape, bool)
        conv.weight.data[:] = 0
        train(model, data, TrainConfig(seed=0, **self.cfg))
        assert not conv.weight.data.any()

    def test_divergence_guard(self):
        data = toy_set(32)
        model = build(ModelConfig(base_channels=2), seed=0)
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
            train(model, data, TrainConfig(seed=0, augment=False, **{**self.cfg, "epochs": 5, "peak_lr": 1e30}))

    def test_global_baseline_fits_stats(self):
        data = toy_set(32)
        model = build(ModelConfig(base_channels=2, norm_mode="global"), seed=0)
        train(model, data, TrainConfig(seed=0, **self.cfg))
        assert model.input_norm.stats.fitted

    def test_empty(self):
        with pytest.raises(ValueError):
            train(build(ModelConfig(base_channels=2)), toy_set().subset([]), TrainConfig(**self.cfg))
