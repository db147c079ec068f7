"""Loss, schedules, SGD and the training loop."""

import os

import numpy as np
import pytest

from braidseg.data import generate_dataset, select
from braidseg.model import ModelConfig, build_model
from braidseg.tensor import Tensor, sigmoid_np
from braidseg.train import (NumericError, SgdState, TrainConfig, augment,
                            exp_lr, lr_for_epoch, poly_lr, seg_loss,
                            sgd_step, soft_dice, train)

TINY = ModelConfig(m=2, C=16, C_c=8, C_d=8, heads=2, x_c=8, x_s=32,
                   window=2, rfin_count=2, dkin_count=2)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_corpus")
    samples = generate_dataset(root, seed=2, n_train=2, n_val=0, n_test=0,
                               size=16)
    return str(root), select(samples, split="train")


class TestConfig:
    def test_validate_passes_defaults(self):
        cfg = TrainConfig()
        assert cfg.validate() is cfg

    @pytest.mark.parametrize("kw", [
        {"epochs": 0}, {"batch": 0}, {"lr_schedule": "cosine"}])
    def test_validate_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


class TestSchedules:
    def test_poly_endpoints_are_exact(self):
        assert poly_lr(0.05, 0, 50) == 0.05
        assert poly_lr(0.05, 50, 50) == 0.0

    def test_poly_linear_case(self):
        assert poly_lr(1.0, 25, 100, power=1.0) == 0.75

    def test_poly_monotone_decreasing(self):
        vals = [poly_lr(1e-3, e, 40, power=0.9) for e in range(41)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_poly_rejects_out_of_range_epoch(self):
        with pytest.raises(ValueError):
            poly_lr(1.0, 51, 50)
        with pytest.raises(ValueError):
            poly_lr(1.0, -1, 50)

    def test_exp_closed_form(self):
        assert exp_lr(2.0, 3, gamma=0.5) == 0.25

    def test_dispatch(self):
        cfg = TrainConfig(lr0=1.0, epochs=10, poly_power=1.0)
        assert lr_for_epoch(cfg, 5) == 0.5
        cfg = TrainConfig(lr0=1.0, lr_schedule="exp", exp_gamma=0.1)
        assert abs(lr_for_epoch(cfg, 2) - 0.01) < 1e-15


class TestLoss:
    def test_soft_dice_matches_closed_form(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 1, 4, 4)).astype(np.float64)
        target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        got = float(soft_dice(Tensor(logits), Tensor(target)).data)
        p = sigmoid_np(logits)
        want = (2.0 * (p * target).sum() + 1.0) / (p.sum() + target.sum() + 1.0)
        assert abs(got - want) < 1e-12

    def test_confident_correct_prediction_has_tiny_loss(self):
        target = np.zeros((1, 1, 4, 4), dtype=np.float64)
        target[0, 0, 1:3, 1:3] = 1.0
        logits = np.where(target > 0, 30.0, -30.0)
        loss = float(seg_loss(Tensor(logits), target).data)
        assert 0.0 <= loss < 1e-3

    def test_weights_decompose_the_loss(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(1, 1, 3, 3)).astype(np.float64))
        target = (rng.random((1, 1, 3, 3)) > 0.5).astype(np.float64)
        d = float(seg_loss(logits, target, dice_weight=1.0, bce_weight=0.0).data)
        b = float(seg_loss(logits, target, dice_weight=0.0, bce_weight=1.0).data)
        full = float(seg_loss(logits, target, 1.0, 1.0).data)
        assert abs(full - (d + b)) < 1e-12
        assert abs(d - (1.0 - float(soft_dice(logits, Tensor(target)).data))) < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="seg_loss"):
            seg_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 8, 8)))

    def test_gradient_points_toward_the_target(self):
        target = np.ones((1, 1, 2, 2), dtype=np.float64)
        logits = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64),
                        requires_grad=True)
        seg_loss(logits, target).backward()
        assert np.all(logits.grad < 0)


class TestSgd:
    def test_two_step_hand_example(self):
        """mu=0.99, unit gradient twice, lr=1, no decay: theta walks
        0 -> -1 -> -2.99."""
        p = Tensor(np.zeros((3,), dtype=np.float64), requires_grad=True)
        state = SgdState()
        for _ in range(2):
            p.grad = np.ones((3,), dtype=np.float64)
            sgd_step([("p", p)], state, lr=1.0, momentum=0.99,
                     weight_decay=0.0)
        assert np.max(np.abs(p.data - (-2.99))) < 1e-12

    def test_weight_decay_closed_form(self):
        theta0 = np.array([2.0, -4.0])
        p = Tensor(theta0.copy(), requires_grad=True)
        p.grad = np.array([1.0, 1.0])
        state = SgdState()
        sgd_step([("p", p)], state, lr=0.1, momentum=0.5, weight_decay=0.01)
        want = theta0 - 0.1 * (1.0 + 0.01 * theta0)
        assert np.max(np.abs(p.data - want)) < 1e-15
        assert np.max(np.abs(state.velocity["p"] - (1.0 + 0.01 * theta0))) < 1e-15

    def test_velocity_accumulates_per_name(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        state = SgdState()
        for _ in range(3):
            a.grad = np.ones(2)
            b.grad = 2 * np.ones(2)
            sgd_step([("a", a), ("b", b)], state, lr=0.0, momentum=1.0,
                     weight_decay=0.0)
        assert np.allclose(state.velocity["a"], 3.0)
        assert np.allclose(state.velocity["b"], 6.0)

    def test_non_trainable_tensor_is_named(self):
        p = Tensor(np.zeros(2), requires_grad=False)
        with pytest.raises(ValueError, match="lonely"):
            sgd_step([("lonely", p)], SgdState(), lr=0.1)


class TestAugment:
    def _pair(self, seed=0, size=12):
        rng = np.random.default_rng(seed)
        img = rng.random((size, size)).astype(np.float32)
        msk = np.zeros((size, size), dtype=np.float32)
        msk[3:7, 2:9] = 1.0
        return img, msk

    @pytest.mark.parametrize("seed", range(5))
    def test_mask_stays_binary_with_constant_foreground(self, seed):
        img, msk = self._pair(seed)
        cfg = TrainConfig(invert_prob=0.5)
        out_i, out_m = augment(img, msk, np.random.default_rng(seed + 100), cfg)
        assert set(np.unique(out_m)) <= {0.0, 1.0}
        assert out_m.sum() == msk.sum()
        assert 0.0 <= out_i.min() and out_i.max() <= 1.0

    def test_draw_count_is_outcome_independent(self):
        """Both extremes of every probability consume the same stream."""
        img, msk = self._pair()
        hot = TrainConfig(invert_prob=1.0, flip_prob=1.0)
        cold = TrainConfig(invert_prob=0.0, flip_prob=0.0)
        r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
        augment(img, msk, r1, hot)
        augment(img, msk, r2, cold)
        assert r1.bit_generator.state == r2.bit_generator.state

    def test_inversion_is_exact_without_scale_or_shift(self):
        img, msk = self._pair()
        cfg = TrainConfig(scale_range=(1.0, 1.0), shift_range=(0.0, 0.0),
                          flip_prob=0.0, invert_prob=1.0)
        out_i, out_m = augment(img, msk, np.random.default_rng(0), cfg)
        assert np.allclose(out_i, 1.0 - img, atol=1e-7)
        assert np.array_equal(out_m, msk)

    def test_forced_flips_mirror_both_arrays(self):
        img, msk = self._pair()
        cfg = TrainConfig(scale_range=(1.0, 1.0), shift_range=(0.0, 0.0),
                          flip_prob=1.0, invert_prob=0.0)
        out_i, out_m = augment(img, msk, np.random.default_rng(0), cfg)
        assert np.array_equal(out_i, img[::-1, ::-1])
        assert np.array_equal(out_m, msk[::-1, ::-1])

    def test_flips_track_each_other(self):
        img, msk = self._pair(3)
        cfg = TrainConfig(invert_prob=0.0, scale_range=(1.0, 1.0),
                          shift_range=(0.0, 0.0))
        for seed in range(8):
            out_i, out_m = augment(img, msk, np.random.default_rng(seed), cfg)
            src = np.argwhere(msk == 1.0)
            dst = np.argwhere(out_m == 1.0)
            assert len(src) == len(dst)
            # the image moved with the mask: lesion-bbox means must agree
            assert abs(out_i[out_m == 1.0].mean() - img[msk == 1.0].mean()) < 1e-6


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(epochs=2, batch=2, lr0=1e-3, momentum=0.9,
                    weight_decay=0.0, seed=0, augment=False)
        base.update(kw)
        return TrainConfig(**base)

    def test_log_rows_shape_and_header(self, corpus):
        root, samples = corpus
        model = build_model(TINY, seed=0)
        rows = train(model, root, samples, self._cfg())
        assert rows[0] == ("iteration", "epoch", "lr", "loss")
        assert len(rows) == 3                      # 2 epochs x 1 batch
        its = [r[0] for r in rows[1:]]
        assert its == [1, 2]
        for _, epoch, lr, loss in rows[1:]:
            assert float(lr) >= 0.0 and np.isfinite(float(loss))

    def test_two_runs_are_bitwise_identical(self, corpus):
        root, samples = corpus
        cfg = self._cfg(augment=True)
        m1 = build_model(TINY, seed=0)
        m2 = build_model(TINY, seed=0)
        r1 = train(m1, root, samples, cfg)
        r2 = train(m2, root, samples, cfg)
        assert r1 == r2
        p2 = dict(m2.named_params())
        for name, p in m1.named_params():
            assert p.data.tobytes() == p2[name].data.tobytes(), name

    def test_loss_log_and_checkpoint_written(self, corpus, tmp_path):
        root, samples = corpus
        model = build_model(TINY, seed=0)
        out = tmp_path / "run"
        rows = train(model, root, samples, self._cfg(), out_dir=str(out))
        text = (out / "loss_log.csv").read_text().splitlines()
        assert text[0] == "iteration,epoch,lr,loss"
        assert len(text) == len(rows)
        assert float(text[1].split(",")[3]) == float(rows[1][3])
        assert os.path.exists(out / "checkpoint" / "meta.json")

    def test_training_reduces_the_loss(self, corpus):
        root, samples = corpus
        model = build_model(TINY, seed=0)
        rows = train(model, root, samples,
                     self._cfg(epochs=8, lr0=5e-2, momentum=0.9))
        first, last = float(rows[1][3]), float(rows[-1][3])
        assert last < first

    def test_empty_sample_list_rejected(self, corpus):
        root, _ = corpus
        model = build_model(TINY, seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(model, root, [], self._cfg())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_numeric_error(self, corpus):
        root, samples = corpus
        model = build_model(TINY, seed=0)
        with pytest.raises(NumericError, match="non-finite"):
            train(model, root, samples,
                  self._cfg(epochs=30, lr0=1e9, momentum=0.99))
