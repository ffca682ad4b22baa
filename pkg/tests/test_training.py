"""Loss, optimizer and the epoch loop."""
import math

import numpy as np
import pytest

from mamapp import data as D
from mamapp import training as T
from mamapp.evaluation import confusion, metrics
from mamapp.model import ConfigError, MamAppConfig, build, read_checkpoint
from mamapp.nn import Parameter
from mamapp.tensor import Tensor


def adam_reference(theta, grads, lr, b1, b2, eps):
    """Plain textbook Adam, looped in float64."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


@pytest.fixture(scope="module")
def tiny_cfg():
    return MamAppConfig(input_size=(32, 32, 3), num_blocks=1, batch_size=8, epochs=2, augment=True)


@pytest.fixture(scope="module")
def tiny_index(leaf_root):
    return D.stratified_split(D.index_dataset(leaf_root), seed=0)


class TestSmoothedLoss:
    def test_target_example(self):
        q = T.smoothed_targets(np.array([0]), 4, 0.1)[0]
        np.testing.assert_allclose(q, [0.9, 0.1 / 3, 0.1 / 3, 0.1 / 3], rtol=1e-15)

    def test_zero_smoothing_is_cross_entropy(self, rng):
        logits = rng.standard_normal((16, 5))
        labels = rng.integers(0, 5, 16)
        shifted = logits - logits.max(axis=1, keepdims=True)
        ce = -(shifted[np.arange(16), labels] - np.log(np.exp(shifted).sum(axis=1))).mean()
        got = T.smoothed_cross_entropy(Tensor(logits), labels, 0.0).item()
        assert abs(got - ce) < 1e-7

    def test_floor_value(self):
        assert T.smoothing_floor(4, 0.1) == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1 / 3)),
                                                          rel=1e-15)
        assert T.smoothing_floor(4, 0.1) == pytest.approx(0.4349, abs=5e-5)

    def test_floor_attained_at_target(self):
        q = T.smoothed_targets(np.array([2, 0]), 4, 0.1)
        loss = T.smoothed_cross_entropy(Tensor(np.log(q)), np.array([2, 0]), 0.1).item()
        assert loss == pytest.approx(T.smoothing_floor(4, 0.1), abs=1e-12)

    def test_lower_bound(self, rng):
        floor = T.smoothing_floor(4, 0.1)
        for _ in range(200):
            logits = rng.standard_normal((4, 4)) * rng.uniform(0.1, 20)
            assert T.smoothed_cross_entropy(Tensor(logits), rng.integers(0, 4, 4), 0.1).item() >= floor - 1e-12

    def test_large_logits_stable(self):
        loss = T.smoothed_cross_entropy(Tensor(np.array([[1e4, 0.0, 0.0]])), np.array([0]), 0.1).item()
        assert math.isfinite(loss)

    def test_bad_label_names_sample(self):
        with pytest.raises(ValueError, match="sample 2"):
            T.smoothed_cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 4]))

    def test_gradient(self, gradcheck, rng):
        labels = rng.integers(0, 4, 5)
        assert gradcheck(lambda z: T.smoothed_cross_entropy(z, labels, 0.1), rng.standard_normal((5, 4))) < 1e-4


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self):
        p = Parameter(np.array([1.0, -2.0]))
        opt = T.AdamW([("p", p)], weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude_is_lr(self):
        p = Parameter(np.array([0.5]))
        opt = T.AdamW([("p", p)], lr=1e-3, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        assert 0.5 - p.data[0] == pytest.approx(1e-3, rel=1e-7)

    def test_decoupled_shrink(self):
        p = Parameter(np.array([2.0, -4.0]))
        opt = T.AdamW([("p", p)], lr=1e-2, weight_decay=0.5)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 1e-2 * 0.5), rtol=1e-15)

    def test_no_decay_params_are_fixed_points(self):
        model = build(MamAppConfig(input_size=(16, 16, 3)), dtype=np.float64)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        opt = T.AdamW(model.named_parameters(), weight_decay=0.1)
        model.zero_grad()
        for _ in range(3):
            opt.step()
        for n, p in model.named_parameters():
            if p.decay:
                assert not np.array_equal(p.data, before[n]), n
            else:
                np.testing.assert_array_equal(p.data, before[n], err_msg=n)

    def test_matches_adam_without_decay(self, rng):
        theta0 = rng.standard_normal(7)
        grads = [rng.standard_normal(7) for _ in range(100)]
        p = Parameter(theta0.copy())
        opt = T.AdamW([("p", p)], lr=1e-2, weight_decay=0.0)
        for g in grads:
            p.grad = g
            opt.step()
        np.testing.assert_allclose(p.data, adam_reference(theta0, grads, 1e-2, 0.9, 0.999, 1e-8),
                                   atol=1e-7, rtol=0)

    def test_step_counter_and_moment_shapes(self):
        p = Parameter(np.ones((2, 3)))
        opt = T.AdamW([("p", p)])
        for k in range(1, 4):
            p.grad = np.ones((2, 3))
            opt.step()
            assert opt.step_count == k
        assert opt.m["p"].shape == opt.v["p"].shape == (2, 3)

    def test_shape_mismatch(self):
        p = Parameter(np.ones(3))
        opt = T.AdamW([("p", p)])
        p.grad = np.ones(4)
        with pytest.raises(ValueError, match="gradient shape"):
            opt.step()


class _FixedLogits:
    """Stand-in model returning preset logits per batch."""

    def __init__(self, logits):
        self.logits = list(logits)

    def eval(self):
        return self

    def __call__(self, images):
        return Tensor(self.logits.pop(0))


class TestEvaluateEpoch:
    def test_perfect_logits(self, rng):
        labels = rng.integers(0, 4, 10)
        batch = D.Batch(Tensor(np.zeros((10, 1))), labels, [""] * 10)
        loss, acc = T.evaluate_epoch(_FixedLogits([np.eye(4)[labels] * 10]), [batch])
        assert acc == 1.0 and loss > 0

    def test_chance_level(self, leaf_root):
        idx = D.balanced_subset(D.index_dataset(leaf_root), 10, seed=0, split="val")
        model = build(MamAppConfig(input_size=(32, 32, 3)))
        _, acc = T.evaluate_epoch(model, D.make_batches(idx, "val", 8, image_size=32))
        assert abs(acc - 0.25) <= 0.1

    def test_matches_confusion_trace(self, rng):
        labels = rng.integers(0, 4, 30)
        logits = rng.standard_normal((30, 4))
        batch = D.Batch(Tensor(np.zeros((30, 1))), labels, [""] * 30)
        _, acc = T.evaluate_epoch(_FixedLogits([logits]), [batch])
        cm = confusion(labels, logits.argmax(axis=1), 4)
        assert acc == metrics(cm).accuracy == np.trace(cm.counts) / cm.total

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            T.evaluate_epoch(_FixedLogits([]), [])


class TestSelection:
    def test_rules(self):
        assert T._better(0.5, 1.0, None)
        assert T._better(0.6, 9.0, (0.5, 1.0))
        assert T._better(0.5, 0.9, (0.5, 1.0))
        assert not T._better(0.5, 1.0, (0.5, 1.0))      # exact tie keeps the earlier epoch
        assert not T._better(0.4, 0.1, (0.5, 1.0))


class TestTrain:
    def test_zero_epochs(self, tiny_cfg, tiny_index, tmp_path):
        res = T.train(tiny_cfg.replace(epochs=0), tiny_index, out_dir=tmp_path)
        assert res.log.records == [] and res.best_epoch is None
        init = build(tiny_cfg)
        for (n, a), (_, b) in zip(res.model.named_parameters(), init.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes(), n
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "trainlog.csv").exists()

    def test_artifacts_and_log(self, tiny_cfg, tiny_index, tmp_path):
        res = T.train(tiny_cfg, tiny_index, out_dir=tmp_path)
        assert [r.epoch for r in res.log.records] == [1, 2]
        header = (tmp_path / "trainlog.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,val_loss,val_acc,seconds"
        for name in ("best.ckpt", "last.ckpt", "summary.json"):
            assert (tmp_path / name).exists()
        _, meta, tensors = read_checkpoint(tmp_path / "last.ckpt")
        n_train = len(tiny_index.indices("train"))
        assert meta["optimizer_step"] == 2 * math.ceil(n_train / tiny_cfg.batch_size)
        assert any(k.startswith("adamw.m.") for k in tensors)
        back = T.TrainLog.read_csv(tmp_path / "trainlog.csv")
        assert back.deterministic_view() == res.log.deterministic_view()

    def test_best_is_selected_epoch(self, tiny_cfg, tiny_index):
        res = T.train(tiny_cfg.replace(epochs=3), tiny_index)
        recs = res.log.records
        best = max(recs, key=lambda r: (r.val_acc, -r.val_loss, -r.epoch))
        assert res.best_epoch == best.epoch
        loss, acc = T.evaluate_epoch(res.model, D.make_batches(tiny_index, "val", 8, image_size=32))
        assert (acc, loss) == pytest.approx((best.val_acc, best.val_loss), abs=1e-6)

    def test_resume_continues(self, tiny_cfg, tiny_index, tmp_path):
        T.train(tiny_cfg.replace(epochs=1), tiny_index, out_dir=tmp_path)
        steps_one = read_checkpoint(tmp_path / "last.ckpt")[1]["optimizer_step"]
        res = T.train(tiny_cfg.replace(epochs=2), tiny_index, out_dir=tmp_path,
                      resume=tmp_path / "last.ckpt")
        assert [r.epoch for r in res.log.records] == [1, 2]
        assert res.optimizer.step_count == 2 * steps_one
        full = T.train(tiny_cfg.replace(epochs=2), tiny_index)
        assert res.log.records[1].train_loss == full.log.records[1].train_loss

    def test_non_finite_loss(self, tiny_cfg, tiny_index, monkeypatch):
        real_build = T.build

        def poisoned(cfg):
            m = real_build(cfg)
            m.head.bias.data[:] = np.nan
            return m

        monkeypatch.setattr(T, "build", poisoned)
        with pytest.raises(T.NonFiniteLossError, match="epoch 1, batch 0"):
            T.train(tiny_cfg, tiny_index)

    def test_class_count_mismatch(self, tiny_cfg, tiny_index):
        with pytest.raises(ConfigError, match="num_classes"):
            T.train(tiny_cfg.replace(num_classes=3), tiny_index)
