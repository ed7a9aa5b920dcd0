import math

import numpy as np
import pytest

from switchtab import tensor as T
from switchtab import train as Tr
from switchtab.data import FeatureMatrix
from switchtab.model import ForwardOutputs, ModelConfig, encode, init_model, predict
from switchtab.tensor import Tensor, backward
from switchtab.train import (
    Adam,
    RMSprop,
    TrainConfig,
    cls_loss,
    finetune,
    pretrain,
    recon_loss,
    recon_terms,
    total_loss,
)

SMALL = dict(d_model=4, n_layers=1, n_heads=2, d_ff=8)


def outputs(x1, x2, rec1, rec2, sw1, sw2):
    t = lambda a: Tensor(np.asarray(a, dtype=float))  # noqa: E731
    z = t(np.zeros_like(x1))
    return ForwardOutputs(z, z, z, z, z, z, t(rec1), t(rec2), t(sw1), t(sw2))


def toy_matrix(n=40, M=3, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.clip(rng.normal(0.5, 0.1, size=(n, M)) + 0.3 * (y[:, None] - 0.5), 0, 1)
    return FeatureMatrix(x, y if labels else None, x, task="binary", n_classes=2)


class TestReconLoss:
    def test_exact_reconstruction(self):
        x = np.array([[0.2, 0.7]])
        assert recon_loss(x, x, outputs(x, x, x, x, x, x)).item() == 0.0

    def test_single_term(self):
        x1, x2 = np.array([[0.0, 0.0]]), np.array([[0.5, 0.5]])
        out = outputs(x1, x2, x1, x2, [[1.0, 0.0]], x2)
        assert abs(recon_loss(x1, x2, out).item() - 0.5) < 1e-12

    def test_sum_of_independent_terms(self):
        rng = np.random.default_rng(0)
        x1, x2 = rng.random((4, 5)), rng.random((4, 5))
        r1, r2, s1, s2 = (rng.random((4, 5)) for _ in range(4))
        expected = sum(np.mean((a - b) ** 2) for a, b in [(x1, s1), (x2, s2), (x1, r1), (x2, r2)])
        got = recon_loss(x1, x2, outputs(x1, x2, r1, r2, s1, s2)).item()
        assert abs(got - expected) < 1e-12

    def test_per_row_definition(self):
        # mean over rows of per-row (1/M) sums equals the mean over all entries
        rng = np.random.default_rng(1)
        x1, x2 = rng.random((3, 4)), rng.random((3, 4))
        r1, r2, s1, s2 = (rng.random((3, 4)) for _ in range(4))
        total = 0.0
        for b in range(3):
            for x, y in [(x1, s1), (x2, s2), (x1, r1), (x2, r2)]:
                total += sum((x[b, j] - y[b, j]) ** 2 for j in range(4)) / 4
        got = recon_loss(x1, x2, outputs(x1, x2, r1, r2, s1, s2)).item()
        assert abs(got - total / 3) < 1e-12

    def test_no_switch_keeps_recovered_terms(self):
        rng = np.random.default_rng(2)
        x1, x2 = rng.random((2, 3)), rng.random((2, 3))
        r1, r2, s1, s2 = (rng.random((2, 3)) for _ in range(4))
        out = outputs(x1, x2, r1, r2, s1, s2)
        expected = np.mean((x1 - r1) ** 2) + np.mean((x2 - r2) ** 2)
        assert abs(recon_loss(x1, x2, out, switching=False).item() - expected) < 1e-12

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            arrays = [rng.random((2, 3)) for _ in range(6)]
            assert recon_loss(arrays[0], arrays[1], outputs(*arrays)).item() >= 0.0

    def test_shape_mismatch(self):
        x = np.zeros((2, 3))
        with pytest.raises(T.ShapeError):
            recon_loss(x, x, outputs(x, x, np.zeros((2, 2)), x, x, x))

    def test_terms_keys(self):
        x = np.zeros((1, 2))
        assert set(recon_terms(x, x, outputs(x, x, x, x, x, x))) == {
            "switched1", "switched2", "recovered1", "recovered2"}


class TestClsLoss:
    def test_confident_and_correct(self):
        logits = Tensor([[800.0, 0.0], [0.0, 800.0]])
        assert cls_loss([logits], [np.array([0, 1])], "binary").item() == 0.0

    def test_uniform_two_class(self):
        loss = cls_loss([Tensor(np.zeros((3, 2)))], [np.array([0, 1, 1])], "binary").item()
        assert abs(loss - math.log(2)) < 1e-12

    def test_pooled_over_streams(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(5, 3))
        ya, yb = np.array([0, 2, 1]), np.array([1, 1, 0, 2, 2])

        def nll(logits, y):
            return [math.log(sum(math.exp(v) for v in row)) - row[c] for row, c in zip(logits.tolist(), y)]

        expected = np.mean(nll(a, ya) + nll(b, yb))
        got = cls_loss([Tensor(a), Tensor(b)], [ya, yb], "multiclass").item()
        assert abs(got - expected) < 1e-12

    def test_regression_rmse(self):
        pred = Tensor([[1.0], [2.0]])
        assert cls_loss([pred], [np.array([1.0, 2.0])], "regression").item() == 0.0
        got = cls_loss([pred, Tensor([[0.0]])], [np.array([0.0, 2.0]), np.array([2.0])], "regression").item()
        assert abs(got - math.sqrt(5.0 / 3.0)) < 1e-12

    @pytest.mark.parametrize("bad", [[0, 2], [-1, 0], [0.5, 1]])
    def test_label_out_of_range(self, bad):
        with pytest.raises(ValueError):
            cls_loss([Tensor(np.zeros((2, 2)))], [np.array(bad)], "binary")


class TestTotalLoss:
    @pytest.mark.parametrize("alpha, expected", [(1.0, 1.2), (0.0, 0.5), (2.0, 1.9)])
    def test_examples(self, alpha, expected):
        assert abs(total_loss(Tensor(0.5), Tensor(0.7), alpha).item() - expected) < 1e-12

    def test_without_cls(self):
        assert total_loss(Tensor(0.5), None, 3.0).item() == 0.5

    def test_monotone_in_alpha(self):
        values = [total_loss(Tensor(0.3), Tensor(0.4), a).item() for a in np.linspace(0, 5, 11)]
        assert values == sorted(values)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            total_loss(Tensor(0.5), Tensor(0.7), -1.0)


def _param(value):
    return Tensor(np.array([value]), requires_grad=True)


def _set_grad(p, g):
    p.grad = np.array([g], dtype=float)


class TestRMSprop:
    def test_zero_gradient(self):
        p = _param(1.5)
        opt = RMSprop([p], lr=0.1)
        for _ in range(3):
            _set_grad(p, 0.0)
            opt.step()
        assert p.data[0] == 1.5

    def test_first_step(self):
        p = _param(0.0)
        _set_grad(p, 1.0)
        RMSprop([p], lr=0.1).step()
        assert p.data[0] == pytest.approx(-0.31623, abs=1e-5)
        assert abs(p.data[0] + 0.1 / (math.sqrt(0.1) + 1e-8)) < 1e-15

    def test_two_step_trace(self):
        p = _param(0.0)
        opt = RMSprop([p], lr=0.1)
        theta, acc = 0.0, 0.0
        for _ in range(2):
            _set_grad(p, 1.0)
            opt.step()
            acc = 0.9 * acc + 0.1 * 1.0
            theta = theta - 0.1 * 1.0 / (math.sqrt(acc) + 1e-8)
        assert abs(p.data[0] - theta) < 1e-15
        assert p.grad is None

    def test_lr_zero(self):
        p = _param(2.0)
        _set_grad(p, 5.0)
        RMSprop([p], lr=0.0).step()
        assert p.data[0] == 2.0

    def test_non_finite_gradient(self):
        p = _param(1.0)
        _set_grad(p, np.inf)
        with pytest.raises(T.NonFiniteError):
            RMSprop([p], lr=0.1).step()
        assert p.data[0] == 1.0


class TestAdam:
    def test_zero_gradient(self):
        p = _param(-0.5)
        opt = Adam([p], lr=0.1)
        for _ in range(3):
            _set_grad(p, 0.0)
            opt.step()
        assert p.data[0] == -0.5

    @pytest.mark.parametrize("g", [1e-3, 0.7, -40.0])
    def test_first_step_size(self, g):
        p = _param(0.0)
        _set_grad(p, g)
        Adam([p], lr=0.01).step()
        assert abs(abs(p.data[0]) - 0.01) < 1e-6

    def test_three_step_trace(self):
        p = _param(0.0)
        opt = Adam([p], lr=0.01)
        theta, m, v = 0.0, 0.0, 0.0
        for t, g in enumerate([1.0, 1.0, -1.0], start=1):
            _set_grad(p, g)
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat, vhat = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
            theta -= 0.01 * mhat / (math.sqrt(vhat) + 1e-8)
        assert abs(p.data[0] - theta) < 1e-15

    def test_lr_zero(self):
        p = _param(2.0)
        _set_grad(p, 5.0)
        Adam([p], lr=0.0).step()
        assert p.data[0] == 2.0


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.ratio, c.batch_size, c.pretrain_epochs, c.pretrain_lr) == (0.3, 128, 1000, 3e-4)
        assert (c.alpha, c.finetune_epochs, c.finetune_lr, c.patience) == (1.0, 200, 1e-3, 20)

    @pytest.mark.parametrize("bad", [dict(ratio=1.2), dict(alpha=-1), dict(batch_size=0), dict(pretrain_lr=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 0.1})


class TestPretrain:
    def test_zero_epochs_unchanged(self):
        fm = toy_matrix()
        cfg = TrainConfig(pretrain_epochs=0, seed=3)
        model, log = pretrain(fm, cfg, ModelConfig(M=3, seed=3, **SMALL))
        fresh, _ = pretrain(fm, cfg, ModelConfig(M=3, seed=3, **SMALL))
        assert len(log) == 0
        for name, p in model.params.items():
            assert p.data.tobytes() == fresh[name].data.tobytes()

    def test_deterministic(self):
        fm = toy_matrix()
        cfg = TrainConfig(pretrain_epochs=2, batch_size=16, seed=1, label_assisted=True)
        a, la = pretrain(fm, cfg, ModelConfig(M=3, seed=1, **SMALL))
        b, lb = pretrain(fm, cfg, ModelConfig(M=3, seed=1, **SMALL))
        for name in a.params:
            assert a[name].data.tobytes() == b[name].data.tobytes()
        assert [r.total for r in la.records] == [r.total for r in lb.records]

    def test_finetune_head_untouched(self):
        fm = toy_matrix()
        mc = ModelConfig(M=3, seed=0, **SMALL)
        model, _ = pretrain(fm, TrainConfig(pretrain_epochs=1, batch_size=8, label_assisted=True), mc)
        fresh, _ = pretrain(fm, TrainConfig(pretrain_epochs=0), mc)
        assert model["head_ft.weight"].data.tobytes() == fresh["head_ft.weight"].data.tobytes()
        assert model["head_pre.weight"].data.tobytes() != fresh["head_pre.weight"].data.tobytes()

    def test_label_assisted_needs_labels(self):
        with pytest.raises(ValueError, match="labels"):
            pretrain(toy_matrix(labels=False), TrainConfig(pretrain_epochs=1, label_assisted=True))

    def test_log_fields(self):
        fm = toy_matrix()
        _, log = pretrain(fm, TrainConfig(pretrain_epochs=2, batch_size=16), ModelConfig(M=3, **SMALL))
        assert [r.epoch for r in log.records] == [1, 2]
        assert all(r.cls is None and r.recon_switched is not None for r in log.records)
        _, log = pretrain(fm, TrainConfig(pretrain_epochs=1, batch_size=16, switching=False),
                          ModelConfig(M=3, **SMALL))
        assert log.records[0].recon_switched is None
        assert log.column_names() == ["epoch", "recon_recovered", "cls", "total", "val_metric"]

    def test_targets_are_uncorrupted(self, monkeypatch):
        fm = toy_matrix(n=12)
        seen = []
        real_forward, real_terms = Tr.forward_pair, Tr.recon_terms

        def spy_forward(model, a, b):
            seen.append(("input", a.data.copy()))
            return real_forward(model, a, b)

        def spy_terms(x1, x2, out):
            seen.append(("target", np.array(x1, copy=True)))
            return real_terms(x1, x2, out)

        monkeypatch.setattr(Tr, "forward_pair", spy_forward)
        monkeypatch.setattr(Tr, "recon_terms", spy_terms)
        pretrain(fm, TrainConfig(pretrain_epochs=1, batch_size=4, ratio=1.0), ModelConfig(M=3, **SMALL))
        rows = {r.tobytes() for r in fm.values}
        targets = [v for kind, v in seen if kind == "target"]
        inputs = [v for kind, v in seen if kind == "input"]
        assert targets and all(row.tobytes() in rows for t in targets for row in t)
        # with ratio 1 every input entry was replaced, so inputs differ from targets
        assert any(not np.array_equal(i, t) for i, t in zip(inputs, targets))

    def test_write_csv(self, tmp_path):
        _, log = pretrain(toy_matrix(), TrainConfig(pretrain_epochs=2, batch_size=16),
                          ModelConfig(M=3, **SMALL))
        log.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,recon_recovered,recon_switched,cls,total,val_metric"
        assert len(lines) == 3 and lines[1].startswith("1,")


class TestFinetune:
    def test_separable_reaches_high_accuracy(self):
        rng = np.random.default_rng(0)
        n = 120
        y = np.arange(n) % 2
        x = np.clip(rng.uniform(0, 0.4, size=(n, 4)) + 0.5 * y[:, None], 0, 1)
        fm = FeatureMatrix(x, y, x, task="binary", n_classes=2)
        model = init_model(ModelConfig(M=4, d_model=8, n_layers=1, n_heads=2, d_ff=16))
        tuned, log = finetune(model, fm, TrainConfig(finetune_epochs=200, batch_size=32, finetune_lr=1e-2))
        assert max(r.val_metric for r in log.records) >= 0.95

    def test_returns_best_not_last(self):
        rng = np.random.default_rng(4)
        n = 60
        x = rng.random((n, 3))
        y = rng.integers(0, 2, n)  # pure noise: validation accuracy wanders
        fm = FeatureMatrix(x, y, x, task="binary", n_classes=2)
        val = fm.rows(np.arange(40, 60))
        train_part = fm.rows(np.arange(40))
        model = init_model(ModelConfig(M=3, **SMALL))
        tuned, log = finetune(model, train_part, TrainConfig(finetune_epochs=60, patience=5, batch_size=8,
                                                              finetune_lr=0.05), validation=val)
        scores = [r.val_metric for r in log.records]
        best = max(scores)
        assert scores[-1] < best  # stopped on patience after a decline
        acc = np.mean(predict(tuned, encode(tuned, Tensor(val.values)), "finetune").data.argmax(1) == val.labels)
        assert acc == best

    def test_input_model_not_modified(self):
        model = init_model(ModelConfig(M=3, **SMALL))
        before = model.state()
        finetune(model, toy_matrix(), TrainConfig(finetune_epochs=2, batch_size=16))
        for k, v in before.items():
            assert model[k].data.tobytes() == v.tobytes()

    def test_nothing_to_train(self):
        with pytest.raises(ValueError, match="nothing to train"):
            finetune(init_model(ModelConfig(M=3, **SMALL)), toy_matrix(), TrainConfig(finetune_epochs=0))

    def test_needs_labels(self):
        with pytest.raises(ValueError):
            finetune(init_model(ModelConfig(M=3, **SMALL)), toy_matrix(labels=False), TrainConfig(finetune_epochs=1))

    def test_regression(self):
        rng = np.random.default_rng(0)
        x = rng.random((40, 3))
        y = x.sum(axis=1)
        fm = FeatureMatrix(x, y, x, task="regression", n_classes=None)
        model = init_model(ModelConfig(M=3, task="regression", n_outputs=1, **SMALL))
        _, log = finetune(model, fm, TrainConfig(finetune_epochs=30, batch_size=8, finetune_lr=1e-2))
        assert log.records[-1].cls < log.records[0].cls
        assert all(r.val_metric >= 0 for r in log.records)


def test_backward_then_step_reduces_loss():
    # one optimiser step along the gradient lowers a smooth loss
    fm = toy_matrix(n=8)
    model = init_model(ModelConfig(M=3, **SMALL))
    from switchtab.model import forward_pair

    def loss():
        out = forward_pair(model, Tensor(fm.values[:4]), Tensor(fm.values[4:]))
        return recon_loss(fm.values[:4], fm.values[4:], out)

    before = loss()
    backward(before)
    Adam(model.pretrain_parameters(), lr=1e-3).step()
    assert loss().item() < before.item()
