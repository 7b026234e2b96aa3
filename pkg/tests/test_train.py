import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from onenet import train
from onenet.config import TrainConfig
from onenet.data import load_bundle
from onenet.errors import ConfigError, NumericError
from onenet.metrics import read_csv
from onenet.model import load_checkpoint, strip
from toydata import cfg, synthetic


@pytest.fixture(scope="module")
def data():
    return synthetic()


class TestSchedule:
    @pytest.mark.parametrize("tau,epoch,lr", [
        (300, 0, 0.1), (300, 149, 0.1), (300, 150, 0.01), (300, 224, 0.01), (300, 225, 0.001),
        (40, 19, 0.1), (40, 20, 0.01), (40, 30, 0.001),
    ])
    def test_breakpoints(self, tau, epoch, lr):
        assert train.lr_at(epoch, TrainConfig(epochs=tau)) == pytest.approx(lr)

    def test_four_epochs(self):
        c = TrainConfig(epochs=4)
        assert [train.lr_at(e, c) for e in range(4)] == pytest.approx([0.1, 0.1, 0.01, 0.001])

    @given(st.integers(1, 400))
    def test_non_increasing(self, tau):
        c = TrainConfig(epochs=tau)
        lrs = [train.lr_at(e, c) for e in range(tau)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[0] == 0.1

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            train.lr_at(5, TrainConfig(epochs=5))


def nesterov_oracle(w, grads, lr, mu, wd):
    """Scalar loop over the update rule, independent of the vectorised optimiser."""
    w = list(map(float, w))
    v = [0.0] * len(w)
    for g in grads:
        for i in range(len(w)):
            d = g[i] + wd * w[i]
            v[i] = mu * v[i] + d
            w[i] = w[i] - lr * (d + mu * v[i])
    return w


class TestNesterov:
    def test_momentum_free_is_plain_sgd(self):
        w = np.array([1.0, -2.0])
        g = np.array([0.5, 0.25])
        train.sgd_nesterov_step([w], [g], [np.zeros(2)], 0.1, 0.0, 0.0)
        np.testing.assert_allclose(w, [0.95, -2.025], rtol=1e-15)

    def test_two_constant_steps_hand_iterated(self):
        g = np.array([1.0, -2.0, 0.5])
        w = np.zeros(3)
        v = np.zeros(3)
        for _ in range(2):
            train.sgd_nesterov_step([w], [g.copy()], [v], 0.1, 0.9, 0.0)
        # step 1: v = g, w -= 0.1 * 1.9 g; step 2: v = 1.9 g, w -= 0.1 * (1 + 0.9 * 1.9) g
        np.testing.assert_allclose(w, -(0.19 + 0.271) * g, rtol=1e-14)
        np.testing.assert_allclose(w, nesterov_oracle([0, 0, 0], [g, g], 0.1, 0.9, 0.0), rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle_with_weight_decay(self, seed):
        r = np.random.default_rng(seed)
        w0 = r.standard_normal(4)
        grads = [r.standard_normal(4) for _ in range(6)]
        w, v = w0.copy(), np.zeros(4)
        for g in grads:
            train.sgd_nesterov_step([w], [g], [v], 0.05, 0.9, 5e-4)
        np.testing.assert_allclose(w, nesterov_oracle(w0, grads, 0.05, 0.9, 5e-4), rtol=1e-12)

    def test_zero_gradient_zero_velocity_unchanged(self):
        w = np.array([1.5, -0.5])
        train.sgd_nesterov_step([w], [np.zeros(2)], [np.zeros(2)], 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(w, [1.5, -0.5])

    def test_nan_gradient_aborts_with_diagnostics(self):
        w = np.ones(3)
        with pytest.raises(NumericError) as exc:
            train.sgd_nesterov_step([w], [np.array([0.0, np.nan, 1.0])], [np.zeros(3)], 0.1, 0.9, 0.0,
                                    names=["layer.weight"])
        assert exc.value.diagnostics["param"] == "layer.weight"
        assert exc.value.diagnostics["nan"] == 1
        np.testing.assert_array_equal(w, np.ones(3))


class TestTrainOne:
    def test_zero_lr_keeps_parameters(self, data):
        c = cfg(epochs=1, base_lr=0.0)
        before = train.build_for(c, data)
        res = train.train_one(c, data)
        for (n, p), (_, q) in zip(res.model.named_parameters(), before.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
        heads = {r.head for r in res.metrics}
        assert heads == {"branch0", "branch1", "branch2", "teacher"}
        assert {r.phase for r in res.metrics} == {"train", "test"}
        assert all(0 <= r.top1_error <= 100 and 0 <= r.top5_error <= 100 for r in res.metrics)

    def test_deterministic_checkpoints_and_metrics(self, data, tmp_path):
        c = cfg()
        train.train_one(c, data, tmp_path / "a")
        train.train_one(c, data, tmp_path / "b")
        for name in ("final.ckpt", "metrics.csv", "metrics.jsonl", "checkpoints/epoch_0002.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        c = cfg(epochs=4, checkpoint_every=2)
        train.train_one(c, data, tmp_path / "full")
        half = c.replace(epochs=4)
        # interrupted run: same config, stopped after epoch 2 by copying its checkpoint
        ck = tmp_path / "full" / "checkpoints" / "epoch_0002.ckpt"
        res = train.train_one(half, data, tmp_path / "resumed", resume=ck)
        assert (tmp_path / "resumed" / "final.ckpt").read_bytes() == \
            (tmp_path / "full" / "final.ckpt").read_bytes()
        full_rows = [r for r in read_csv(tmp_path / "full" / "metrics.csv") if r["epoch"] >= 2]
        assert read_csv(tmp_path / "resumed" / "metrics.csv") == full_rows
        assert min(r.epoch for r in res.metrics) == 2

    def test_resume_in_same_directory_rewrites_tail(self, data, tmp_path):
        c = cfg(epochs=4, checkpoint_every=2)
        train.train_one(c, data, tmp_path / "run")
        reference = (tmp_path / "run" / "metrics.csv").read_bytes()
        train.train_one(c, data, tmp_path / "run", resume=tmp_path / "run" / "checkpoints" / "epoch_0002.ckpt")
        assert (tmp_path / "run" / "metrics.csv").read_bytes() == reference

    def test_checkpoint_records_next_epoch_and_config(self, data, tmp_path):
        c = cfg(epochs=2)
        train.train_one(c, data, tmp_path)
        ck = load_checkpoint(tmp_path / "final.ckpt")
        assert ck.header["extra"]["next_epoch"] == 2
        assert ck.header["extra"]["config"] == c.to_dict()
        assert any(k.startswith("opt.") for k in ck.state)

    def test_dataset_architecture_mismatch(self):
        bad = synthetic(classes=3)
        net = train.build_for(cfg(), synthetic())
        with pytest.raises(ConfigError):
            train._fit(net, cfg(), bad, lambda *a: None, 1)

    @pytest.mark.parametrize("flag", ["no_distill", "no_sharing", "no_gating", "kl_backprop_teacher"])
    def test_ablation_flags_run(self, data, flag):
        res = train.train_one(cfg(epochs=1, **{flag: True}), data)
        train_rows = [r for r in res.metrics if r.phase == "train"]
        if flag == "no_distill":
            assert all(r.kl == 0.0 for r in train_rows)
        else:
            assert all(r.kl > 0 for r in train_rows)


class TestBaselines:
    def test_vanilla_matches_branch_metric_computation(self, data):
        res = train.train_one(cfg(), data)
        single = strip(res.model)
        ev_full = train.evaluate(res.model, data.test)["branch0"]
        ev_single = train.evaluate(single, data.test)["net"]
        assert ev_full == ev_single
        assert train.final_test_error(res.metrics, "branch0") == ev_full["top1"]

    def test_vanilla_loss_decreases_on_desk_data(self):
        d = load_bundle("mnist", train_subset=600, test_subset=200)
        res = train.train_vanilla(TrainConfig(epochs=3, batch_size=64), d)
        ce = [r.ce for r in res.metrics if r.phase == "train"]
        assert ce[2] < ce[1] < ce[0]

    def test_vanilla_starts_from_one_target_init(self, data):
        c = cfg(epochs=1, base_lr=0.0)
        one = strip(train.train_one(c, data).model)
        van = train.train_vanilla(c, data).model
        for (_, p), (_, q) in zip(one.named_parameters(), van.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_kd_cost_exceeds_vanilla(self, data, tmp_path):
        c = cfg()
        kd = train.train_kd_offline(c, c, data, tmp_path)
        van = train.train_vanilla(c, data)
        assert kd.train_flops > van.train_flops
        assert (tmp_path / "teacher" / "final.ckpt").is_file()
        assert (tmp_path / "student" / "metrics.csv").is_file()
        assert {r.head for r in kd.metrics} == {"net"}
        assert any(r.kl > 0 for r in kd.metrics if r.phase == "train")

    def test_single_member_ensemble_is_vanilla(self, data):
        c = cfg()
        ens = train.train_indep_ensemble(c, 1, data)
        van = train.train_vanilla(c, data)
        for (_, p), (_, q) in zip(ens.model[0].named_parameters(), van.model.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
        member = [r for r in ens.metrics if r.head == "member0"]
        assert [(r.epoch, r.phase, r.top1_error, r.ce) for r in member] == \
            [(r.epoch, r.phase, r.top1_error, r.ce) for r in van.metrics]
        ensemble_row = [r for r in ens.metrics if r.head == "ensemble"]
        assert ensemble_row[0].top1_error == train.final_test_error(van.metrics, "net")

    def test_ensemble_cost_scales_with_members(self, data, tmp_path):
        c = cfg(epochs=1)
        ens = train.train_indep_ensemble(c, 3, data, tmp_path)
        van = train.train_vanilla(c, data)
        assert ens.train_flops == 3 * van.train_flops
        assert len(ens.model) == 3
        assert (tmp_path / "member2" / "final.ckpt").is_file()
        rows = read_csv(tmp_path / "metrics.csv")
        assert {r["head"] for r in rows} == {"member0", "member1", "member2", "ensemble"}

    def test_ensemble_needs_members(self, data):
        with pytest.raises(ConfigError):
            train.train_indep_ensemble(cfg(), 0, data)
