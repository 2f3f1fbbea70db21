import math

import numpy as np
import pytest

from eaanet import data as D
from eaanet import losses
from eaanet import trainer as TR
from eaanet.model import EAANet, NetworkConfig, load_checkpoint
from eaanet.tensor import Tensor

TINY = NetworkConfig(depth=1, base_channels=2, height=16, width=16)


@pytest.fixture(scope="module")
def triplets():
    vols = [(f"v{i}", D.gen_synthetic_volume(50 + i, S=5, H=16, W=16)) for i in range(2)]
    return TR.triplets_for(vols)


def _snapshot(params):
    return [p.data.copy() for p in params]


class TestSchedule:
    def test_decays_to_zero(self):
        assert TR.lr_schedule(0, 10, 0.5) == 0.5
        assert TR.lr_schedule(10, 10, 0.5) == 0.0
        values = [TR.lr_schedule(i, 10, 1.0) for i in range(11)]
        assert values == sorted(values, reverse=True)

    @pytest.mark.parametrize("epoch", [-1, 11])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            TR.lr_schedule(epoch, 10, 1.0)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self, rng):
        p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        before = p.data.copy()
        state = TR.OptimState.for_params([p])
        for _ in range(3):
            TR.adam_step([p], [None], state, 1e-2)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_moves_by_lr_times_sign(self, rng):
        p = Tensor(rng.normal(size=5), requires_grad=True)
        g = rng.normal(size=5)
        before = p.data.copy()
        TR.adam_step([p], [g], TR.OptimState.for_params([p]), 1e-3)
        np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-6)

    def test_matches_scalar_recurrence(self):
        p = Tensor([1.0], requires_grad=True)
        state = TR.OptimState.for_params([p])
        x, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.3, -0.1, 0.7, 0.2], start=1):
            TR.adam_step([p], [np.array([g])], state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.item() == pytest.approx(x, abs=1e-15)
        assert state.t == 4

    def test_rejects_bad_input(self, rng):
        p = Tensor(np.zeros(2), requires_grad=True)
        state = TR.OptimState.for_params([p])
        with pytest.raises(ValueError):
            TR.adam_step([p], [np.zeros(3)], state, 1e-3)
        with pytest.raises(ValueError):
            TR.adam_step([p], [np.zeros(2)], state, 0.0)


class TestTraining:
    def test_single_small_step_lowers_loss(self, triplets):
        model = EAANet(TINY, seed=1)
        batch = triplets[:4]
        xp, xc, xn, lab = (Tensor(a) for a in D.stack_batch(batch))

        def loss():
            return losses.total_loss(model(xp, xc, xn), xc, lab).total.item()

        before = loss()
        params = model.parameters()
        TR.train_step(model, batch, params, TR.OptimState.for_params(params), 1e-6)
        assert loss() < before

    def test_log_rows_and_fields(self, triplets):
        res = TR.train(EAANet(TINY), triplets, TR.TrainConfig(epochs=3, lr=1e-2))
        assert [r["epoch"] for r in res.log] == [1, 2, 3]
        assert set(res.log[0]) == set(TR.LOG_FIELDS)
        for r in res.log:
            assert r["total"] == pytest.approx(r["loss_a"] + r["loss_s"] + r["loss_b"] + r["loss_c"], abs=1e-12)
            assert 0.0 <= r["train_dsc"] <= 1.0

    def test_same_seed_same_log(self, triplets):
        cfg = TR.TrainConfig(epochs=2, lr=1e-2, seed=4)
        a = TR.train(EAANet(TINY, seed=4), triplets, cfg)
        b = TR.train(EAANet(TINY, seed=4), triplets, cfg)
        assert a.log == b.log

    def test_resume_is_bit_exact(self, triplets, tmp_path):
        cfg = TR.TrainConfig(epochs=4, lr=1e-2, checkpoint_every=2, out_dir=str(tmp_path / "full"))
        full = TR.train(EAANet(TINY), triplets, cfg)
        assert [p.rsplit("/", 1)[-1] for p in full.checkpoints] == ["epoch0002.eaac", "final.eaac"]

        model, state, start = TR.resume_state(load_checkpoint(full.checkpoints[0]))
        assert start == 2
        rest = TR.train(model, triplets, TR.TrainConfig(epochs=4, lr=1e-2), state=state, start_epoch=start)
        assert rest.log == full.log[2:]
        for (_, a), (_, b) in zip(full.model.named_tensors(), rest.model.named_tensors()):
            assert a.data.tobytes() == b.data.tobytes()
        assert (tmp_path / "full" / "log.csv").read_text().count("\n") == 5

    def test_basic_mode_trains_only_basic_branch(self, triplets):
        model = EAANet(TINY)
        others = [p for n, p in model.named_parameters() if not n.startswith("basic_")]
        basic = model.basic_parameters()
        frozen, moving = _snapshot(others), _snapshot(basic)
        res = TR.train(model, triplets, TR.TrainConfig(epochs=1, lr=1e-2, mode="basic"))
        for p, before in zip(others, frozen):
            np.testing.assert_array_equal(p.data, before)
        assert any(not np.array_equal(p.data, b) for p, b in zip(basic, moving))
        assert res.log[0]["loss_a"] == 0.0 and res.log[0]["total"] == res.log[0]["loss_b"]

    def test_identity_fusion_ablation_learns(self, triplets):
        cfg = NetworkConfig(depth=1, base_channels=2, height=16, width=16, fusion="identity")
        res = TR.train(EAANet(cfg), triplets, TR.TrainConfig(epochs=8, lr=1e-2))
        assert res.log[-1]["total"] < res.log[0]["total"]

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            TR.train(EAANet(TINY), [], TR.TrainConfig(epochs=1))

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=0.0), dict(batch_size=0), dict(mode="x")])
    def test_invalid_train_config(self, bad):
        with pytest.raises(ValueError):
            TR.TrainConfig(**bad).validate()


class TestInference:
    def test_predict_shape_and_mode_restored(self):
        model = EAANet(TINY)
        vol = D.gen_synthetic_volume(0, S=6, H=16, W=16)
        for head in ("complete", "basic"):
            mask = TR.predict(model, vol, head=head)
            assert mask.shape == (4, 16, 16) and mask.dtype == np.uint8
        assert model.training
        with pytest.raises(ValueError):
            TR.predict(model, vol, head="recon")

    def test_evaluate_is_finite_even_for_untrained_model(self):
        vols = [(f"v{i}", D.gen_synthetic_volume(i, S=5, H=16, W=16)) for i in range(3)]
        for seed in range(3):
            reports, mean = TR.evaluate(EAANet(TINY, seed=seed), vols)
            assert len(reports) == 3
            assert all(TR.is_finite_report(r) for r in reports)
            assert 0.0 <= mean.dsc <= 1.0


class TestConfigFile:
    def test_parse_and_split(self):
        text = "# tiny run\ndepth = 2\nbase_channels=4\nrecon_fraction = 0.25\nlr = 0.01  # faster\nmode = basic\n"
        net, train = TR.configs_from_mapping(TR.parse_config(text))
        assert (net.depth, net.base_channels, net.recon_fraction) == (2, 4, 0.25)
        assert (train.lr, train.mode, train.epochs) == (0.01, "basic", 60)

    def test_errors(self):
        with pytest.raises(ValueError):
            TR.parse_config("depth 3")
        with pytest.raises(ValueError):
            TR.configs_from_mapping({"width_multiplier": "2"})
        with pytest.raises(ValueError):
            TR.configs_from_mapping({"depth": "0"})
