import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from eaanet import losses
from eaanet import tensor as T
from eaanet.gradcheck import run_case
from eaanet.model import EAANet, NetworkConfig
from eaanet.tensor import ShapeError, Tensor


def _onehot(cls, k=2):
    return Tensor(np.moveaxis(np.eye(k)[np.asarray(cls)], -1, 1))


def test_mae_and_mse_hand_values():
    pred, target = Tensor([[1.0, 2.0]]), Tensor([[0.0, 4.0]])
    assert losses.mae(pred, target).item() == 1.5
    assert losses.mse(pred, target).item() == 2.5


def test_reconstruction_losses_reject_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.mae(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))


def test_cross_entropy_single_pixel():
    scores = Tensor(np.array([2.0, 0.0]).reshape(1, 2, 1, 1))
    expected = -math.log(math.exp(2) / (math.exp(2) + 1))
    assert losses.weighted_ce(scores, _onehot([[[0]]])).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1269, abs=1e-4)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_cross_entropy_uniform_is_log_k(k, rng):
    cls = rng.integers(0, k, size=(2, 3, 3))
    ce = losses.weighted_ce(Tensor(np.zeros((2, k, 3, 3))), _onehot(cls, k)).item()
    assert abs(ce - math.log(k)) < 1e-12


def test_seg_loss_weights_ce(rng):
    scores, target = Tensor(rng.normal(size=(2, 2, 3, 3))), _onehot(rng.integers(0, 2, size=(2, 3, 3)))
    expected = 0.4 * losses.weighted_ce(scores, target).item() + losses.dice_loss(scores, target).item()
    assert losses.seg_loss(scores, target).item() == pytest.approx(expected, abs=1e-14)


def test_dice_perfect_prediction():
    cls = np.array([[[0, 1], [1, 0]]])
    scores = Tensor(np.moveaxis(np.eye(2)[cls], -1, 1) * 60.0)
    assert losses.dice_loss(scores, _onehot(cls)).item() < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(2, 2, 3, 4))
    cls = rng.integers(0, 2, size=(2, 3, 4))
    got = losses.dice_loss(Tensor(scores), _onehot(cls)).item()
    p_fg = [1.0 / (1.0 + math.exp(a - b)) for a, b in zip(scores[:, 0].ravel(), scores[:, 1].ravel())]
    assert got == pytest.approx(oracles.soft_dice_loss(p_fg, list(cls.ravel().astype(float))), abs=1e-12)


def test_not_onehot_rejected():
    with pytest.raises(ValueError):
        losses.weighted_ce(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones((1, 2, 1, 1))))


@pytest.mark.parametrize("case", ["mae", "mse", "weighted_ce", "dice_loss", "seg_loss"])
def test_gradients(case):
    assert run_case(case, trials=20).passed


class TestTotalLoss:
    cfg = NetworkConfig(depth=1, base_channels=2, height=8, width=8)

    def _batch(self, rng):
        xs = [Tensor(rng.uniform(0, 1, size=(2, 1, 8, 8))) for _ in range(3)]
        return xs, _onehot(rng.integers(0, 2, size=(2, 8, 8)))

    def test_bundle_total_is_sum(self, rng):
        xs, label = self._batch(rng)
        b = losses.total_loss(EAANet(self.cfg)(*xs), xs[1], label)
        assert abs(b.total.item() - (b.loss_a.item() + b.loss_s.item() + b.loss_b.item() + b.loss_c.item())) < 1e-12
        assert set(b.values()) == {"loss_a", "loss_s", "loss_b", "loss_c", "total"}

    def test_gradient_of_total_is_sum_of_term_gradients(self, rng):
        xs, label = self._batch(rng)
        model = EAANet(self.cfg)
        params = model.parameters()

        def grads(select):
            model.zero_grad()
            T.backward(select(losses.total_loss(model(*xs), xs[1], label)))
            return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

        total = grads(lambda b: b.total)
        parts = [grads(lambda b, n=n: getattr(b, n)) for n in ("loss_a", "loss_s", "loss_b", "loss_c")]
        for i, g in enumerate(total):
            np.testing.assert_allclose(g, sum(part[i] for part in parts), atol=1e-10)

    def test_check_finite_names_the_term(self):
        one = Tensor([1.0])
        bundle = losses.LossBundle(one, Tensor([math.nan]), one, one, one)
        with pytest.raises(FloatingPointError, match="loss_s"):
            losses.check_finite(bundle)
