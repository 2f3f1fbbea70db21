"""Central finite-difference checks for every differentiable operation.

Each case builds a scalar ``sum(op(inputs) * R)`` with a fixed random
projection ``R`` and compares the backward gradient of every input against
central differences computed purely from forward evaluations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import layers as L
from . import losses
from . import tensor as T
from .model import EAANet, I2Fusion, NetworkConfig
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
NOISE_FLOOR = 1e-6


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().item()
        flat[i] = orig - h
        down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NOISE_FLOOR) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are exactly zero (e.g. a conv bias feeding
    straight into batch norm) from turning finite-difference round-off
    (~1e-11) into a relative error of 1.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = STEP) -> float:
    """Largest relative error over ``inputs`` between backward and finite differences."""
    for t in inputs:
        t.grad = None
    T.backward(f())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numerical_grad(f, t, h)))
    return worst


# -- cases -------------------------------------------------------------------------------

Case = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


def _p(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = rng.uniform(low, low + 2.0, size=shape)
    return Tensor(data, requires_grad=True)


def _proj(out: Tensor, rng) -> Tensor:
    return Tensor(rng.normal(size=out.shape))


def _unary(op, low=None) -> Case:
    def case(rng):
        x = _p(rng, 2, 3, 2, 2, low=low)
        r = _proj(op(x), rng)
        return (lambda: T.reduce_sum(T.mul(op(x), r))), [x]
    return case


def _binary(op, bshape=(2, 3, 2, 2)) -> Case:
    def case(rng):
        a, b = _p(rng, 2, 3, 2, 2), _p(rng, *bshape)
        r = _proj(op(a, b), rng)
        return (lambda: T.reduce_sum(T.mul(op(a, b), r))), [a, b]
    return case


def _mean_case(rng):
    x = _p(rng, 2, 3, 4)
    r = _proj(T.reduce_mean(x, axes=(0, 2)), rng)
    return (lambda: T.reduce_sum(T.mul(T.reduce_mean(x, axes=(0, 2)), r))), [x]


def _concat_case(rng):
    a, b = _p(rng, 2, 1, 2, 3), _p(rng, 2, 2, 2, 3)
    r = Tensor(rng.normal(size=(2, 3, 2, 3)))
    return (lambda: T.reduce_sum(T.mul(T.concat([a, b], axis=1), r))), [a, b]


def _conv_case(k: int, stride: int, pad: int, hw: int) -> Case:
    def case(rng):
        x = _p(rng, 2, 2, hw, hw)
        p = L.ConvParams.init(2, 3, k, rng, stride=stride, padding=pad)
        p.bias.data = rng.normal(size=3)
        r = _proj(L.conv2d(x, p), rng)
        return (lambda: T.reduce_sum(T.mul(L.conv2d(x, p), r))), [x, p.weight, p.bias]
    return case


def _tconv_case(rng):
    x = _p(rng, 2, 2, 2, 2)
    p = L.ConvParams.init(2, 3, 3, rng, stride=2, padding=1, transposed=True)
    p.bias.data = rng.normal(size=3)
    r = _proj(L.transposed_conv2d(x, p), rng)
    return (lambda: T.reduce_sum(T.mul(L.transposed_conv2d(x, p), r))), [x, p.weight, p.bias]


def _bn_case(mode: str) -> Case:
    def case(rng):
        x = _p(rng, 2, 3, 3, 3)
        p = L.BatchNormParams(3)
        p.gamma.data = rng.normal(size=3)
        p.beta.data = rng.normal(size=3)
        p.running_mean.data = rng.normal(size=3)
        p.running_var.data = rng.uniform(0.5, 2.0, size=3)
        r = _proj(x, rng)
        return (lambda: T.reduce_sum(T.mul(L.batchnorm(x, p, mode), r))), [x, p.gamma, p.beta]
    return case


def _pool_case(rng):
    x = _p(rng, 2, 2, 4, 4)
    r = Tensor(rng.normal(size=(2, 2, 2, 2)))
    return (lambda: T.reduce_sum(T.mul(L.max_pool2d(x), r))), [x]


def _se_case(rng):
    x = _p(rng, 2, 4, 3, 3)
    p = L.SEParams.init(4, 2, rng)
    r = _proj(x, rng)
    return (lambda: T.reduce_sum(T.mul(L.se_block(x, p), r))), [x, p.reduce_weight, p.expand_weight]


def _i2_case(rng):
    x_bd, x_rd = _p(rng, 2, 4, 2, 2), _p(rng, 2, 2, 2, 2)
    fuse = I2Fusion(4, 2, rng)
    fuse.weight.bias.data = rng.normal(size=4)
    r = _proj(x_bd, rng)
    params = [x_bd, x_rd] + fuse.parameters()
    return (lambda: T.reduce_sum(T.mul(fuse(x_bd, x_rd), r))), params


def _onehot(rng, n=2, k=2, h=2, w=3) -> Tensor:
    cls = rng.integers(0, k, size=(n, h, w))
    return Tensor(np.moveaxis(np.eye(k)[cls], -1, 1))


def _recon_loss_case(fn) -> Case:
    def case(rng):
        pred = _p(rng, 2, 1, 3, 3)
        target = Tensor(rng.normal(size=(2, 1, 3, 3)))
        return (lambda: fn(pred, target)), [pred]
    return case


def _seg_loss_case(fn) -> Case:
    def case(rng):
        scores = _p(rng, 2, 2, 2, 3)
        target = _onehot(rng)
        return (lambda: fn(scores, target)), [scores]
    return case


TOY_CONFIG = NetworkConfig(depth=2, base_channels=2, recon_fraction=0.5, num_classes=2,
                           se_reduction=4, height=8, width=8)


def _end_to_end_case(rng):
    model = EAANet(TOY_CONFIG, seed=int(rng.integers(2**31)))
    xs = [Tensor(rng.uniform(0, 1, size=(1, 1, 8, 8))) for _ in range(3)]
    cls = rng.integers(0, 2, size=(1, 8, 8))
    label = Tensor(np.moveaxis(np.eye(2)[cls], -1, 1))

    def f():
        out = model(*xs)
        return losses.total_loss(out, xs[1], label).total

    return f, model.parameters()


CASES: Dict[str, Tuple[Case, float]] = {
    "add": (_binary(T.add), TOLERANCE),
    "add_broadcast": (_binary(T.add, (1, 3, 1, 1)), TOLERANCE),
    "sub": (_binary(T.sub), TOLERANCE),
    "mul": (_binary(T.mul), TOLERANCE),
    "mul_broadcast": (_binary(T.mul, (2, 3, 1, 1)), TOLERANCE),
    "reduce_mean": (_mean_case, TOLERANCE),
    "concat": (_concat_case, TOLERANCE),
    "power": (_unary(lambda x: T.power(x, 3)), TOLERANCE),
    "abs": (_unary(T.absolute), TOLERANCE),
    "exp": (_unary(T.exp), TOLERANCE),
    "log": (_unary(T.log, low=0.5), TOLERANCE),
    "relu": (_unary(T.relu), TOLERANCE),
    "sigmoid": (_unary(T.sigmoid), TOLERANCE),
    "softmax": (_unary(lambda x: T.softmax(x, axis=1)), TOLERANCE),
    "conv2d_3x3": (_conv_case(3, 1, 1, 3), TOLERANCE),
    "conv2d_1x1": (_conv_case(1, 1, 0, 3), TOLERANCE),
    "conv2d_stride2": (_conv_case(3, 2, 0, 5), TOLERANCE),
    "transposed_conv2d": (_tconv_case, TOLERANCE),
    "batchnorm_train": (_bn_case("train"), TOLERANCE),
    "batchnorm_eval": (_bn_case("eval"), TOLERANCE),
    "max_pool2d": (_pool_case, TOLERANCE),
    "se_block": (_se_case, TOLERANCE),
    "i2_fusion": (_i2_case, TOLERANCE),
    "mae": (_recon_loss_case(losses.mae), TOLERANCE),
    "mse": (_recon_loss_case(losses.mse), TOLERANCE),
    "weighted_ce": (_seg_loss_case(losses.weighted_ce), TOLERANCE),
    "dice_loss": (_seg_loss_case(losses.dice_loss), TOLERANCE),
    "seg_loss": (_seg_loss_case(losses.seg_loss), TOLERANCE),
}

END_TO_END = "end_to_end"


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_case(name: str, trials: int = 1, seed: int = 0) -> CheckResult:
    if name == END_TO_END:
        case, tol = _end_to_end_case, END_TO_END_TOLERANCE
    else:
        case, tol = CASES[name]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        f, inputs = case(rng)
        worst = max(worst, check(f, inputs))
    return CheckResult(name, trials, worst, tol)


def run_suite(trials: int = 100, end_to_end_trials: int = 2, seed: int = 0,
              echo: Callable[[str], None] = None) -> List[CheckResult]:
    results = []
    t0 = time.perf_counter()
    for name in list(CASES) + [END_TO_END]:
        n = end_to_end_trials if name == END_TO_END else trials
        res = run_case(name, n, seed)
        results.append(res)
        if echo:
            status = "PASS" if res.passed else "FAIL"
            echo(f"{status} {name:<20} trials={res.trials:<4} max_rel_err={res.max_error:.2e} "
                 f"(< {res.tolerance:g})")
    if echo:
        echo(f"{sum(r.passed for r in results)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return results
