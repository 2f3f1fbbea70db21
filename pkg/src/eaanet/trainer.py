"""Adam training loop with polynomial learning-rate decay, checkpoints and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import SliceTriplet, Volume, batch_iter, make_triplets, stack_batch
from .losses import LossBundle, check_finite, seg_loss, total_loss
from .metrics import MetricsReport, aggregate, evaluate_volume
from .model import EAANet, NetworkConfig, model_from_records, model_records, save_checkpoint
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "loss_a", "loss_s", "loss_b", "loss_c", "total", "train_dsc")

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    # write a checkpoint every this many epochs; 0 keeps only the final one
    checkpoint_every: int = 0
    out_dir: Optional[str] = None
    # "multitask" trains all branches on the total loss; "basic" trains the
    # basic branch alone on its segmentation loss (single-task baseline)
    mode: str = "multitask"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("multitask", "basic"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        return self


def lr_schedule(epoch: int, total_epochs: int, base_lr: float) -> float:
    """``base_lr * (1 - epoch / total_epochs) ** 0.9``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * (1.0 - epoch / total_epochs) ** 0.9


@dataclass
class OptimState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimState":
        return cls(m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place. ``None`` gradients count as zero."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not len(params) == len(grads) == len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    log: List[dict]
    model: EAANet
    state: OptimState
    checkpoints: List[str] = field(default_factory=list)


def _trainable(model: EAANet, mode: str) -> List[Tuple[str, Tensor]]:
    named = list(model.named_parameters())
    if mode == "basic":
        named = [(n, p) for n, p in named if n.startswith("basic_")]
    return named


def _fg_counts(scores: np.ndarray, label: np.ndarray) -> Tuple[int, int, int]:
    pred = scores.argmax(axis=1) == 1
    gt = label[:, 1] > 0.5
    return int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum())


def training_records(model: EAANet, state: OptimState, names: Sequence[str], epoch: int,
                     cfg: TrainConfig) -> "OrderedDict[str, np.ndarray]":
    rec = model_records(model)
    for n, m, v in zip(names, state.m, state.v):
        rec[f"optim/m/{n}"] = m
        rec[f"optim/v/{n}"] = v
    rec["optim/t"] = np.array([float(state.t)])
    rec["train/epoch"] = np.array([float(epoch)])
    rec["train/epochs"] = np.array([float(cfg.epochs)])
    rec["train/lr"] = np.array([cfg.lr])
    rec["train/seed"] = np.array([float(cfg.seed)])
    rec["train/batch_size"] = np.array([float(cfg.batch_size)])
    rec["train/mode"] = np.array([0.0 if cfg.mode == "multitask" else 1.0])
    return rec


def resume_state(records) -> Tuple[EAANet, OptimState, int]:
    """Rebuild model, optimizer state and completed-epoch count from checkpoint records."""
    model = model_from_records(records)
    mode = "basic" if records.get("train/mode", np.zeros(1))[0] == 1.0 else "multitask"
    names = [n for n, _ in _trainable(model, mode)]
    state = OptimState(m=[records[f"optim/m/{n}"].copy() for n in names],
                       v=[records[f"optim/v/{n}"].copy() for n in names],
                       t=int(records["optim/t"][0]))
    return model, state, int(records["train/epoch"][0])


def train_step(model: EAANet, batch: Sequence[SliceTriplet], params: Sequence[Tensor], state: OptimState,
               lr: float, mode: str = "multitask"):
    """Forward, loss, backward and one Adam update on ``batch``.

    Returns the loss bundle and the scores used for the training DSC.
    """
    xp, xc, xn, lab = stack_batch(batch)
    xc_t, lab_t = Tensor(xc), Tensor(lab)
    for p in params:
        p.grad = None
    if mode == "basic":
        scores = model.forward_basic(xc_t)
        lb = seg_loss(scores, lab_t)
        zero = Tensor([0.0])
        bundle = LossBundle(zero, zero, lb, zero, lb)
    else:
        out = model(Tensor(xp), xc_t, Tensor(xn))
        bundle = total_loss(out, xc_t, lab_t)
        scores = out.seg_complete
    check_finite(bundle)
    backward(bundle.total)
    adam_step(params, [p.grad for p in params], state, lr)
    return bundle, scores.data, lab


def train(model: EAANet, triplets: Sequence[SliceTriplet], cfg: TrainConfig,
          state: Optional[OptimState] = None, start_epoch: int = 0) -> TrainResult:
    """Train ``model`` in place for epochs ``start_epoch .. cfg.epochs - 1``.

    The log holds one row per epoch run with the batch-size-weighted mean of
    each loss term and the foreground DSC of the argmax prediction pooled over
    the epoch's training batches (seg_complete, or seg_basic in basic mode).
    """
    cfg.validate()
    if not triplets:
        raise ValueError("training set is empty")
    named = _trainable(model, cfg.mode)
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = state or OptimState.for_params(params)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    rows, ckpts = [], []
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.lr)
        sums = dict.fromkeys(("loss_a", "loss_s", "loss_b", "loss_c", "total"), 0.0)
        tp = fp = fn = 0
        seen = 0
        for batch in batch_iter(triplets, cfg.batch_size, cfg.seed, epoch):
            bundle, scores, lab = train_step(model, batch, params, state, lr, cfg.mode)
            for k, val in bundle.values().items():
                sums[k] += val * len(batch)
            a, b, c = _fg_counts(scores, lab)
            tp, fp, fn = tp + a, fp + b, fn + c
            seen += len(batch)
        denom = 2 * tp + fp + fn
        row = {"epoch": epoch + 1, "lr": lr, **{k: v / seen for k, v in sums.items()},
               "train_dsc": 1.0 if denom == 0 else 2 * tp / denom}
        rows.append(row)
        log.info("epoch %d lr %.3g total %.4f dsc %.4f", row["epoch"], lr, row["total"], row["train_dsc"])

        last = epoch + 1 == cfg.epochs
        if out_dir and (last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            path = out_dir / ("final.eaac" if last else f"epoch{epoch + 1:04d}.eaac")
            save_checkpoint(path, training_records(model, state, names, epoch + 1, cfg))
            ckpts.append(str(path))

    if out_dir:
        write_log(out_dir / "log.csv", rows)
    return TrainResult(log=rows, model=model, state=state, checkpoints=ckpts)


def write_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in LOG_FIELDS})


def triplets_for(volumes: Sequence[Tuple[str, Volume]], num_classes: int = 2) -> List[SliceTriplet]:
    out = []
    for vid, v in volumes:
        out.extend(make_triplets(v, vid, num_classes))
    return out


# -- inference and evaluation ------------------------------------------------------------


def predict(model: EAANet, volume: Volume, head: str = "complete", batch_size: int = 8) -> np.ndarray:
    """Argmax masks for the interior slices ``1..S-2`` as a ``uint8 [S-2, H, W]`` array.

    Runs with BN in eval mode and restores the previous mode afterwards.
    """
    was_training = model.training
    model.eval()
    try:
        trips = make_triplets(volume, num_classes=model.config.num_classes)
        masks = []
        for batch in batch_iter(trips, batch_size, shuffle_seed=None):
            xp, xc, xn, _ = stack_batch(batch)
            if head == "basic":
                scores = model.forward_basic(Tensor(xc))
            elif head == "complete":
                scores = model(Tensor(xp), Tensor(xc), Tensor(xn)).seg_complete
            else:
                raise ValueError(f"unknown head {head!r}")
            masks.append(scores.data.argmax(axis=1).astype(np.uint8))
        return np.concatenate(masks)
    finally:
        model.train(was_training)


def evaluate(model: EAANet, volumes: Sequence[Tuple[str, Volume]], head: str = "complete",
             standard_vs: bool = False) -> Tuple[List[MetricsReport], MetricsReport]:
    """Per-volume metrics on interior slices plus their field-wise mean."""
    reports = []
    for _, v in volumes:
        pred = predict(model, v, head=head)
        gt = v.labels[1:-1]
        reports.append(evaluate_volume(pred, gt, standard_vs=standard_vs))
    return reports, aggregate(reports)


# -- config files ------------------------------------------------------------------------


def parse_config(text: str) -> Dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def configs_from_mapping(values: Dict[str, str]) -> Tuple[NetworkConfig, TrainConfig]:
    """Split a flat mapping into network and training configs, coercing types."""
    net_kwargs, train_kwargs = {}, {}
    net_fields = {f.name: f for f in fields(NetworkConfig)}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    for key, value in values.items():
        if key in net_fields:
            target, spec = net_kwargs, net_fields[key]
        elif key in train_fields:
            target, spec = train_kwargs, train_fields[key]
        else:
            raise ValueError(f"unknown config key {key!r}")
        target[key] = _coerce(value, spec.default)
    return NetworkConfig(**net_kwargs).validate(), TrainConfig(**train_kwargs).validate()


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def is_finite_report(r: MetricsReport) -> bool:
    vals = [r.dsc, r.sensitivity, r.specificity, r.volume_similarity]
    if r.hd_defined:
        vals += [r.hd, r.hd95]
    return all(math.isfinite(x) for x in vals)
