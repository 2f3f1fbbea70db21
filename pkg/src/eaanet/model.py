"""EAA-Net: basic segmentation, reconstruction and complete segmentation branches.

Dataflow for a target slice ``x_curr`` with neighbours ``x_prev``/``x_next``::

    x_curr ──► basic encoder ──► basic decoder (skips) ──► seg_basic
    [x_prev, x_next] ──► recon encoder ──► recon decoder (no skips) ──► recon
    I2(bottlenecks) ──► complete decoder (+ I2 of each decoder level) ──► seg_complete

Encoder level ``k`` (1-based) works at ``H / 2**(k-1)`` and emits, after
2x2 max pooling, a feature map at ``H / 2**k``. The pre-pool block output is
the skip connection used by the basic decoder at that resolution.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .formats import BadMagicError, FormatError, Reader, seal, verify
from .layers import (
    BatchNormParams,
    ConvParams,
    Module,
    SEParams,
    max_pool2d,
    relu,
    sigmoid,
)
from .tensor import ShapeError, Tensor, add, concat, mul

CHECKPOINT_MAGIC = b"EAAC\x01"


@dataclass
class NetworkConfig:
    depth: int = 3
    base_channels: int = 8
    recon_fraction: float = 0.5
    num_classes: int = 2
    se_reduction: int = 4
    height: int = 32
    width: int = 32
    # "i2" or "identity" (fusion replaced by pass-through of the segmentation features)
    fusion: str = "i2"

    def validate(self) -> "NetworkConfig":
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not 0.0 < self.recon_fraction <= 1.0:
            raise ValueError("recon_fraction must lie in (0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")
        step = 2 ** self.depth
        if self.height % step or self.width % step:
            raise ValueError(f"input {self.height}x{self.width} not divisible by 2**depth = {step}")
        if self.fusion not in ("i2", "identity"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        return self

    def channels(self, level: int) -> int:
        """Basic-branch channels at encoder level ``level`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    def recon_channels(self, level: int) -> int:
        return max(1, int(round(self.channels(level) * self.recon_fraction)))


@dataclass
class EAAOutputs:
    seg_basic: Tensor
    recon: Tensor
    seg_complete: Tensor


# -- building blocks ---------------------------------------------------------------


class EncoBlock(Module):
    """BN -> ReLU -> 3x3 conv, twice, then squeeze-and-excitation."""

    def __init__(self, in_ch: int, out_ch: int, se_reduction: int, rng: np.random.Generator):
        self.bn1 = BatchNormParams(in_ch)
        self.conv1 = ConvParams.init(in_ch, out_ch, 3, rng)
        self.bn2 = BatchNormParams(out_ch)
        self.conv2 = ConvParams.init(out_ch, out_ch, 3, rng)
        self.se = SEParams.init(out_ch, se_reduction, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.conv1(relu(self.bn1(x)))
        x = self.conv2(relu(self.bn2(x)))
        return self.se(x)


class DecoBlock(Module):
    """Transposed-conv upsample, optional skip concat, then BN -> ReLU -> 3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int, skip_ch: int, rng: np.random.Generator):
        self.up = ConvParams.init(in_ch, out_ch, 3, rng, stride=2, padding=1, transposed=True)
        self.bn = BatchNormParams(out_ch + skip_ch)
        self.conv = ConvParams.init(out_ch + skip_ch, out_ch, 3, rng)
        self.skip_ch = skip_ch

    def __call__(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        up = self.up(x)
        if self.skip_ch:
            if skip is None or skip.shape[2:] != up.shape[2:]:
                raise ShapeError(f"skip {None if skip is None else skip.shape} does not match {up.shape}")
            up = concat([up, skip], axis=1)
        return self.conv(relu(self.bn(up)))


class I2Fusion(Module):
    """Soft-attention fusion of segmentation and reconstruction features.

    ``x_ct = W(relu(BN(x_bd * match(x_rd))))`` and the output is
    ``x_bd + sigmoid(x_ct)``. ``match`` is a 1x1 conv lifting the
    reconstruction channels to the segmentation channel count; it is omitted
    when the counts already agree.
    """

    def __init__(self, seg_ch: int, rec_ch: int, rng: np.random.Generator):
        self.match = ConvParams.init(rec_ch, seg_ch, 1, rng) if rec_ch != seg_ch else None
        self.bn = BatchNormParams(seg_ch)
        self.weight = ConvParams.init(seg_ch, seg_ch, 1, rng)

    def __call__(self, x_bd: Tensor, x_rd: Tensor) -> Tensor:
        return i2_fusion(x_bd, x_rd, self.weight, self.bn, self.match)


def i2_fusion(x_bd: Tensor, x_rd: Tensor, w: ConvParams, bn: BatchNormParams,
              match: Optional[ConvParams] = None) -> Tensor:
    if x_bd.shape[0] != x_rd.shape[0] or x_bd.shape[2:] != x_rd.shape[2:]:
        raise ShapeError(f"fusion inputs differ in batch/spatial extent: {x_bd.shape} vs {x_rd.shape}")
    if match is not None:
        x_rd = match(x_rd)
    if x_rd.shape[1] != x_bd.shape[1]:
        raise ShapeError(f"fusion channels differ after matching: {x_bd.shape[1]} vs {x_rd.shape[1]}")
    x_ct = w(relu(bn(mul(x_bd, x_rd))))
    return add(x_bd, sigmoid(x_ct))


class CompleteLevel(Module):
    """``conv(relu(BN(TC(x_prev) + I2(x_bd, x_rd))))``."""

    def __init__(self, in_ch: int, seg_ch: int, rec_ch: int, fusion: str, rng: np.random.Generator):
        self.up = ConvParams.init(in_ch, seg_ch, 3, rng, stride=2, padding=1, transposed=True)
        self.fuse = I2Fusion(seg_ch, rec_ch, rng) if fusion == "i2" else None
        self.bn = BatchNormParams(seg_ch)
        self.conv = ConvParams.init(seg_ch, seg_ch, 3, rng)

    def __call__(self, x_prev: Tensor, x_bd: Tensor, x_rd: Tensor) -> Tensor:
        fused = self.fuse(x_bd, x_rd) if self.fuse is not None else x_bd
        return self.conv(relu(self.bn(add(self.up(x_prev), fused))))


# -- network -----------------------------------------------------------------------


class EAANet(Module):
    """Three-branch segmentation network.

    Parameters are drawn from ``np.random.default_rng(seed)`` in construction
    order, so ``(config, seed)`` fully determines the initial state.
    """

    def __init__(self, config: Optional[NetworkConfig] = None, seed: int = 0):
        cfg = (config or NetworkConfig()).validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        L = cfg.depth
        c = [cfg.channels(k) for k in range(1, L + 1)]
        r = [cfg.recon_channels(k) for k in range(1, L + 1)]

        # basic segmentation branch
        self.basic_enc = [EncoBlock(1 if k == 0 else c[k - 1], c[k], cfg.se_reduction, rng) for k in range(L)]
        # decoder listed deepest first; level k receives c[k] (bottleneck) or c[k+1]
        self.basic_dec = [DecoBlock(c[k] if k == L - 1 else c[k + 1], c[k], c[k], rng)
                          for k in reversed(range(L))]
        self.basic_head = ConvParams.init(c[0], cfg.num_classes, 1, rng)

        # reconstruction branch, narrower and without skips
        self.recon_enc = [EncoBlock(2 if k == 0 else r[k - 1], r[k], cfg.se_reduction, rng) for k in range(L)]
        self.recon_dec = [DecoBlock(r[k] if k == L - 1 else r[k + 1], r[k], 0, rng)
                          for k in reversed(range(L))]
        self.recon_head = ConvParams.init(r[0], 1, 1, rng)

        # complete segmentation branch
        self.bottleneck_fuse = I2Fusion(c[L - 1], r[L - 1], rng) if cfg.fusion == "i2" else None
        self.complete = [CompleteLevel(c[k] if k == L - 1 else c[k + 1], c[k], r[k], cfg.fusion, rng)
                         for k in reversed(range(L))]
        self.complete_head = ConvParams.init(c[0], cfg.num_classes, 1, rng)

    # -- branches --

    def _check_input(self, x: Tensor, channels: int) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"expected [N,{channels},H,W] input, got {x.shape}")
        step = 2 ** cfg.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"input extents {x.shape[2:]} not divisible by {step}")

    @staticmethod
    def _encode(blocks, x: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        skips, feats = [], []
        for block in blocks:
            x = block(x)
            skips.append(x)
            x = max_pool2d(x)
            feats.append(x)
        return feats, skips

    def basic_encoder(self, x_curr: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        """Return pooled features ``x_k^BE`` (k = 1..l) and the pre-pool skip maps."""
        self._check_input(x_curr, 1)
        return self._encode(self.basic_enc, x_curr)

    def basic_decoder(self, feats: List[Tensor], skips: List[Tensor]) -> Tuple[List[Tensor], Tensor]:
        """Return decoder maps ordered by level (index k-1 holds ``x_k^BD``) and seg_basic."""
        L = self.config.depth
        dec = [None] * L
        x = feats[-1]
        for block, k in zip(self.basic_dec, reversed(range(L))):
            x = block(x, skips[k])
            dec[k] = x
        return dec, self.basic_head(x)

    def recon_forward(self, x_prev: Tensor, x_next: Tensor) -> Tuple[List[Tensor], List[Tensor], Tensor]:
        if x_prev.shape != x_next.shape:
            raise ShapeError(f"neighbour slices differ in shape: {x_prev.shape} vs {x_next.shape}")
        x = concat([x_prev, x_next], axis=1)
        self._check_input(x, 2)
        feats, _ = self._encode(self.recon_enc, x)
        L = self.config.depth
        dec = [None] * L
        y = feats[-1]
        for block, k in zip(self.recon_dec, reversed(range(L))):
            y = block(y)
            dec[k] = y
        return feats, dec, sigmoid(self.recon_head(y))

    def complete_forward(self, basic_feats: List[Tensor], basic_dec: List[Tensor],
                         recon_feats: List[Tensor], recon_dec: List[Tensor]) -> Tensor:
        L = self.config.depth
        x = basic_feats[-1]
        if self.bottleneck_fuse is not None:
            x = self.bottleneck_fuse(basic_feats[-1], recon_feats[-1])
        for level, k in zip(self.complete, reversed(range(L))):
            x = level(x, basic_dec[k], recon_dec[k])
        return self.complete_head(x)

    def forward(self, x_prev: Tensor, x_curr: Tensor, x_next: Tensor) -> EAAOutputs:
        if not (x_prev.shape == x_curr.shape == x_next.shape):
            raise ShapeError(f"slice shapes differ: {x_prev.shape}, {x_curr.shape}, {x_next.shape}")
        feats, skips = self.basic_encoder(x_curr)
        bdec, seg_basic = self.basic_decoder(feats, skips)
        rfeats, rdec, recon = self.recon_forward(x_prev, x_next)
        seg_complete = self.complete_forward(feats, bdec, rfeats, rdec)
        return EAAOutputs(seg_basic=seg_basic, recon=recon, seg_complete=seg_complete)

    __call__ = forward

    def forward_basic(self, x_curr: Tensor) -> Tensor:
        """Basic branch only (a plain U-Net); used for the single-task baseline."""
        feats, skips = self.basic_encoder(x_curr)
        return self.basic_decoder(feats, skips)[1]

    def basic_parameters(self) -> list:
        return [p for n, p in self.named_parameters() if n.startswith("basic_")]

    def recon_parameters(self) -> list:
        return [p for n, p in self.named_parameters() if n.startswith("recon_")]

    # -- state --

    def state_records(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, t in self.named_tensors():
            out[name] = t.data
        return out

    def load_state_records(self, records) -> None:
        for name, t in self.named_tensors():
            if name not in records:
                raise KeyError(f"checkpoint lacks tensor {name!r}")
            arr = np.asarray(records[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()


# -- checkpoint format -----------------------------------------------------------------

_FUSION_CODES = {"i2": 0.0, "identity": 1.0}


def config_records(cfg: NetworkConfig) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "fusion":
            value = _FUSION_CODES[value]
        out[f"config/{f.name}"] = np.array([float(value)])
    return out


def config_from_records(records) -> NetworkConfig:
    kwargs = {}
    for f in fields(NetworkConfig):
        value = float(records[f"config/{f.name}"][0])
        if f.name == "fusion":
            kwargs[f.name] = {v: k for k, v in _FUSION_CODES.items()}[value]
        elif f.name == "recon_fraction":
            kwargs[f.name] = value
        else:
            kwargs[f.name] = int(value)
    return NetworkConfig(**kwargs)


def encode_checkpoint(records) -> bytes:
    """Serialise ``name -> array`` records as an ``EAAC\\x01`` byte string."""
    parts = [struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return seal(CHECKPOINT_MAGIC, b"".join(parts))


def decode_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError("not an EAAC checkpoint")
    start = len(CHECKPOINT_MAGIC)
    rd = Reader(buf, start)
    (count,) = rd.unpack("<I")
    records = OrderedDict()
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        records[name] = data
    end = rd.pos
    trailer = rd.take(4)
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} unexpected trailing bytes")
    verify(trailer, buf[start:end])
    return records


def save_checkpoint(path, records) -> None:
    Path(path).write_bytes(encode_checkpoint(records))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())


def model_records(model: EAANet) -> "OrderedDict[str, np.ndarray]":
    out = config_records(model.config)
    out.update(model.state_records())
    return out


def model_from_records(records) -> EAANet:
    model = EAANet(config_from_records(records))
    model.load_state_records(records)
    return model


__all__ = [
    "NetworkConfig",
    "EAAOutputs",
    "EAANet",
    "EncoBlock",
    "DecoBlock",
    "I2Fusion",
    "i2_fusion",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "model_records",
    "model_from_records",
    "config_records",
    "config_from_records",
]
