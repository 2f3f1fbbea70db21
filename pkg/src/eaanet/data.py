"""Synthetic slice volumes, the ``EAAV`` volume file format and triplet batching.

Each synthetic volume holds one ellipse per slice whose centre, semi-axes and
rotation follow a small random walk along the slice axis, so neighbouring
labels overlap heavily and differ only near the boundary.

Randomness comes from numpy's ``PCG64`` bit generator seeded directly with
the integer volume seed; its output stream is fixed by the algorithm, not
the platform. Everything downstream of the raw uniforms uses only correctly
rounded arithmetic (+, -, *, /, sqrt): the noise is an Irwin-Hall sum of
uniforms and rotations use the rational half-angle form, so no libm
transcendental can make two platforms disagree.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .formats import BadMagicError, FormatError, Reader, seal, verify

VOLUME_MAGIC = b"EAAV\x01"

FG_INTENSITY = 0.7
BG_INTENSITY = 0.3
NOISE_SIGMA = 0.05
# per-slice random-walk step bounds, as fractions of the spatial extent
CENTER_STEP = 0.025
AXIS_STEP = 0.02
# bound on tan(half the per-slice rotation); 0.06 is about 0.12 rad of rotation
HALF_ANGLE_STEP = 0.06
AXIS_RANGE = (0.16, 0.32)
CENTER_RANGE = (0.35, 0.65)


@dataclass
class Volume:
    slices: np.ndarray  # float32 [S, H, W] in [0, 1]
    labels: np.ndarray  # uint8 [S, H, W] in {0, 1}
    seed: Optional[int] = None

    def __post_init__(self):
        if self.slices.ndim != 3 or self.slices.shape != self.labels.shape:
            raise ValueError(f"slices {self.slices.shape} and labels {self.labels.shape} must be equal 3-D shapes")
        if self.slices.shape[0] < 3:
            raise ValueError("a volume needs at least 3 slices")

    @property
    def shape(self):
        return self.slices.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.slices.dtype == other.slices.dtype
                and np.array_equal(self.slices, other.slices)
                and np.array_equal(self.labels, other.labels))


@dataclass
class SliceTriplet:
    x_prev: np.ndarray  # [1, H, W]
    x_curr: np.ndarray
    x_next: np.ndarray
    label: np.ndarray  # one-hot [K, H, W]
    volume_id: str
    index: int


def _rotation(t: float) -> tuple:
    """``(cos, sin)`` of the angle ``2 * atan(t)`` using only rational arithmetic."""
    d = 1.0 + t * t
    return (1.0 - t * t) / d, 2.0 * t / d


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ay: float, ax: float, c: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return (u * u + v * v) <= 1.0


def _unit_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Approximately standard-normal noise: sum of 12 uniforms minus 6 (mean 0, variance 1)."""
    return rng.random((12,) + tuple(shape)).sum(axis=0) - 6.0


def gen_synthetic_volume(seed: int, S: int = 12, H: int = 32, W: int = 32) -> Volume:
    """Generate a deterministic ``S x H x W`` volume for ``seed``."""
    if S < 3:
        raise ValueError("S must be >= 3")
    if H < 16 or W < 16:
        raise ValueError("H and W must be >= 16")
    rng = np.random.Generator(np.random.PCG64(seed))
    ext = min(H, W)

    cy = rng.uniform(*CENTER_RANGE) * H
    cx = rng.uniform(*CENTER_RANGE) * W
    ay = rng.uniform(*AXIS_RANGE) * ext
    ax = rng.uniform(*AXIS_RANGE) * ext
    # t in (-1, 1) spans (-pi/2, pi/2), which covers every ellipse orientation
    c, s = _rotation(rng.uniform(-1.0, 1.0))

    masks = [_ellipse_mask(H, W, cy, cx, ay, ax, c, s)]
    while len(masks) < S:
        ncy = np.clip(cy + rng.uniform(-CENTER_STEP, CENTER_STEP) * H, CENTER_RANGE[0] * H, CENTER_RANGE[1] * H)
        ncx = np.clip(cx + rng.uniform(-CENTER_STEP, CENTER_STEP) * W, CENTER_RANGE[0] * W, CENTER_RANGE[1] * W)
        nay = np.clip(ay + rng.uniform(-AXIS_STEP, AXIS_STEP) * ext, AXIS_RANGE[0] * ext, AXIS_RANGE[1] * ext)
        nax = np.clip(ax + rng.uniform(-AXIS_STEP, AXIS_STEP) * ext, AXIS_RANGE[0] * ext, AXIS_RANGE[1] * ext)
        dc, ds = _rotation(rng.uniform(-HALF_ANGLE_STEP, HALF_ANGLE_STEP))
        nc, ns = c * dc - s * ds, s * dc + c * ds
        norm = np.sqrt(nc * nc + ns * ns)
        nc, ns = nc / norm, ns / norm
        m = _ellipse_mask(H, W, ncy, ncx, nay, nax, nc, ns)
        # redraw until the slice actually moves
        if np.array_equal(m, masks[-1]):
            continue
        cy, cx, ay, ax, c, s = ncy, ncx, nay, nax, nc, ns
        masks.append(m)

    labels = np.stack(masks).astype(np.uint8)
    base = np.where(labels == 1, FG_INTENSITY, BG_INTENSITY)
    noisy = base + NOISE_SIGMA * _unit_noise(rng, base.shape)
    blurred = uniform_filter(noisy, size=(1, 3, 3), mode="nearest")
    slices = np.clip(blurred, 0.0, 1.0).astype(np.float32)
    return Volume(slices=slices, labels=labels, seed=seed)


# -- EAAV file format --------------------------------------------------------------


def encode_volume(v: Volume) -> bytes:
    s, h, w = v.shape
    payload = (struct.pack("<3I", s, h, w)
               + np.ascontiguousarray(v.slices, dtype="<f4").tobytes()
               + np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes())
    return seal(VOLUME_MAGIC, payload)


def decode_volume(buf: bytes) -> Volume:
    if buf[:len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise BadMagicError("not an EAAV volume file")
    start = len(VOLUME_MAGIC)
    rd = Reader(buf, start)
    s, h, w = rd.unpack("<3I")
    n = s * h * w
    slices = np.frombuffer(rd.take(4 * n), dtype="<f4").astype(np.float32).reshape(s, h, w)
    labels = np.frombuffer(rd.take(n), dtype=np.uint8).reshape(s, h, w).copy()
    end = rd.pos
    trailer = rd.take(4)
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} unexpected trailing bytes")
    verify(trailer, buf[start:end])
    return Volume(slices=slices, labels=labels)


def save_volume(v: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(v))


def load_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


def load_volume_dir(directory) -> List[tuple]:
    """Load every ``*.eaav`` file in ``directory`` sorted by name as ``(stem, Volume)``."""
    paths = sorted(Path(directory).glob("*.eaav"))
    if not paths:
        raise FileNotFoundError(f"no .eaav volumes in {directory}")
    return [(p.stem, load_volume(p)) for p in paths]


# -- triplets and batches ------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """``[..., H, W]`` integer labels -> ``[..., K, H, W]`` float one-hot."""
    eye = np.eye(num_classes)
    return np.moveaxis(eye[labels.astype(np.int64)], -1, -3)


def make_triplets(v: Volume, volume_id: str = "", num_classes: int = 2) -> List[SliceTriplet]:
    """One triplet per interior slice ``1 <= i <= S-2``."""
    s = v.shape[0]
    if s < 3:
        raise ValueError("need at least 3 slices to form a triplet")
    img = v.slices.astype(np.float64)
    return [
        SliceTriplet(
            x_prev=img[i - 1][None],
            x_curr=img[i][None],
            x_next=img[i + 1][None],
            label=one_hot(v.labels[i], num_classes),
            volume_id=volume_id,
            index=i,
        )
        for i in range(1, s - 1)
    ]


def batch_iter(triplets: Sequence[SliceTriplet], batch_size: int, shuffle_seed: Optional[int] = 0,
               epoch: int = 0) -> Iterator[List[SliceTriplet]]:
    """Yield shuffled batches; the order depends only on ``shuffle_seed + epoch``.

    ``shuffle_seed=None`` keeps the input order. The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not triplets:
        raise ValueError("no triplets to batch")
    order = np.arange(len(triplets))
    if shuffle_seed is not None:
        order = np.random.Generator(np.random.PCG64(shuffle_seed + epoch)).permutation(len(triplets))
    for start in range(0, len(order), batch_size):
        yield [triplets[i] for i in order[start:start + batch_size]]


def stack_batch(batch: Sequence[SliceTriplet]):
    """Stack a batch into ``(x_prev, x_curr, x_next, label)`` arrays with a leading N axis."""
    return tuple(np.stack([getattr(t, f) for t in batch]) for f in ("x_prev", "x_curr", "x_next", "label"))
