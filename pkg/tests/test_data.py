import hashlib

import numpy as np
import pytest

from eaanet import data as D
from eaanet.formats import BadMagicError, ChecksumError, FormatError, TruncatedFileError


def _edge_pixels(mask):
    """Foreground pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    padded = np.pad(mask, 1)
    inner = padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(mask & ~inner)


class TestGenerator:
    def test_deterministic(self):
        assert D.gen_synthetic_volume(11) == D.gen_synthetic_volume(11)
        assert D.gen_synthetic_volume(11) != D.gen_synthetic_volume(12)

    @pytest.mark.parametrize("seed,digest", [(0, "cae823ae07cf2caa"), (7, "73f05414ee6e5584"),
                                             (123456789, "2b08f8fb5c58124b")])
    def test_pinned_bytes(self, seed, digest):
        # the generator uses only correctly rounded arithmetic, so these digests hold on every platform
        v = D.gen_synthetic_volume(seed)
        assert hashlib.sha256(v.slices.tobytes() + v.labels.tobytes()).hexdigest()[:16] == digest

    def test_dtypes_and_ranges(self):
        v = D.gen_synthetic_volume(0, S=5, H=16, W=24)
        assert v.shape == (5, 16, 24)
        assert v.slices.dtype == np.float32 and v.labels.dtype == np.uint8
        assert v.slices.min() >= 0 and v.slices.max() <= 1
        assert set(np.unique(v.labels)) == {0, 1}

    def test_foreground_is_brighter(self):
        v = D.gen_synthetic_volume(4)
        fg, bg = v.slices[v.labels == 1].mean(), v.slices[v.labels == 0].mean()
        assert 0.6 < fg < 0.75 and 0.25 < bg < 0.4

    def test_adjacent_iou_and_non_empty_classes(self):
        for seed in range(100):
            labels = D.gen_synthetic_volume(seed).labels.astype(bool)
            for i, m in enumerate(labels):
                assert m.any() and not m.all()
                if i:
                    iou = (m & labels[i - 1]).sum() / (m | labels[i - 1]).sum()
                    assert 0.6 < iou < 1.0, (seed, i, iou)

    def test_changes_concentrate_on_the_edge(self):
        for seed in range(100):
            labels = D.gen_synthetic_volume(seed).labels.astype(bool)
            for i in range(1, len(labels)):
                edge = _edge_pixels(labels[i])
                changed = np.argwhere(labels[i] != labels[i - 1])
                near = sum(min(np.hypot(*(p - e)) for e in edge) <= 2 for p in changed)
                assert near / len(changed) >= 0.9, (seed, i)

    @pytest.mark.parametrize("kwargs", [dict(S=2), dict(H=8)])
    def test_rejects_tiny_volumes(self, kwargs):
        with pytest.raises(ValueError):
            D.gen_synthetic_volume(0, **kwargs)


class TestVolumeFile:
    def test_round_trip_fifty_volumes(self, tmp_path):
        for seed in range(50):
            v = D.gen_synthetic_volume(seed, S=4 + seed % 5, H=16 + 8 * (seed % 3), W=16)
            path = tmp_path / f"{seed}.eaav"
            D.save_volume(v, path)
            back = D.load_volume(path)
            assert back.slices.tobytes() == v.slices.tobytes()
            assert back.labels.tobytes() == v.labels.tobytes()
            assert D.encode_volume(back) == path.read_bytes()

    def test_header_layout(self):
        buf = D.encode_volume(D.gen_synthetic_volume(0, S=3, H=16, W=16))
        assert buf[:5] == b"EAAV\x01"
        assert np.frombuffer(buf[5:17], "<u4").tolist() == [3, 16, 16]
        assert len(buf) == 5 + 12 + 3 * 16 * 16 * 5 + 4

    def test_corruption_errors(self):
        buf = D.encode_volume(D.gen_synthetic_volume(0, S=3, H=16, W=16))
        with pytest.raises(BadMagicError):
            D.decode_volume(b"EAAC\x01" + buf[5:])
        with pytest.raises(TruncatedFileError):
            D.decode_volume(buf[:100])
        flipped = bytearray(buf)
        flipped[40] ^= 0x01
        with pytest.raises(ChecksumError):
            D.decode_volume(bytes(flipped))
        with pytest.raises(FormatError):
            D.decode_volume(buf + b"!")

    def test_load_dir_sorted(self, tmp_path):
        for name in ("b", "a"):
            D.save_volume(D.gen_synthetic_volume(0, S=3, H=16, W=16), tmp_path / f"{name}.eaav")
        assert [vid for vid, _ in D.load_volume_dir(tmp_path)] == ["a", "b"]
        with pytest.raises(FileNotFoundError):
            D.load_volume_dir(tmp_path / "missing")


class TestTriplets:
    def test_interior_slices_only(self):
        v = D.gen_synthetic_volume(2)
        trips = D.make_triplets(v, "v")
        assert [t.index for t in trips] == list(range(1, 11))
        t = trips[0]
        np.testing.assert_array_equal(t.x_prev[0], v.slices[0])
        np.testing.assert_array_equal(t.x_next[0], v.slices[2])
        assert t.label.shape == (2, 32, 32)
        np.testing.assert_array_equal(t.label[1], v.labels[1])
        np.testing.assert_array_equal(t.label.sum(axis=0), 1.0)

    def test_batches_of_four_four_two(self):
        trips = D.make_triplets(D.gen_synthetic_volume(2))
        sizes = [len(b) for b in D.batch_iter(trips, 4, shuffle_seed=0, epoch=0)]
        assert sizes == [4, 4, 2]

    def test_shuffle_depends_on_seed_and_epoch(self):
        trips = D.make_triplets(D.gen_synthetic_volume(2))

        def order(seed, epoch):
            return [t.index for b in D.batch_iter(trips, 4, seed, epoch) for t in b]

        assert order(0, 1) == order(0, 1)
        assert order(0, 1) != order(0, 2)
        assert sorted(order(3, 5)) == list(range(1, 11))
        assert [t.index for b in D.batch_iter(trips, 3, None) for t in b] == list(range(1, 11))

    def test_stack_batch_shapes(self):
        trips = D.make_triplets(D.gen_synthetic_volume(2))
        xp, xc, xn, lab = D.stack_batch(trips[:3])
        assert xp.shape == xc.shape == xn.shape == (3, 1, 32, 32)
        assert lab.shape == (3, 2, 32, 32)

    def test_bad_batching(self):
        with pytest.raises(ValueError):
            next(D.batch_iter([], 4))
        with pytest.raises(ValueError):
            next(D.batch_iter([object()], 0))
