import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pseudoris.errors import CorruptDataError, ShapeError, UsageError
from pseudoris.maskops import (RLE, BinaryMask, CropSpec, Image, crop, crop_box_for, iou,
                               reduce_masks, rle_decode, rle_encode)


def box_mask(h, w, x0, y0, x1, y1):
    bits = np.zeros((h, w), dtype=bool)
    bits[y0:y1 + 1, x0:x1 + 1] = True
    return BinaryMask(bits)


def reference_counts(bits):
    """Column-major run lengths by plain iteration, starting with zeros."""
    counts, current, run = [], False, 0
    for v in bits.T.ravel().tolist():
        if v == current:
            run += 1
        else:
            counts.append(run)
            current, run = v, 1
    counts.append(run)
    return counts


def reference_reduce(fine, coarse):
    picked = []
    for c in coarse:
        best, best_iou = None, -1.0
        for j, f in enumerate(fine):
            inter = int(np.sum(c.bits & f.bits))
            union = int(np.sum(c.bits | f.bits))
            v = inter / union if union else 0.0
            if v > best_iou:
                best, best_iou = j, v
        if best not in picked:
            picked.append(best)
    return picked


mask_arrays = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(lambda w: arrays(bool, (h, w))))


class TestIoU:
    def test_identity_and_disjoint(self):
        a = box_mask(4, 4, 0, 0, 1, 3)
        b = box_mask(4, 4, 2, 0, 3, 3)
        assert iou(a, a) == 1.0
        assert iou(a, b) == 0.0

    def test_half(self):
        assert iou(box_mask(4, 4, 0, 0, 1, 3), box_mask(4, 4, 0, 0, 3, 3)) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            iou(box_mask(4, 4, 0, 0, 1, 1), box_mask(5, 4, 0, 0, 1, 1))

    @given(mask_arrays, st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_identity(self, bits, rnd):
        a = BinaryMask(bits)
        other = np.array([rnd.random() < 0.5 for _ in range(bits.size)]).reshape(bits.shape)
        b = BinaryMask(other)
        assert iou(a, b) == iou(b, a)
        if a.area:
            assert (iou(a, b) == 1.0) == bool(np.array_equal(a.bits, b.bits))


class TestReduceMasks:
    def test_empty_coarse(self):
        assert reduce_masks([box_mask(4, 4, 0, 0, 1, 1)], []) == []

    def test_dedup_on_6x6(self):
        fine = [box_mask(6, 6, 0, 0, 1, 1), box_mask(6, 6, 0, 0, 3, 3),
                box_mask(6, 6, 4, 4, 5, 5)]
        coarse = [box_mask(6, 6, 0, 0, 3, 2), box_mask(6, 6, 0, 0, 4, 4)]
        out = reduce_masks(fine, coarse)
        assert len(out) == 1 and out[0] is fine[1]

    def test_tie_goes_to_lowest_index(self):
        fine = [box_mask(4, 4, 0, 0, 1, 3), box_mask(4, 4, 2, 0, 3, 3)]
        out = reduce_masks(fine, [box_mask(4, 4, 0, 0, 3, 3)])
        assert out[0] is fine[0]

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            fine = [BinaryMask(rng.random((8, 8)) < 0.4) for _ in range(int(rng.integers(1, 10)))]
            coarse = [BinaryMask(rng.random((8, 8)) < 0.5) for _ in range(int(rng.integers(0, 5)))]
            out = reduce_masks(fine, coarse)
            assert [fine.index(m) for m in out] == reference_reduce(fine, coarse)
            assert len(out) <= min(len(fine), len(coarse))


class TestCrop:
    image = Image("img", np.arange(100 * 100 * 3, dtype=np.int64).reshape(100, 100, 3) % 251 + 1)

    def test_margin_box(self):
        m = box_mask(100, 100, 10, 10, 19, 19)
        assert crop_box_for(m, 0.2) == (8, 8, 21, 21)
        assert crop_box_for(m, 0.0) == (10, 10, 19, 19)

    def test_clamped(self):
        m = box_mask(100, 100, 0, 95, 9, 99)
        assert crop_box_for(m, 0.2) == (0, 94, 11, 99)

    def test_tight_unmasked(self):
        m = box_mask(100, 100, 10, 20, 29, 24)
        p = crop(self.image, m, CropSpec(0.0))
        np.testing.assert_array_equal(p.pixels, self.image.pixels[20:25, 10:30])
        assert p.crop_box == (10, 20, 29, 24)

    def test_masked_zeroes_background(self):
        bits = np.zeros((100, 100), dtype=bool)
        bits[10:20, 10:20] = True
        bits[10, 10] = False
        p = crop(self.image, BinaryMask(bits), CropSpec(0.0, True), mask_id=3)
        assert p.pixels[0, 0].tolist() == [0, 0, 0]
        assert np.all(p.pixels[p.mask_bits] != 0)
        assert p.source_mask_id == 3 and p.image_id == "img"

    def test_empty_mask(self):
        with pytest.raises(UsageError):
            crop(self.image, BinaryMask(np.zeros((100, 100), bool)), CropSpec())

    def test_negative_margin(self):
        with pytest.raises(UsageError):
            CropSpec(-0.1)


class TestRLE:
    def test_all_false(self):
        assert rle_encode(BinaryMask(np.zeros((3, 3), bool))).counts == (9,)

    def test_all_true(self):
        assert rle_encode(BinaryMask(np.ones((3, 3), bool))).counts == (0, 9)

    def test_hand_case(self):
        flat = np.zeros(9, bool)
        flat[2:5] = True
        bits = flat.reshape((3, 3), order="F")
        assert rle_encode(BinaryMask(bits)).counts == (2, 3, 4)

    def test_dict_round_trip(self):
        r = RLE((2, 3), (1, 2, 3))
        assert RLE.from_dict(r.to_dict()) == r

    def test_corrupt(self):
        with pytest.raises(CorruptDataError):
            rle_decode(RLE((2, 2), (1, 2)))

    @given(mask_arrays)
    @settings(max_examples=200, deadline=None)
    def test_round_trip_and_canonical(self, bits):
        r = rle_encode(BinaryMask(bits))
        assert list(r.counts) == reference_counts(bits)
        assert all(c > 0 for c in r.counts[1:])
        np.testing.assert_array_equal(rle_decode(r).bits, bits)
