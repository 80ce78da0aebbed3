"""Binary masks, IoU, coarse-guided mask reduction, patch cropping and RLE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, CorruptDataError, ShapeError, UsageError


@dataclass(eq=False)
class Image:
    id: str
    pixels: np.ndarray  # H x W x 3, uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"image pixels must be HxWx3, got {px.shape}")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise UsageError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(eq=False)
class BinaryMask:
    bits: np.ndarray  # H x W bool

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ShapeError(f"mask must be 2-d, got shape {b.shape}")
        self.bits = b

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """Tight (x0, y0, x1, y1) box, inclusive."""
        ys = np.flatnonzero(self.bits.any(axis=1))
        xs = np.flatnonzero(self.bits.any(axis=0))
        if ys.size == 0:
            raise UsageError("empty mask has no bounding box")
        return int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1])

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = object.__hash__


@dataclass(frozen=True)
class RLE:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def to_dict(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> RLE:
        try:
            return cls(size=tuple(d["size"]), counts=tuple(d["counts"]))
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptDataError(f"malformed RLE record: {e}") from None


@dataclass(frozen=True)
class CropSpec:
    margin: float = 0.0
    masked: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise UsageError("crop margin must be nonnegative")

    @property
    def label(self) -> str:
        return f"m{self.margin:.1f}{'-masked' if self.masked else ''}"


CANONICAL_CROPS = (
    CropSpec(0.0, False),
    CropSpec(0.1, False),
    CropSpec(0.2, False),
    CropSpec(0.0, True),
)
THETA_CROP = CropSpec(0.1, False)
COS_CROP = CropSpec(0.0, True)


@dataclass(eq=False)
class Patch:
    pixels: np.ndarray
    source_mask_id: int
    spec: CropSpec
    crop_box: tuple[int, int, int, int]  # (x0, y0, x1, y1) inclusive, source coords
    image_id: str = ""
    mask_bits: np.ndarray | None = field(default=None, repr=False)  # mask cropped to crop_box


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    _check_same_shape(a, b)
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def _iou_matrix(rows: Sequence[BinaryMask], cols: Sequence[BinaryMask]) -> np.ndarray:
    r = np.stack([m.bits.ravel() for m in rows]).astype(np.float64)
    c = np.stack([m.bits.ravel() for m in cols]).astype(np.float64)
    inter = r @ c.T
    union = r.sum(1)[:, None] + c.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def reduce_masks(fine: Sequence[BinaryMask], coarse: Sequence[BinaryMask]) -> list[BinaryMask]:
    """Pick, for each coarse mask, the fine mask of highest IoU.

    Ties go to the lowest fine index, repeated picks are dropped and the
    result follows coarse order.
    """
    if not coarse:
        return []
    if not fine:
        raise ConfigurationError("mask reduction needs at least one fine mask")
    shape = fine[0].bits.shape
    for m in list(fine) + list(coarse):
        if m.bits.shape != shape:
            raise ShapeError(f"mask shapes differ: {m.bits.shape} vs {shape}")
    table = _iou_matrix(coarse, fine)
    picked: list[int] = []
    for row in table:
        j = int(np.argmax(row))  # first maximum = lowest index
        if j not in picked:
            picked.append(j)
    return [fine[j] for j in picked]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_box_for(mask: BinaryMask, margin: float) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = mask.bbox
    dx = _round_half_up(margin * (x1 - x0 + 1))
    dy = _round_half_up(margin * (y1 - y0 + 1))
    return (max(0, x0 - dx), max(0, y0 - dy),
            min(mask.width - 1, x1 + dx), min(mask.height - 1, y1 + dy))


def crop(image: Image, mask: BinaryMask, spec: CropSpec, mask_id: int = 0) -> Patch:
    if (mask.height, mask.width) != (image.height, image.width):
        raise ShapeError("mask does not match image dimensions")
    if mask.area < 1:
        raise UsageError("cannot crop around an empty mask")
    x0, y0, x1, y1 = crop_box_for(mask, spec.margin)
    px = image.pixels
    if spec.masked:
        px = px * mask.bits[:, :, None].astype(px.dtype)
    return Patch(
        pixels=np.ascontiguousarray(px[y0:y1 + 1, x0:x1 + 1]),
        source_mask_id=mask_id,
        spec=spec,
        crop_box=(x0, y0, x1, y1),
        image_id=image.id,
        mask_bits=mask.bits[y0:y1 + 1, x0:x1 + 1].copy(),
    )


def rle_encode(mask: BinaryMask) -> RLE:
    flat = mask.bits.ravel(order="F").astype(np.int8)
    n = flat.size
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [n]))
    counts = np.diff(bounds).tolist()
    if n and flat[0] == 1:
        counts = [0] + counts
    return RLE(size=(mask.height, mask.width), counts=tuple(counts))


def rle_decode(rle: RLE) -> BinaryMask:
    h, w = rle.size
    if h < 0 or w < 0 or any(c < 0 for c in rle.counts):
        raise CorruptDataError("RLE size and counts must be nonnegative")
    if sum(rle.counts) != h * w:
        raise CorruptDataError(f"RLE counts sum to {sum(rle.counts)}, expected {h * w}")
    values = np.arange(len(rle.counts)) % 2
    flat = np.repeat(values.astype(bool), rle.counts)
    return BinaryMask(flat.reshape((h, w), order="F"))
