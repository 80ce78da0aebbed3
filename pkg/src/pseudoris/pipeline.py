"""Masks -> patches -> caption candidates -> scores -> filtered annotations."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .backends import (SCORE_FLOOR, CaptionerBackend, MaskExtractorBackend, ScorerBackend,
                       default_registry)
from .decoding import DecodingConfig, build_context, decode, default_grid, make_rng
from .errors import ConfigurationError
from .maskops import (CANONICAL_CROPS, COS_CROP, RLE, THETA_CROP, BinaryMask, CropSpec, Image,
                      crop, reduce_masks, rle_decode, rle_encode)
from .scoring import (CaptionCandidate, FilterConfig, cos_score, dos, filter_candidates, floored,
                      uos)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    crop_specs: tuple[CropSpec, ...] = CANONICAL_CROPS
    decoding_configs: tuple[DecodingConfig, ...] = field(default_factory=lambda: tuple(default_grid()))
    filter: FilterConfig = FilterConfig()
    seed: int = 0
    captioner: str = "synth"
    scorer: str = "synth"
    mask_extractor: str = "synth"
    coarse_mask_extractor: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "crop_specs", tuple(self.crop_specs))
        object.__setattr__(self, "decoding_configs", tuple(self.decoding_configs))
        if not self.crop_specs or not self.decoding_configs:
            raise ConfigurationError("need at least one crop spec and one decoding config")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    @property
    def candidates_per_mask(self) -> int:
        return len(self.crop_specs) * len(self.decoding_configs)


class _Locked:
    """Serializes every method call of an exclusive backend."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            with self._lock:
                return attr(*args, **kwargs)
        return call


@dataclass
class Backends:
    captioner: CaptionerBackend
    scorer: ScorerBackend
    mask_extractor: MaskExtractorBackend | None = None
    coarse_extractor: MaskExtractorBackend | None = None

    @classmethod
    def from_config(cls, config: PipelineConfig, registry=default_registry) -> Backends:
        coarse = config.coarse_mask_extractor
        return cls(
            captioner=registry.resolve("captioner", config.captioner),
            scorer=registry.resolve("scorer", config.scorer),
            mask_extractor=registry.resolve("mask_extractor", config.mask_extractor)
            if config.mask_extractor else None,
            coarse_extractor=registry.resolve("mask_extractor", coarse) if coarse else None,
        )

    def guarded(self) -> Backends:
        wrap = lambda b: _Locked(b) if b is not None and getattr(b, "exclusive", False) else b
        return Backends(wrap(self.captioner), wrap(self.scorer), wrap(self.mask_extractor),
                        wrap(self.coarse_extractor))


@dataclass
class PseudoAnnotation:
    image_id: str
    file_name: str
    mask_index: int
    mask: RLE
    captions: list[CaptionCandidate]
    candidates: list[CaptionCandidate] = field(default_factory=list)
    #: Candidate count when ``candidates`` was not kept (e.g. read from file).
    candidate_count: int | None = None

    @property
    def n_candidates(self) -> int:
        return len(self.candidates) if self.candidate_count is None else self.candidate_count

    @property
    def flagged(self) -> bool:
        """True when no caption survived filtering."""
        return not self.captions


@dataclass
class CorpusStats:
    n_images: int = 0
    n_masks: int = 0
    n_candidates: int = 0
    n_kept: int = 0
    vocabulary_size: int = 0
    n_skipped_images: int = 0
    n_failed_candidates: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class CandidateFailure:
    image_id: str
    mask_index: int
    crop_index: int
    config_index: int
    error: str


def generate_candidates(image: Image, masks: Sequence[BinaryMask], backends: Backends,
                        config: PipelineConfig,
                        failures: list[CandidateFailure] | None = None) -> list[CaptionCandidate]:
    """One candidate per (mask, crop spec, decoding config), in that nesting order."""
    if not masks:
        raise ConfigurationError("generate_candidates needs at least one mask")
    captioner = backends.captioner
    vocab = captioner.vocabulary
    patches = {ci: [crop(image, m, spec, mask_id=i) for i, m in enumerate(masks)]
               for ci, spec in enumerate(config.crop_specs)}
    embeddings: dict = {}
    out = []
    for i in range(len(masks)):
        for ci, spec in enumerate(config.crop_specs):
            row = patches[ci]
            ctx = None
            for j, dc in enumerate(config.decoding_configs):
                try:
                    if ctx is None:
                        ctx = build_context(captioner, row[i], row[:i] + row[i + 1:], embeddings)
                    rng = make_rng(config.seed, image.id, i, ci, j)
                    seq = decode(captioner, ctx, dc, rng)
                except Exception as e:  # noqa: BLE001 - one bad candidate must not sink the image
                    log.warning("candidate %s/%d/%d/%d failed: %s", image.id, i, ci, j, e)
                    if failures is not None:
                        failures.append(CandidateFailure(image.id, i, ci, j, repr(e)))
                    continue
                out.append(CaptionCandidate(mask_id=i, text=vocab.decode(seq.ids), tokens=seq,
                                            crop_spec=spec, decoding_config_index=j,
                                            crop_index=ci))
    return out


def score_candidates(candidates: Sequence[CaptionCandidate], masks: Sequence[BinaryMask],
                     image: Image, backends: Backends) -> None:
    """Fill theta/CoS/UoS/DoS on every candidate in place."""
    scorer = backends.scorer
    theta_patches = [crop(image, m, THETA_CROP, mask_id=i) for i, m in enumerate(masks)]
    cos_patches = [crop(image, m, COS_CROP, mask_id=i) for i, m in enumerate(masks)]
    cache: dict[str, tuple[list[float], list[float]]] = {}
    for c in candidates:
        if c.text not in cache:
            if c.text.strip():
                thetas = [floored(scorer.score(p, c.text)) for p in theta_patches]
                coss = [cos_score(scorer, p, c.text) for p in cos_patches]
            else:
                thetas = [SCORE_FLOOR] * len(masks)
                coss = [SCORE_FLOOR] * len(masks)
            cache[c.text] = (thetas, coss)
        thetas, coss = cache[c.text]
        i = c.mask_id
        c.theta_target, c.cos_target = thetas[i], coss[i]
        c.theta_others = thetas[:i] + thetas[i + 1:]
        c.cos_others = coss[:i] + coss[i + 1:]
        c.uos = uos(c.theta_target, c.theta_others)
        c.cos = c.cos_target
        c.dos = dos(c.cos_target, c.theta_target, c.cos_others, c.theta_others)


def _keep(candidates: Sequence[CaptionCandidate], filt: FilterConfig) -> list[CaptionCandidate]:
    # empty captions never become annotations, whatever their sentinel score
    return [c for c in filter_candidates(candidates, filt) if c.text.strip()]


def score_and_filter(candidates: Sequence[CaptionCandidate], masks: Sequence[BinaryMask],
                     image: Image, backends: Backends, config: PipelineConfig,
                     file_name: str = "") -> list[PseudoAnnotation]:
    score_candidates(candidates, masks, image, backends)
    by_mask: dict[int, list[CaptionCandidate]] = {i: [] for i in range(len(masks))}
    for c in candidates:
        by_mask[c.mask_id].append(c)
    return [PseudoAnnotation(image.id, file_name or image.id, i, rle_encode(masks[i]),
                             _keep(cands, config.filter), list(cands))
            for i, cands in by_mask.items()]


def refilter(annotations: Iterable[PseudoAnnotation], filt: FilterConfig) -> list[PseudoAnnotation]:
    """Re-apply a filter to already-scored candidates without regenerating."""
    return [replace(a, captions=_keep(a.candidates, filt)) for a in annotations]


@dataclass
class ImageRecord:
    image_id: str
    file_name: str
    load: Callable[[], Image]
    masks: Callable[[], list[BinaryMask]] | None = None
    coarse: Callable[[], list[BinaryMask]] | None = None


def in_memory_source(images: Iterable[Image],
                     masks: dict[str, list[BinaryMask]] | None = None) -> list[ImageRecord]:
    out = []
    for img in images:
        given = masks.get(img.id) if masks else None
        out.append(ImageRecord(img.id, img.id, (lambda im=img: im),
                               (lambda g=given: g) if given is not None else None))
    return out


IMAGE_SUFFIXES = (".png", ".npy", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


def load_image(path: Path) -> Image:
    path = Path(path)
    if path.suffix.lower() == ".npy":
        px = np.load(path, allow_pickle=False)
    else:
        from PIL import Image as PILImage
        with PILImage.open(path) as im:
            px = np.asarray(im.convert("RGB"))
    return Image(path.stem, px)


def load_mask_file(path: Path) -> list[BinaryMask]:
    import json
    data = json.loads(Path(path).read_text())
    records = data["masks"] if isinstance(data, dict) else data
    return [rle_decode(RLE.from_dict(r.get("mask", r))) for r in records]


def directory_source(image_dir: Path, mask_dir: Path | None = None) -> list[ImageRecord]:
    """Images sorted by file name; ``<stem>.json`` in ``mask_dir`` supplies masks."""
    image_dir = Path(image_dir)
    out = []
    for path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        masks = None
        if mask_dir is not None and (Path(mask_dir) / f"{path.stem}.json").exists():
            mpath = Path(mask_dir) / f"{path.stem}.json"
            masks = lambda mp=mpath: load_mask_file(mp)
        out.append(ImageRecord(path.stem, path.name, (lambda p=path: load_image(p)), masks))
    return out


@dataclass
class _ImageResult:
    image_id: str
    annotations: list[PseudoAnnotation] = field(default_factory=list)
    failures: list[CandidateFailure] = field(default_factory=list)
    n_masks: int = 0
    skipped: bool = False


def process_image(record: ImageRecord, backends: Backends, config: PipelineConfig) -> _ImageResult:
    result = _ImageResult(record.image_id)
    try:
        image = record.load()
    except Exception as e:  # noqa: BLE001
        log.error("skipping unreadable image %s: %s", record.file_name, e)
        result.skipped = True
        return result
    if record.masks is not None:
        masks = record.masks()
    elif backends.mask_extractor is not None:
        masks = backends.mask_extractor.extract(image)
    else:
        raise ConfigurationError("no masks supplied and no mask extractor configured")
    coarse = record.coarse() if record.coarse is not None else (
        backends.coarse_extractor.extract(image) if backends.coarse_extractor else None)
    if coarse is not None:
        masks = reduce_masks(masks, coarse)
    masks = [m for m in masks if m.area > 0]
    result.n_masks = len(masks)
    if not masks:
        return result
    cands = generate_candidates(image, masks, backends, config, result.failures)
    result.annotations = score_and_filter(cands, masks, image, backends, config, record.file_name)
    return result


def compute_stats(annotations: Sequence[PseudoAnnotation], n_skipped: int = 0,
                  n_failed: int = 0) -> CorpusStats:
    vocab = {w for a in annotations for c in a.captions for w in c.text.lower().split()}
    return CorpusStats(
        n_images=len({a.image_id for a in annotations}),
        n_masks=len(annotations),
        n_candidates=sum(a.n_candidates for a in annotations),
        n_kept=sum(len(a.captions) for a in annotations),
        vocabulary_size=len(vocab),
        n_skipped_images=n_skipped,
        n_failed_candidates=n_failed,
    )


def run_pipeline(source: Iterable[ImageRecord], backends: Backends,
                 config: PipelineConfig) -> tuple[list[PseudoAnnotation], CorpusStats]:
    records = list(source)
    guarded = backends.guarded() if config.workers > 1 else backends
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(lambda r: process_image(r, guarded, config), records))
    else:
        results = [process_image(r, guarded, config) for r in records]
    results.sort(key=lambda r: r.image_id)
    annotations = [a for r in results for a in sorted(r.annotations, key=lambda a: a.mask_index)]
    stats = compute_stats(annotations,
                          n_skipped=sum(r.skipped for r in results),
                          n_failed=sum(len(r.failures) for r in results))
    # images whose masks were all empty still count as processed
    stats.n_images = sum(not r.skipped for r in results)
    return annotations, stats
