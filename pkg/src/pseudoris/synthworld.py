"""Deterministic synthetic scenes, reference backends and a resolution oracle.

Every object is an axis-aligned rectangle painted with an RGB code that
encodes its category and attributes, so the reference backends work from
patch pixels alone:

* ``SynthCaptioner`` follows the template ``a <attr>* <category> <eos>``.
  Each slot puts mass ALPHA on the primary object's words, BETA on words of
  visible distractors and GAMMA on "the rest".  With ``gamma_scope="patch"``
  (the default) the rest is what the patch shows, so GAMMA joins the primary
  words and nothing unseen is ever named; ``"vocabulary"`` spreads it over
  every other word of the slot.
* ``SynthScorer`` is word overlap between a text and the visible descriptors.
* ``SynthMaskExtractor`` returns one exact mask per painted object.

``oracle_resolve`` answers which objects a caption applies to by brute force.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import (SCORE_FLOOR, CaptionerBackend, MaskExtractorBackend, ScorerBackend,
                       Vocabulary, default_registry)
from .decoding import default_grid, make_rng
from .errors import ContractError, PlacementError, UsageError
from .maskops import BinaryMask, Image, Patch, rle_decode
from .pipeline import Backends, PipelineConfig, in_memory_source, refilter, run_pipeline
from .scoring import FilterConfig

ALPHA, BETA, GAMMA = 0.6, 0.3, 0.1
#: Probability of moving on to the category slot after n attributes.
CATEGORY_HAZARD = (0.25, 0.5, 1.0)
DISTRACTOR_CREDIT = 0.5


@dataclass(frozen=True)
class AttributeSpace:
    categories: tuple[str, ...] = ("cow", "man", "chair", "dog", "car", "cup", "horse", "bird")
    families: tuple[tuple[str, tuple[str, ...]], ...] = (
        ("color", ("brown", "white", "black", "red", "blue", "green", "gray", "yellow")),
        ("size", ("small", "large", "tall", "short", "tiny", "huge", "long", "wide")),
        ("accessory", ("tail", "hat", "tie", "collar", "bell", "scarf", "horns", "spots")),
    )
    function_words: tuple[str, ...] = ("a", "the", "with")

    def __post_init__(self):
        attrs = self.attributes
        groups = [set(self.categories), set(attrs), set(self.function_words)]
        if sum(map(len, groups)) != len(set().union(*groups)):
            raise UsageError("categories, attributes and function words must be disjoint")
        if len(self.families) != 3 or any(len(v) > 15 for _, v in self.families):
            raise UsageError("pixel encoding supports exactly 3 families of <= 15 values")
        if len(self.categories) > 254:
            raise UsageError("too many categories for the pixel encoding")

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(a for _, values in self.families for a in values)

    @property
    def family_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.families)

    def family_of(self, attr: str) -> str:
        for name, values in self.families:
            if attr in values:
                return name
        raise UsageError(f"{attr!r} is not an attribute")

    def vocabulary(self) -> Vocabulary:
        # specials last so ties in top-k never prefer them
        tokens = self.function_words + self.categories + self.attributes + ("<eos>", "<bos>")
        return Vocabulary(tokens, bos_id=len(tokens) - 1, eos_id=len(tokens) - 2)

    def encode(self, category: str, attrs: Iterable[str]) -> tuple[int, int, int]:
        slots = [0, 0, 0]
        for a in attrs:
            for f, (_, values) in enumerate(self.families):
                if a in values:
                    slots[f] = values.index(a) + 1
        return (self.categories.index(category) + 1, slots[0] * 16 + slots[1], slots[2])

    def decode(self, rgb: tuple[int, int, int]) -> tuple[str, tuple[str, ...]]:
        r, g, b = (int(v) for v in rgb)
        if not 1 <= r <= len(self.categories):
            raise ContractError(f"pixel code {rgb} does not encode an object")
        slots = (g // 16, g % 16, b)
        attrs = []
        for s, (_, values) in zip(slots, self.families):
            if s:
                if s > len(values):
                    raise ContractError(f"pixel code {rgb} does not encode an object")
                attrs.append(values[s - 1])
        return self.categories[r - 1], tuple(attrs)


DEFAULT_SPACE = AttributeSpace()


@dataclass(frozen=True)
class SynthObject:
    id: int
    category: str
    attrs: tuple[str, ...]
    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive

    @property
    def descriptors(self) -> frozenset[str]:
        return frozenset((self.category,) + self.attrs)

    def to_dict(self) -> dict:
        return {"id": self.id, "category": self.category, "attrs": list(self.attrs),
                "rect": list(self.rect)}

    @classmethod
    def from_dict(cls, d: dict) -> SynthObject:
        return cls(int(d["id"]), d["category"], tuple(d["attrs"]), tuple(d["rect"]))


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SynthObject, ...]
    seed: int
    space: AttributeSpace = field(default=DEFAULT_SPACE, compare=False, repr=False)

    @property
    def id(self) -> str:
        return f"synth-{self.seed}"

    def render(self) -> Image:
        px = np.zeros((self.height, self.width, 3), dtype=np.uint8)
        for o in self.objects:
            x0, y0, x1, y1 = o.rect
            px[y0:y1 + 1, x0:x1 + 1] = self.space.encode(o.category, o.attrs)
        return Image(self.id, px)

    def object_mask(self, obj_id: int) -> BinaryMask:
        bits = np.zeros((self.height, self.width), dtype=bool)
        x0, y0, x1, y1 = self.objects[obj_id].rect
        bits[y0:y1 + 1, x0:x1 + 1] = True
        return BinaryMask(bits)

    def to_dict(self) -> dict:
        return {"id": self.id, "seed": self.seed, "width": self.width, "height": self.height,
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls(int(d["width"]), int(d["height"]),
                   tuple(SynthObject.from_dict(o) for o in d["objects"]), int(d["seed"]))


def make_scene(seed: int, n_objects: int, overlap_level: float, width: int = 96,
               height: int = 96, space: AttributeSpace = DEFAULT_SPACE) -> Scene:
    """Place ``n_objects`` disjoint rectangles on a grid and draw their words.

    ``overlap_level`` is the probability that an object copies the scene
    template's category and each non-distinguishing attribute.  One family
    (the distinguishing one) always takes a distinct value per object.
    """
    if n_objects < 1:
        raise UsageError("n_objects must be >= 1")
    if not 0.0 <= overlap_level <= 1.0:
        raise UsageError("overlap_level must lie in [0, 1]")
    grid = math.ceil(math.sqrt(n_objects))
    cw, ch = width // grid, height // grid
    if cw < 4 or ch < 4:
        raise PlacementError(f"{n_objects} objects do not fit a {width}x{height} image")
    smallest = min(len(v) for _, v in space.families)
    if n_objects > smallest:
        raise PlacementError(f"at most {smallest} objects can carry distinct attributes")

    rng = make_rng("scene", seed, n_objects, overlap_level, width, height)
    cells = rng.permutation(grid * grid)[:n_objects]
    diff_family = int(rng.integers(len(space.families)))
    diff_values = rng.permutation(len(space.families[diff_family][1]))[:n_objects]
    template_cat = int(rng.integers(len(space.categories)))
    template_attrs = [int(rng.integers(len(v))) for _, v in space.families]

    objects = []
    for i, cell in enumerate(cells):
        gx, gy = int(cell) % grid, int(cell) // grid
        w = int(rng.integers(max(2, cw // 2), max(3, int(cw * 0.9)) + 1))
        h = int(rng.integers(max(2, ch // 2), max(3, int(ch * 0.9)) + 1))
        w, h = min(w, cw), min(h, ch)
        x0 = gx * cw + int(rng.integers(0, cw - w + 1))
        y0 = gy * ch + int(rng.integers(0, ch - h + 1))
        cat = template_cat if rng.random() < overlap_level else int(rng.integers(len(space.categories)))
        attrs = []
        for f, (_, values) in enumerate(space.families):
            if f == diff_family:
                attrs.append(values[int(diff_values[i])])
            elif rng.random() < overlap_level:
                attrs.append(values[template_attrs[f]])
            else:
                attrs.append(values[int(rng.integers(len(values)))])
        objects.append(SynthObject(i, space.categories[cat], tuple(attrs),
                                   (x0, y0, x0 + w - 1, y0 + h - 1)))
    return Scene(width, height, tuple(objects), seed, space)


@dataclass
class _View:
    """What a patch shows: its primary object and visible distractors."""

    primary: tuple[str, tuple[str, ...]]
    distractors: list[tuple[str, tuple[str, ...]]]
    embedding: np.ndarray | None = None
    dists: dict = field(default_factory=dict)


def _analyze(patch: Patch, space: AttributeSpace) -> _View:
    px = np.asarray(patch.pixels).reshape(-1, 3).astype(np.int64)
    packed = (px[:, 0] << 16) | (px[:, 1] << 8) | px[:, 2]
    codes, counts = np.unique(packed[packed != 0], return_counts=True)
    if codes.size == 0:
        raise ContractError("patch shows no synthetic object")
    order = np.lexsort((codes, -counts))  # most pixels first, ties by lower code
    objs = [space.decode(((c >> 16) & 255, (c >> 8) & 255, c & 255)) for c in codes[order]]
    return _View(objs[0], objs[1:])


class _PatchCache:
    def __init__(self, space: AttributeSpace):
        self.space = space
        self._views: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    def view(self, patch: Patch) -> _View:
        v = self._views.get(patch)
        if v is None:
            v = _analyze(patch, self.space)
            self._views[patch] = v
        return v


def _spread(out: np.ndarray, ids: Sequence[int], mass: float) -> bool:
    if not ids or mass == 0:
        return False
    out[list(ids)] += mass / len(ids)
    return True


class SynthCaptioner(CaptionerBackend):
    def __init__(self, space: AttributeSpace = DEFAULT_SPACE, gamma_scope: str = "patch"):
        if gamma_scope not in ("patch", "vocabulary"):
            raise UsageError("gamma_scope must be 'patch' or 'vocabulary'")
        self.space = space
        self.gamma_scope = gamma_scope
        self._vocab = space.vocabulary()
        v = self._vocab
        self._cat_ids = set(v.ids(space.categories))
        self._attr_ids = set(v.ids(space.attributes))
        self._article = v.id("a")
        self._cache = _PatchCache(space)

    @property
    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def embed(self, patch: Patch) -> np.ndarray:
        view = self._cache.view(patch)
        if view.embedding is None:
            vec = np.zeros(len(self._vocab))
            for d in {w for o in view.distractors for w in (o[0],) + o[1]}:
                vec[self._vocab.id(d)] = DISTRACTOR_CREDIT
            cat, attrs = view.primary
            vec[self._vocab.ids((cat,) + attrs)] = 1.0
            view.embedding = vec / np.linalg.norm(vec)
        return view.embedding

    def _slot(self, words: Iterable[str], exclude: set[int], primary: Sequence[str],
              distractor: Iterable[str]) -> np.ndarray:
        v = self._vocab
        universe = [i for i in v.ids(words) if i not in exclude]
        prim = [i for i in v.ids(primary) if i not in exclude]
        dis = sorted({v.id(w) for w in distractor} - exclude)
        taken = set(prim) | set(dis)
        rest = [i for i in universe if i not in taken] if self.gamma_scope == "vocabulary" else []
        out = np.zeros(len(v))
        fold = (0.0 if dis else BETA) + (0.0 if rest else GAMMA)
        _spread(out, prim, ALPHA + fold)
        _spread(out, dis, BETA)
        _spread(out, rest, GAMMA)
        total = out.sum()
        return out / total if total > 0 else out

    def next_word_dist(self, patch: Patch, prefix: Sequence[int]) -> np.ndarray:
        view = self._cache.view(patch)
        if not prefix:
            key = ("article",)
        elif any(t in self._cat_ids for t in prefix):
            key = ("end",)
        else:
            key = ("describe", frozenset(t for t in prefix if t in self._attr_ids))
        dist = view.dists.get(key)
        if dist is None:
            dist = self._build(view, key)
            view.dists[key] = dist
        return dist.copy()

    def _build(self, view: _View, key: tuple) -> np.ndarray:
        out = np.zeros(len(self._vocab))
        if key[0] == "article":
            out[self._article] = 1.0
            return out
        if key[0] == "end":
            out[self._vocab.eos_id] = 1.0
            return out
        used = set(key[1])
        cat, attrs = view.primary
        hazard = CATEGORY_HAZARD[min(len(used), len(CATEGORY_HAZARD) - 1)]
        attr_dist = self._slot(self.space.attributes, used, attrs,
                               (a for o in view.distractors for a in o[1]))
        if attr_dist.sum() == 0 or not any(a for a in attrs if self._vocab.id(a) not in used):
            hazard = 1.0
        cat_dist = self._slot(self.space.categories, set(), (cat,),
                              (o[0] for o in view.distractors))
        return (1.0 - hazard) * attr_dist + hazard * cat_dist


class SynthScorer(ScorerBackend):
    def __init__(self, space: AttributeSpace = DEFAULT_SPACE):
        self.space = space
        self._cache = _PatchCache(space)
        self._stop = frozenset(space.function_words) | {"<eos>", "<bos>"}

    def content_words(self, text: str) -> frozenset[str]:
        return _content_words(text, self._stop)

    def score(self, patch: Patch, text: str) -> float:
        words = self.content_words(text)
        if not words:
            return SCORE_FLOOR
        view = self._cache.view(patch)
        cat, attrs = view.primary
        primary = {cat, *attrs}
        credit = float(len(words & primary))
        if not patch.spec.masked:
            others = {w for o in view.distractors for w in (o[0],) + o[1]} - primary
            credit += DISTRACTOR_CREDIT * len(words & others)
        return max(credit / len(words), SCORE_FLOOR)


@lru_cache(maxsize=65536)
def _content_words(text: str, stop: frozenset[str]) -> frozenset[str]:
    return frozenset(w for w in text.lower().split() if w not in stop)


class SynthMaskExtractor(MaskExtractorBackend):
    """One mask per distinct object code, ordered by (top, left) of its box."""

    def __init__(self, space: AttributeSpace = DEFAULT_SPACE):
        self.space = space

    def extract(self, image: Image) -> list[BinaryMask]:
        px = image.pixels.astype(np.int64)
        packed = (px[..., 0] << 16) | (px[..., 1] << 8) | px[..., 2]
        masks = [BinaryMask(packed == c) for c in np.unique(packed) if c != 0]
        return sorted(masks, key=lambda m: (m.bbox[1], m.bbox[0]))


class SynthFineMaskExtractor(SynthMaskExtractor):
    """Over-segments: each object's mask plus its left/right/top/bottom halves."""

    def extract(self, image: Image) -> list[BinaryMask]:
        out = []
        for m in super().extract(image):
            out.append(m)
            x0, y0, x1, y1 = m.bbox
            xm, ym = (x0 + x1 + 1) // 2, (y0 + y1 + 1) // 2
            for sl in ((slice(None), slice(x0, xm)), (slice(None), slice(xm, x1 + 1)),
                       (slice(y0, ym), slice(None)), (slice(ym, y1 + 1), slice(None))):
                bits = np.zeros_like(m.bits)
                bits[sl] = m.bits[sl]
                if bits.any():
                    out.append(BinaryMask(bits))
        return out


def oracle_resolve(caption: str, scene: Scene) -> set[int]:
    """Ids of every object whose descriptors cover all content words."""
    stop = frozenset(scene.space.function_words) | {"<eos>", "<bos>"}
    words = _content_words(caption, stop)
    return {o.id for o in scene.objects if words <= o.descriptors}


def target_object(scene: Scene, mask: BinaryMask) -> int:
    """Object whose rectangle overlaps ``mask`` most (lowest id on ties)."""
    best, best_overlap = -1, -1
    for o in scene.objects:
        x0, y0, x1, y1 = o.rect
        overlap = int(mask.bits[y0:y1 + 1, x0:x1 + 1].sum())
        if overlap > best_overlap:
            best, best_overlap = o.id, overlap
    return best


def uniqueness_rate(annotations: Sequence, scenes: Mapping[str, Scene] | Sequence[Scene]) -> float:
    """Fraction of kept captions the oracle resolves to exactly their target.

    ``annotations`` are ``PseudoAnnotation`` objects; an empty caption set
    gives 0.0.
    """
    by_id = scenes if isinstance(scenes, Mapping) else {s.id: s for s in scenes}
    total = unique = 0
    for ann in annotations:
        scene = by_id[ann.image_id]
        target = target_object(scene, rle_decode(ann.mask))
        for cap in ann.captions:
            total += 1
            unique += oracle_resolve(cap.text, scene) == {target}
    return unique / total if total else 0.0


#: Calibrated values are differences of probabilities, so the softmax
#: temperature has to sit well below the typical gap between them (~0.05-0.3).
SYNTH_TEMPERATURE = 0.01

VARIANTS = ("naive", "+sampling", "+filtering", "+both")


@dataclass(frozen=True)
class CorpusConfig:
    n_scenes: int = 200
    n_objects: int = 4
    overlap: float = 1.0
    seed: int = 0
    width: int = 96
    height: int = 96
    temperature: float = SYNTH_TEMPERATURE
    tau: float = 1.3
    calibration_mode: str = "average"
    gamma_scope: str = "patch"


def make_corpus(cfg: CorpusConfig) -> list[Scene]:
    return [make_scene(cfg.seed * 1_000_003 + i, cfg.n_objects, cfg.overlap, cfg.width, cfg.height)
            for i in range(cfg.n_scenes)]


@dataclass
class BenchmarkReport:
    config: CorpusConfig
    rows: list[dict]

    def row(self, variant: str) -> dict:
        return next(r for r in self.rows if r["variant"] == variant)

    def to_dict(self) -> dict:
        return {"config": dict(vars(self.config)), "rows": self.rows}

    def to_text(self) -> str:
        lines = [f"{'variant':<12} {'uniqueness':>10} {'mean_dos':>12} {'kept':>8} {'n_kept':>8}"]
        for r in self.rows:
            dos = "n/a" if r["mean_dos"] is None else f"{r['mean_dos']:.4f}"
            lines.append(f"{r['variant']:<12} {r['uniqueness_rate']:>10.4f} {dos:>12} "
                         f"{r['kept_fraction']:>8.4f} {r['n_kept']:>8d}")
        return "\n".join(lines) + "\n"


def _mean_dos(annotations) -> float | None:
    # single-object scenes score inf; they carry no ratio to average
    vals = [c.dos for a in annotations for c in a.captions if math.isfinite(c.dos)]
    return float(np.mean(vals)) if vals else None


def benchmark(cfg: CorpusConfig = CorpusConfig(),
              variants: Sequence[str] = VARIANTS) -> BenchmarkReport:
    """Ablate distinctive sampling and DoS filtering on a synthetic corpus.

    "naive" decodes with plain top-k / top-p (plus beam) and keeps every
    candidate; "+sampling" swaps in distinctive sampling; "+filtering" keeps
    only candidates with DoS >= tau; "+both" combines the two.
    """
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise UsageError(f"unknown benchmark variants: {sorted(unknown)}")
    scenes = make_corpus(cfg)
    by_id = {s.id: s for s in scenes}
    backends = Backends(SynthCaptioner(gamma_scope=cfg.gamma_scope), SynthScorer(),
                        SynthMaskExtractor())
    keep_all = FilterConfig("distinctiveness", 0.0)
    filt = FilterConfig("distinctiveness", cfg.tau)
    runs = {}
    for family in ("naive", "distinctive"):
        if family == "naive" and not {"naive", "+filtering"} & set(variants):
            continue
        if family == "distinctive" and not {"+sampling", "+both"} & set(variants):
            continue
        pcfg = PipelineConfig(
            decoding_configs=default_grid(family, temperature=cfg.temperature,
                                          calibration_mode=cfg.calibration_mode),
            filter=filt, seed=cfg.seed)
        anns, _ = run_pipeline(in_memory_source(s.render() for s in scenes), backends, pcfg)
        runs[family] = anns
    rows = []
    for variant in variants:
        family = "distinctive" if variant in ("+sampling", "+both") else "naive"
        filtered = variant in ("+filtering", "+both")
        anns = refilter(runs[family], filt if filtered else keep_all)
        n_total = sum(len(a.candidates) for a in anns)
        n_kept = sum(len(a.captions) for a in anns)
        rows.append({
            "variant": variant,
            "uniqueness_rate": uniqueness_rate(anns, by_id),
            "mean_dos": _mean_dos(anns),
            "kept_fraction": n_kept / n_total if n_total else 0.0,
            "n_candidates": n_total,
            "n_kept": n_kept,
        })
    return BenchmarkReport(cfg, rows)


def _register_builtins() -> None:
    reg = default_registry
    for kind, name, factory in (
        ("captioner", "synth", SynthCaptioner),
        ("scorer", "synth", SynthScorer),
        ("mask_extractor", "synth", SynthMaskExtractor),
        ("mask_extractor", "synth-fine", SynthFineMaskExtractor),
    ):
        if name not in reg.names(kind):
            reg.register(name, kind, factory)


_register_builtins()
