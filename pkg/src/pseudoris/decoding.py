"""Token-by-token caption decoding.

Standard strategies (greedy, beam, naive top-k / top-p sampling) plus
distinctive sampling: at every step the target patch's next-word
distribution is calibrated against the distributions of the other patches
in the image, conditioned on the same prefix, before the vocabulary is
restricted and a token is drawn.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backends import CaptionerBackend, TokenSequence, check_embedding
from .errors import ContractError, DecodingError, ShapeError, UsageError
from .maskops import Patch

STRATEGIES = ("greedy", "beam", "topk_naive", "topp_naive", "topk_distinctive", "topp_distinctive")
CALIBRATION_MODES = ("average", "weighted")

DEFAULT_BEAM_WIDTH = 5
DEFAULT_TOPK = (5, 7, 9, 11, 13)
DEFAULT_TOPP = (0.4, 0.5, 0.6, 0.7, 0.8)


@dataclass(frozen=True)
class DecodingConfig:
    strategy: str
    k: int | None = None
    p: float | None = None
    beam_width: int | None = None
    temperature: float = 1.0
    max_len: int = 32
    calibration_mode: str = "average"
    seed: int = 0

    def __post_init__(self):
        s = self.strategy
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
        if s.startswith("topk"):
            if self.k is None or self.k < 1:
                raise UsageError(f"{s} requires a positive k")
        elif self.k is not None:
            raise UsageError(f"k is not a parameter of {s}")
        if s.startswith("topp"):
            if self.p is None or not (0.0 < self.p <= 1.0):
                raise UsageError(f"{s} requires p in (0, 1]")
        elif self.p is not None:
            raise UsageError(f"p is not a parameter of {s}")
        if s == "beam":
            if self.beam_width is None or self.beam_width < 1:
                raise UsageError("beam requires a positive beam_width")
        elif self.beam_width is not None:
            raise UsageError(f"beam_width is not a parameter of {s}")
        if not self.temperature > 0:
            raise UsageError("temperature must be positive")
        if self.max_len < 1:
            raise UsageError("max_len must be positive")
        if self.calibration_mode not in CALIBRATION_MODES:
            raise UsageError(f"calibration_mode must be one of {CALIBRATION_MODES}")

    @property
    def distinctive(self) -> bool:
        return self.strategy.endswith("_distinctive")

    @property
    def label(self) -> str:
        if self.strategy == "beam":
            return f"beam(w={self.beam_width})"
        if self.k is not None:
            return f"{self.strategy}(k={self.k})"
        if self.p is not None:
            return f"{self.strategy}(p={self.p:g})"
        return self.strategy

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def default_grid(family: str = "distinctive", *, beam_width: int = DEFAULT_BEAM_WIDTH,
                 ks: Sequence[int] = DEFAULT_TOPK, ps: Sequence[float] = DEFAULT_TOPP,
                 temperature: float = 1.0, max_len: int = 32,
                 calibration_mode: str = "average") -> list[DecodingConfig]:
    """Beam search followed by top-k and top-p sampling over ``ks`` / ``ps``.

    With the default arguments this is the 11-config grid.
    """
    if family not in ("distinctive", "naive"):
        raise UsageError("family must be 'distinctive' or 'naive'")
    common = dict(temperature=temperature, max_len=max_len, calibration_mode=calibration_mode)
    grid = [DecodingConfig("beam", beam_width=beam_width, **common)]
    grid += [DecodingConfig(f"topk_{family}", k=k, **common) for k in ks]
    grid += [DecodingConfig(f"topp_{family}", p=p, **common) for p in ps]
    return grid


def make_rng(*key: object) -> np.random.Generator:
    """Counter-based generator keyed by an arbitrary tuple of ids."""
    digest = hashlib.sha256(repr(tuple(key)).encode()).digest()
    philox_key = np.frombuffer(digest[:16], dtype=np.uint64).copy()
    return np.random.Generator(np.random.Philox(key=philox_key))


@dataclass
class CalibrationContext:
    target: Patch
    others: list[Patch] = field(default_factory=list)
    sims: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.sims = np.asarray(self.sims, dtype=np.float64).reshape(-1)
        if self.sims.shape[0] != len(self.others):
            raise ShapeError("need exactly one similarity per other patch")


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.clip(a @ b, 0.0, 1.0))


def build_context(captioner: CaptionerBackend, target: Patch, others: Sequence[Patch],
                  embeddings: dict | None = None) -> CalibrationContext:
    """Compute s_ij between ``target`` and each of ``others``.

    ``embeddings`` may map ``id(patch)`` to a precomputed embedding.
    """
    cache = embeddings if embeddings is not None else {}

    def emb(p):
        key = id(p)
        if key not in cache:
            cache[key] = check_embedding(captioner.embed(p))
        return cache[key]

    e_t = emb(target)
    sims = [similarity(e_t, emb(o)) for o in others]
    return CalibrationContext(target, list(others), np.array(sims, dtype=np.float64))


def softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(v, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def calibrate(target_dist: np.ndarray, other_dists: Sequence[np.ndarray] | np.ndarray,
              sims: Sequence[float] | np.ndarray, temperature: float = 1.0,
              mode: str = "average") -> np.ndarray:
    """Penalize words that are likely for similar distractor patches.

    average:  softmax_T(P_i - (1/n) sum_j s_ij P_j)
    weighted: softmax_T(P_i - sum_j w_ij P_j),  w_ij = s_ij / sum_j s_ij

    Weighted mode falls back to average when every s_ij is zero.
    """
    if not temperature > 0:
        raise UsageError("temperature must be positive")
    if mode not in CALIBRATION_MODES:
        raise UsageError(f"mode must be one of {CALIBRATION_MODES}")
    p_i = np.asarray(target_dist, dtype=np.float64)
    s = np.asarray(sims, dtype=np.float64).reshape(-1)
    n = len(other_dists)
    if s.shape[0] != n:
        raise ShapeError("need exactly one similarity per other distribution")
    if n == 0:
        return softmax(p_i, temperature)
    others = np.asarray(other_dists, dtype=np.float64).reshape(n, -1)
    if others.shape[1] != p_i.shape[0]:
        raise ShapeError("distribution lengths differ")
    total = s.sum()
    if mode == "weighted" and total > 0:
        penalty = (s / total) @ others
    else:
        penalty = (s @ others) / n
    return softmax(p_i - penalty, temperature)


def weights(sims: Sequence[float], mode: str = "average") -> np.ndarray:
    """Per-distractor coefficients applied by ``calibrate``."""
    s = np.asarray(sims, dtype=np.float64)
    if mode == "weighted" and s.sum() > 0:
        return s / s.sum()
    return s / max(len(s), 1)


def _rank(dist: np.ndarray) -> np.ndarray:
    # descending probability, ties by lower token index
    return np.lexsort((np.arange(dist.shape[0]), -dist))


def restrict_vocab(dist: np.ndarray, mode: str, k_or_p: float) -> np.ndarray:
    """Zero everything outside the top-k / nucleus set and renormalize."""
    d = np.asarray(dist, dtype=np.float64)
    order = _rank(d)
    if mode == "topk":
        k = int(k_or_p)
        if k < 1:
            raise UsageError("k must be >= 1")
        n_keep = min(k, d.shape[0])
    elif mode == "topp":
        p = float(k_or_p)
        if not (0.0 < p <= 1.0):
            raise UsageError("p must lie in (0, 1]")
        cum = np.cumsum(d[order])
        n_keep = min(int(np.searchsorted(cum, p * cum[-1], side="left")) + 1, d.shape[0])
    else:
        raise UsageError("mode must be 'topk' or 'topp'")
    drop = order[n_keep:]
    if not np.any(d[drop] > 0):
        return d.copy()
    out = d.copy()
    out[drop] = 0.0
    return out / out.sum()


def sample_next(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw in token-index order."""
    d = np.asarray(dist, dtype=np.float64)
    cum = np.cumsum(d)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    if idx >= d.shape[0]:  # u * total rounded onto the last boundary
        idx = int(np.flatnonzero(d)[-1])
    return idx


def _step_dist(captioner: CaptionerBackend, ctx: CalibrationContext, prefix: list[int],
               config: DecodingConfig, step: int) -> np.ndarray:
    try:
        p_i = np.asarray(captioner.next_word_dist(ctx.target, prefix), dtype=np.float64)
        if not config.distinctive:
            return p_i
        others = [captioner.next_word_dist(o, prefix) for o in ctx.others]
    except Exception as e:
        raise DecodingError(step, e) from e
    return calibrate(p_i, others, ctx.sims, config.temperature, config.calibration_mode)


def generate(captioner: CaptionerBackend, ctx: CalibrationContext, config: DecodingConfig,
             rng: np.random.Generator | None = None) -> TokenSequence:
    """Left-to-right generation for greedy and the sampling strategies."""
    if config.strategy == "beam":
        raise UsageError("beam search is handled by beam_search()")
    if rng is None:
        rng = make_rng(config.seed)
    eos = captioner.vocabulary.eos_id
    prefix: list[int] = []
    for t in range(config.max_len):
        dist = _step_dist(captioner, ctx, prefix, config, t)
        if config.strategy == "greedy":
            tok = int(np.argmax(dist))
        else:
            if config.k is not None:
                dist = restrict_vocab(dist, "topk", config.k)
            else:
                dist = restrict_vocab(dist, "topp", config.p)
            tok = sample_next(dist, rng)
        prefix.append(tok)
        if tok == eos:
            return TokenSequence(tuple(prefix), True)
    return TokenSequence(tuple(prefix), False)


def beam_search(captioner: CaptionerBackend, target: Patch, width: int,
                max_len: int = 32) -> TokenSequence:
    """Uncalibrated beam search over cumulative log-probability.

    Returns the best eos-terminated hypothesis; if none finished within
    ``max_len`` steps, the best surviving (max-length) hypothesis.
    """
    if width < 1:
        raise UsageError("beam width must be >= 1")
    eos = captioner.vocabulary.eos_id
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for t in range(max_len):
        expansions = []
        for score, ids in beams:
            try:
                dist = np.asarray(captioner.next_word_dist(target, list(ids)), dtype=np.float64)
            except Exception as e:
                raise DecodingError(t, e) from e
            for v in np.flatnonzero(dist > 0):
                expansions.append((score + math.log(dist[v]), ids + (int(v),)))
        if not expansions:
            raise ContractError("captioner returned an all-zero distribution")
        expansions.sort(key=lambda e: (-e[0], e[1]))
        beams = []
        for score, ids in expansions[:width]:
            (finished if ids[-1] == eos else beams).append((score, ids))
        if not beams:
            break
        if finished and max(f[0] for f in finished) > max(b[0] for b in beams):
            break
    if finished:
        best = min(finished, key=lambda e: (-e[0], e[1]))
        return TokenSequence(best[1], True)
    best = min(beams, key=lambda e: (-len(e[1]), -e[0], e[1]))
    return TokenSequence(best[1], False)


def decode(captioner: CaptionerBackend, ctx: CalibrationContext, config: DecodingConfig,
           rng: np.random.Generator | None = None) -> TokenSequence:
    if config.strategy == "beam":
        return beam_search(captioner, ctx.target, config.beam_width, config.max_len)
    return generate(captioner, ctx, config, rng)
