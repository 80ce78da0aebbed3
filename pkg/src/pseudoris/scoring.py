"""Uniqueness, correctness and distinctiveness of caption candidates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .backends import SCORE_FLOOR, ScorerBackend, TokenSequence
from .errors import ContractError, ShapeError, StateError, UsageError
from .maskops import CropSpec, Patch

METRICS = ("uniqueness", "correctness", "distinctiveness")
DEFAULT_TAU = 1.3

#: Returned by uos/dos when the image has no other mask to confuse with.
UNIQUE = math.inf

STOP_WORDS = frozenset({
    # prepositions
    "with", "in", "on", "at", "near", "behind", "under", "over", "by", "of",
    # relative markers
    "that", "which", "who",
    # verb / gerund markers
    "wearing", "holding", "sitting", "standing", "riding", "eating", "looking",
})


@dataclass
class CaptionCandidate:
    mask_id: int
    text: str
    tokens: TokenSequence
    crop_spec: CropSpec
    decoding_config_index: int
    crop_index: int = 0
    theta_target: float | None = None
    theta_others: list[float] = field(default_factory=list)
    cos_target: float | None = None
    cos_others: list[float] = field(default_factory=list)
    uos: float | None = None
    cos: float | None = None
    dos: float | None = None

    def metric(self, name: str) -> float:
        value = {"uniqueness": self.uos, "correctness": self.cos,
                 "distinctiveness": self.dos}.get(name, ...)
        if value is ...:
            raise UsageError(f"unknown metric {name!r}; expected one of {METRICS}")
        if value is None:
            raise StateError(f"{name} has not been computed for candidate {self.text!r}")
        return value


@dataclass(frozen=True)
class FilterConfig:
    metric: str = "distinctiveness"
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.metric not in METRICS:
            raise UsageError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.tau < 0:
            raise UsageError("tau must be nonnegative")


def extract_noun_phrase(text: str) -> str:
    """Leading words of ``text`` up to the first relational stop word.

    A text that opens with a stop word has no such prefix and is returned
    whole (lowercased), which keeps the function idempotent.
    """
    words = text.lower().split()
    if not words:
        raise UsageError("cannot extract a noun phrase from empty text")
    kept = []
    for w in words:
        if w in STOP_WORDS:
            break
        kept.append(w)
    return " ".join(kept or words)


def uos(theta_target: float, theta_others: Sequence[float]) -> float:
    if len(theta_others) == 0:
        return UNIQUE
    return theta_target / max(theta_others)


def dos(cos_target: float, theta_target: float, cos_others: Sequence[float],
        theta_others: Sequence[float]) -> float:
    if len(cos_others) != len(theta_others):
        raise ShapeError("cos_others and theta_others differ in length")
    if len(cos_others) == 0:
        return UNIQUE
    best = max(c * t for c, t in zip(cos_others, theta_others))
    return (cos_target * theta_target) / best


def floored(value: float) -> float:
    return max(float(value), SCORE_FLOOR)


def cos_score(scorer: ScorerBackend, masked_patch: Patch, caption: str,
              noun_phrase: Callable[[str], str] = extract_noun_phrase) -> float:
    if not masked_patch.spec.masked:
        raise ContractError("correctness must be scored on a masked patch")
    if not caption.strip():
        return SCORE_FLOOR
    return floored(scorer.score(masked_patch, noun_phrase(caption)))


def filter_candidates(candidates: Sequence[CaptionCandidate],
                      config: FilterConfig) -> list[CaptionCandidate]:
    """Keep candidates whose chosen metric is >= tau, in input order."""
    return [c for c in candidates if c.metric(config.metric) >= config.tau]
