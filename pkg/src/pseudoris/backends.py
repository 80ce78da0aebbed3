"""Model contracts (captioner, scorer, mask extractor) and a named registry.

The pipeline never talks to a concrete model; it resolves backends by
``(kind, name)`` and uses only the methods declared here.  Word
distributions and visual embeddings travel as plain 1-d ``numpy`` arrays;
``check_distribution`` and ``check_embedding`` enforce their invariants.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .errors import BackendLookupError, ContractError, RegistrationError, UsageError

if TYPE_CHECKING:
    from .maskops import BinaryMask, Image, Patch

#: Floor applied to every image-text score so score ratios stay finite.
SCORE_FLOOR = 1e-6

DIST_ATOL = 1e-6
NORM_ATOL = 1e-6

KINDS = ("captioner", "mask_extractor", "scorer")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    bos_id: int
    eos_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise UsageError("vocabulary tokens must be unique")
        n = len(self.tokens)
        if not (0 <= self.bos_id < n and 0 <= self.eos_id < n):
            raise UsageError("bos/eos ids out of range")
        if self.bos_id == self.eos_id:
            raise UsageError("bos_id and eos_id must differ")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UsageError(f"token {token!r} not in vocabulary") from None

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> str:
        """Join token strings with spaces, dropping bos/eos."""
        skip = (self.bos_id, self.eos_id)
        return " ".join(self.tokens[i] for i in ids if i not in skip)


@dataclass(frozen=True)
class TokenSequence:
    """Generated token ids (bos excluded); ``complete`` means eos-terminated."""

    ids: tuple[int, ...]
    complete: bool

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab: Vocabulary, max_len: int) -> None:
        if vocab.bos_id in self.ids:
            raise ContractError("token sequence must not contain bos")
        if self.complete and (not self.ids or self.ids[-1] != vocab.eos_id):
            raise ContractError("complete sequence must end with eos")
        if len(self.ids) > max_len:
            raise ContractError(f"sequence longer than max_len={max_len}")


def check_distribution(probs: np.ndarray, size: int | None = None) -> np.ndarray:
    """Validate a word distribution and return it as a float64 array."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ContractError("word distribution must be 1-d")
    if size is not None and p.shape[0] != size:
        raise ContractError(f"distribution length {p.shape[0]} != vocabulary size {size}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ContractError("distribution entries must be finite and nonnegative")
    if abs(p.sum() - 1.0) > DIST_ATOL:
        raise ContractError(f"distribution sums to {p.sum():.9f}, not 1")
    return p


def check_embedding(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError("embedding must be 1-d")
    if abs(np.linalg.norm(v) - 1.0) > NORM_ATOL:
        raise ContractError("embedding must have unit Euclidean norm")
    return v


class CaptionerBackend(ABC):
    """Frozen autoregressive captioner over a fixed vocabulary."""

    #: Set True when instances must not be called from several threads at once.
    exclusive: bool = False

    @property
    @abstractmethod
    def vocabulary(self) -> Vocabulary: ...

    @abstractmethod
    def embed(self, patch: Patch) -> np.ndarray:
        """Unit-norm visual embedding of ``patch``."""

    @abstractmethod
    def next_word_dist(self, patch: Patch, prefix: Sequence[int]) -> np.ndarray:
        """P(y_t | y_<t, patch) for the given prefix (bos excluded)."""


class ScorerBackend(ABC):
    exclusive: bool = False

    @abstractmethod
    def score(self, patch: Patch, text: str) -> float:
        """Image-text similarity, already floored at ``SCORE_FLOOR``."""


class MaskExtractorBackend(ABC):
    exclusive: bool = False

    @abstractmethod
    def extract(self, image: Image) -> list[BinaryMask]: ...


@dataclass(frozen=True)
class Registration:
    kind: str
    name: str
    factory: Callable[[], object]
    exclusive: bool = False


@dataclass
class BackendRegistry:
    _entries: dict[tuple[str, str], Registration] = field(default_factory=dict)
    _instances: dict[tuple[str, str], object] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def register(self, name: str, kind: str, factory: Callable[[], object],
                 exclusive: bool = False) -> Registration:
        if kind not in KINDS:
            raise UsageError(f"unknown backend kind {kind!r}; expected one of {KINDS}")
        if not name:
            raise UsageError("backend name must be nonempty")
        key = (kind, name)
        with self._lock:
            if key in self._entries:
                raise RegistrationError(f"{kind} backend {name!r} already registered")
            reg = Registration(kind, name, factory, exclusive)
            self._entries[key] = reg
        return reg

    def resolve(self, kind: str, name: str):
        """Return the (cached) instance built by the registered factory."""
        if kind not in KINDS:
            raise UsageError(f"unknown backend kind {kind!r}; expected one of {KINDS}")
        key = (kind, name)
        with self._lock:
            reg = self._entries.get(key)
            if reg is None:
                available = ", ".join(self.names(kind)) or "<none>"
                raise BackendLookupError(
                    f"no {kind} backend named {name!r}; available: {available}")
            if key not in self._instances:
                inst = reg.factory()
                if reg.exclusive:
                    inst.exclusive = True
                self._instances[key] = inst
            return self._instances[key]

    def names(self, kind: str) -> list[str]:
        return sorted(n for k, n in self._entries if k == kind)

    def unregister(self, kind: str, name: str) -> None:
        with self._lock:
            self._entries.pop((kind, name), None)
            self._instances.pop((kind, name), None)


default_registry = BackendRegistry()


def register_backend(name: str, kind: str, factory: Callable[[], object],
                     exclusive: bool = False) -> Registration:
    return default_registry.register(name, kind, factory, exclusive)


def resolve_backend(kind: str, name: str):
    return default_registry.resolve(kind, name)


def list_backends(kind: str) -> list[str]:
    return default_registry.names(kind)
