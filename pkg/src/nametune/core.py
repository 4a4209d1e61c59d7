"""Shared value types: embedding spaces, token sequences, class entries, seeded RNG."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError

DTYPE = np.float32
RNG_ALGORITHM = "numpy.PCG64"


def _frozen(a, dtype=DTYPE) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


class Similarity(str, enum.Enum):
    COSINE = "cosine"
    DOT = "dot"


@dataclass(frozen=True)
class EmbeddingSpace:
    d_token: int
    d_embed: int
    similarity: Similarity = Similarity.COSINE
    temperature: float = 1.0
    max_seq_len: int = 32

    def __post_init__(self):
        object.__setattr__(self, "similarity", Similarity(self.similarity))
        if self.d_token < 1 or self.d_embed < 1:
            raise ConfigurationError("d_token and d_embed must be positive")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be >= 2")


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """An ``l x d_token`` block of token embeddings. ``l == 0`` is an empty prompt."""

    rows: np.ndarray
    source_text: Optional[str] = None

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2:
            raise DimensionError(f"token rows must be 2-D, got shape {rows.shape}")
        object.__setattr__(self, "rows", _frozen(rows))

    @classmethod
    def empty(cls, d_token: int, source_text: Optional[str] = "") -> "TokenSequence":
        return cls(np.zeros((0, d_token), dtype=DTYPE), source_text)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def d_token(self) -> int:
        return self.rows.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.rows.shape == other.rows.shape and bool(np.array_equal(self.rows, other.rows))

    __hash__ = None


def concat(a: TokenSequence, b: TokenSequence) -> TokenSequence:
    if a.d_token != b.d_token:
        raise DimensionError(f"cannot concatenate widths {a.d_token} and {b.d_token}")
    text = None
    if a.source_text is not None and b.source_text is not None:
        text = " ".join(t for t in (a.source_text, b.source_text) if t)
    return TokenSequence(np.concatenate([a.rows, b.rows], axis=0), text)


def add_offset(n: TokenSequence, offset) -> TokenSequence:
    offset = np.asarray(offset)
    if offset.shape != n.shape:
        raise DimensionError(f"offset shape {offset.shape} does not match tokens {n.shape}")
    return TokenSequence(n.rows + offset.astype(DTYPE, copy=False), n.source_text)


@dataclass(frozen=True, eq=False)
class ClassEntry:
    class_id: int
    name_text: str
    name_tokens: TokenSequence
    offset: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.class_id < 0:
            raise ConfigurationError("class_id must be non-negative")
        offset = np.zeros(self.name_tokens.shape, DTYPE) if self.offset is None else self.offset
        offset = np.asarray(offset)
        if offset.shape != self.name_tokens.shape:
            raise DimensionError(
                f"class {self.class_id}: offset shape {offset.shape} != name shape {self.name_tokens.shape}"
            )
        object.__setattr__(self, "offset", _frozen(offset))

    @property
    def l_class(self) -> int:
        return len(self.name_tokens)

    def tuned_tokens(self) -> TokenSequence:
        return add_offset(self.name_tokens, self.offset)


def check_class_set(classes: Sequence[ClassEntry]) -> None:
    ids = [c.class_id for c in classes]
    if ids != list(range(len(ids))):
        raise ConfigurationError(f"class ids must be contiguous 0..N-1 in order, got {ids}")


def relabel(classes: Sequence[ClassEntry]) -> list[ClassEntry]:
    """Copy ``classes`` with ids renumbered 0..n-1 in the given order."""
    return [ClassEntry(i, c.name_text, c.name_tokens, c.offset) for i, c in enumerate(classes)]


class SeededRng:
    """A single-owner PCG64 stream. Children are derived by name, never shared."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def fork(self, *key) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *key))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape, dtype=np.float64) * std).astype(DTYPE)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def derive_seed(seed: int, *key) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in key:
        h.update(b"\x1f")
        h.update(repr(part).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True, eq=False)
class Examples:
    """Labeled visual embeddings: ``features`` is ``n x d_embed``, ``labels`` is ``n``."""

    features: np.ndarray
    labels: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
            raise DimensionError(f"features {feats.shape} do not match labels {labels.shape}")
        if self.ids and len(self.ids) != len(labels):
            raise DimensionError("ids do not match labels")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", tuple(self.ids))

    @classmethod
    def from_pairs(cls, pairs) -> "Examples":
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
        return cls(np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs]), [y for _, y in pairs])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "Examples":
        index = np.asarray(index, dtype=np.int64)
        ids = tuple(self.ids[i] for i in index) if self.ids else ()
        return Examples(self.features[index], self.labels[index], ids)


def as_examples(data) -> Examples:
    return data if isinstance(data, Examples) else Examples.from_pairs(data)
