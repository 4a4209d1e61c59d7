"""Frozen dual encoders, frame-averaged video embeddings and the feature cache.

Two desk-scale encoders ship here: :class:`ToyTransformerEncoder`, a tiny
CLIP-like causal transformer, and :class:`LinearEncoder`, whose text side is a
fixed linear map (so logits are affine in the token embeddings under dot
similarity). Both keep float32 weights and run their forward passes in
float64 torch so input gradients can be checked against finite differences.
"""
from __future__ import annotations

import abc
import hashlib
import io
import math
import struct
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from ._fileio import atomic_write_bytes
from .core import DTYPE, EmbeddingSpace, SeededRng, Similarity, TokenSequence
from .errors import (
    ConfigurationError,
    DimensionError,
    EmptyInputError,
    FormatError,
    SequenceLengthError,
)

FEATURE_CACHE_MAGIC = b"NTFC"
FEATURE_CACHE_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


class HashTokenizer:
    """Whitespace tokenizer mapping each token through a keyed hash into a fixed table."""

    def __init__(self, d_token: int, seed: int, vocab_size: int = 4096, scale: float = 1.0):
        self.d_token = d_token
        self.vocab_size = vocab_size
        self._key = int(seed).to_bytes(8, "little", signed=False)
        self.table = SeededRng(seed).fork("vocab").normal((vocab_size, d_token), scale)
        self.table.flags.writeable = False

    def token_id(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key)
        return int.from_bytes(h.digest(), "little") % self.vocab_size

    def __call__(self, text: str) -> TokenSequence:
        ids = [self.token_id(tok) for tok in text.lower().split()]
        if not ids:
            return TokenSequence.empty(self.d_token, text)
        return TokenSequence(self.table[ids], text)


class FrozenDualEncoder(abc.ABC):
    """Text encoder E^t over token embeddings plus a visual encoder E^v.

    Subclasses implement ``text_forward`` as a differentiable float64 torch
    function; weights are never exposed to autograd.
    """

    space: EmbeddingSpace
    frames_per_video: int = 10

    def tokenize(self, text: str) -> TokenSequence:
        raise NotImplementedError(f"{type(self).__name__} has no tokenizer")

    @abc.abstractmethod
    def text_forward(self, rows: torch.Tensor) -> torch.Tensor:
        """Map an ``l x d_token`` float64 tensor to a ``d_embed`` tensor."""

    @abc.abstractmethod
    def encode_visual(self, media) -> np.ndarray:
        ...

    @abc.abstractmethod
    def weights(self) -> dict[str, np.ndarray]:
        ...

    def check_length(self, length: int, what: str = "text input") -> None:
        if length < 1:
            raise SequenceLengthError(f"{what} is empty")
        if length > self.space.max_seq_len:
            raise SequenceLengthError(
                f"{what} has {length} tokens, exceeding max_seq_len={self.space.max_seq_len}"
            )

    def _rows_tensor(self, t: TokenSequence) -> torch.Tensor:
        if t.d_token != self.space.d_token:
            raise DimensionError(f"token width {t.d_token} != encoder d_token {self.space.d_token}")
        self.check_length(len(t))
        return torch.from_numpy(np.asarray(t.rows, dtype=np.float64))

    def encode_text(self, t: TokenSequence) -> np.ndarray:
        rows = self._rows_tensor(t)
        with torch.no_grad():
            return self.text_forward(rows).numpy()

    def text_input_gradient(self, t: TokenSequence, cotangent) -> np.ndarray:
        """Vector-Jacobian product of E^t at ``t``: d<cotangent, E^t(t)>/dt."""
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != (self.space.d_embed,):
            raise DimensionError(f"cotangent shape {cot.shape} != ({self.space.d_embed},)")
        rows = self._rows_tensor(t).clone().requires_grad_(True)
        out = self.text_forward(rows)
        (grad,) = torch.autograd.grad(out, rows, grad_outputs=torch.from_numpy(cot))
        return grad.numpy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, w in sorted(self.weights().items()):
            h.update(name.encode())
            h.update(str(w.shape).encode())
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


class _LinearVisualMixin:
    """Fixed visual map ``frame (d_frame) -> W_v @ frame``."""

    _w_visual: np.ndarray

    def encode_visual(self, media) -> np.ndarray:
        frame = np.asarray(media, dtype=np.float64)
        if frame.shape != (self._w_visual.shape[1],):
            raise DimensionError(f"frame shape {frame.shape} != ({self._w_visual.shape[1]},)")
        return self._w_visual.astype(np.float64) @ frame

    @property
    def d_frame(self) -> int:
        return self._w_visual.shape[1]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=DTYPE)
    a.flags.writeable = False
    return a


class ToyTransformerEncoder(_LinearVisualMixin, FrozenDualEncoder):
    """Pre-LN causal transformer with end-of-sequence pooling, CLIP-style."""

    def __init__(
        self,
        seed: int = 0,
        depth: int = 2,
        heads: int = 2,
        d_token: int = 16,
        d_embed: int = 8,
        d_frame: int = 12,
        max_seq_len: int = 32,
        similarity: str = "cosine",
        temperature: float = 0.05,
        token_scale: float = 0.25,
        frames_per_video: int = 10,
    ):
        if d_token % heads:
            raise ConfigurationError("d_token must be divisible by heads")
        self.space = EmbeddingSpace(d_token, d_embed, Similarity(similarity), temperature, max_seq_len)
        self.depth, self.heads, self.seed = depth, heads, seed
        self.frames_per_video = frames_per_video
        self.tokenizer = HashTokenizer(d_token, seed, scale=token_scale)
        rng = SeededRng(seed).fork("toy-transformer")
        d, h = d_token, 4 * d_token
        w: dict[str, np.ndarray] = {"pos": rng.normal((max_seq_len, d), 0.1 * token_scale)}
        for i in range(depth):
            w[f"l{i}.ln1.g"] = 1.0 + rng.normal((d,), 0.1)
            w[f"l{i}.ln1.b"] = rng.normal((d,), 0.1)
            w[f"l{i}.qkv"] = rng.normal((d, 3 * d), 1 / math.sqrt(d))
            w[f"l{i}.out"] = rng.normal((d, d), 1 / math.sqrt(d))
            w[f"l{i}.ln2.g"] = 1.0 + rng.normal((d,), 0.1)
            w[f"l{i}.ln2.b"] = rng.normal((d,), 0.1)
            w[f"l{i}.fc1"] = rng.normal((d, h), 1 / math.sqrt(d))
            w[f"l{i}.fc1.b"] = rng.normal((h,), 0.1)
            w[f"l{i}.fc2"] = rng.normal((h, d), 1 / math.sqrt(h))
            w[f"l{i}.fc2.b"] = rng.normal((d,), 0.1)
        w["lnf.g"] = 1.0 + rng.normal((d,), 0.1)
        w["lnf.b"] = rng.normal((d,), 0.1)
        w["proj"] = rng.normal((d, d_embed), 1 / math.sqrt(d))
        w["visual"] = rng.normal((d_embed, d_frame), 1 / math.sqrt(d_frame))
        self._w = {k: _readonly(v) for k, v in w.items()}
        self._w_visual = self._w["visual"]
        self._t = {k: torch.from_numpy(v.astype(np.float64)) for k, v in self._w.items()}

    def tokenize(self, text: str) -> TokenSequence:
        return self.tokenizer(text)

    def weights(self) -> dict[str, np.ndarray]:
        return dict(self._w)

    @staticmethod
    def _ln(x, g, b):
        return torch.nn.functional.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)

    def text_forward(self, rows: torch.Tensor) -> torch.Tensor:
        w = self._t
        l, d = rows.shape
        nh, hd = self.heads, d // self.heads
        x = rows + w["pos"][:l]
        mask = torch.ones(l, l, dtype=torch.bool).triu(1)
        for i in range(self.depth):
            y = self._ln(x, w[f"l{i}.ln1.g"], w[f"l{i}.ln1.b"])
            q, k, v = (y @ w[f"l{i}.qkv"]).split(d, dim=-1)
            q, k, v = (z.reshape(l, nh, hd).transpose(0, 1) for z in (q, k, v))
            att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
            att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
            y = (att @ v).transpose(0, 1).reshape(l, d)
            x = x + y @ w[f"l{i}.out"]
            y = self._ln(x, w[f"l{i}.ln2.g"], w[f"l{i}.ln2.b"])
            y = torch.nn.functional.gelu(y @ w[f"l{i}.fc1"] + w[f"l{i}.fc1.b"])
            x = x + y @ w[f"l{i}.fc2"] + w[f"l{i}.fc2.b"]
        x = self._ln(x[-1], w["lnf.g"], w["lnf.b"])
        return x @ w["proj"]


class LinearEncoder(_LinearVisualMixin, FrozenDualEncoder):
    """E^t(t) = W_t @ flatten(zero_pad(t)); no bias, so E^t is linear in the tokens."""

    def __init__(
        self,
        seed: int = 0,
        d_token: int = 16,
        d_embed: int = 8,
        d_frame: int = 12,
        max_seq_len: int = 24,
        similarity: str = "dot",
        temperature: float = 1.0,
        token_scale: float = 0.5,
        frames_per_video: int = 10,
    ):
        self.space = EmbeddingSpace(d_token, d_embed, Similarity(similarity), temperature, max_seq_len)
        self.seed = seed
        self.frames_per_video = frames_per_video
        self.tokenizer = HashTokenizer(d_token, seed, scale=token_scale)
        rng = SeededRng(seed).fork("linear")
        width = max_seq_len * d_token
        self._w = {
            "text": _readonly(rng.normal((d_embed, width), 1 / math.sqrt(d_token))),
            "visual": _readonly(rng.normal((d_embed, d_frame), 1 / math.sqrt(d_frame))),
        }
        self._w_visual = self._w["visual"]
        self._w_text = torch.from_numpy(self._w["text"].astype(np.float64))

    @property
    def text_matrix(self) -> np.ndarray:
        return self._w["text"]

    def tokenize(self, text: str) -> TokenSequence:
        return self.tokenizer(text)

    def weights(self) -> dict[str, np.ndarray]:
        return dict(self._w)

    def text_forward(self, rows: torch.Tensor) -> torch.Tensor:
        flat = rows.reshape(-1)
        return self._w_text[:, : flat.shape[0]] @ flat


class FeatureCacheEncoder(FrozenDualEncoder):
    """Visual side backed by precomputed features; text calls go to ``text_encoder``."""

    def __init__(self, features: Mapping[str, np.ndarray], text_encoder: Optional[FrozenDualEncoder] = None,
                 d_embed: Optional[int] = None):
        self.features = {k: _readonly(v) for k, v in features.items()}
        self.text_encoder = text_encoder
        if text_encoder is not None:
            self.space = text_encoder.space
        else:
            if d_embed is None:
                d_embed = len(next(iter(self.features.values()))) if self.features else 1
            self.space = EmbeddingSpace(1, d_embed)
        for key, v in self.features.items():
            if v.shape != (self.space.d_embed,):
                raise DimensionError(f"cached feature {key!r} has shape {v.shape}")

    @classmethod
    def load(cls, path, text_encoder: Optional[FrozenDualEncoder] = None) -> "FeatureCacheEncoder":
        return cls(read_feature_cache(path), text_encoder)

    def _text(self) -> FrozenDualEncoder:
        if self.text_encoder is None:
            raise ConfigurationError("feature cache encoder has no text encoder attached")
        return self.text_encoder

    def tokenize(self, text: str) -> TokenSequence:
        return self._text().tokenize(text)

    def text_forward(self, rows):
        return self._text().text_forward(rows)

    def encode_visual(self, media) -> np.ndarray:
        try:
            return self.features[media]
        except KeyError:
            raise KeyError(f"no cached feature for key {media!r}") from None

    def weights(self) -> dict[str, np.ndarray]:
        return self.text_encoder.weights() if self.text_encoder is not None else {}


def encode_video(enc: FrozenDualEncoder, frames: Sequence) -> np.ndarray:
    """Mean of per-frame visual embeddings (no normalization)."""
    if len(frames) == 0:
        raise EmptyInputError("encode_video needs at least one frame")
    total = np.zeros(enc.space.d_embed, dtype=np.float64)
    for frame in frames:
        total += enc.encode_visual(frame)
    return total / len(frames)


def uniform_frame_indices(total: int, k: int) -> list[int]:
    """``floor((i + 0.5) * total / k)`` for i in 0..k-1."""
    if total < 1 or k < 1:
        raise ConfigurationError(f"need total >= 1 and k >= 1, got total={total}, k={k}")
    return [((2 * i + 1) * total) // (2 * k) for i in range(k)]


ENCODERS = {"toy-transformer": ToyTransformerEncoder, "linear": LinearEncoder}


def make_encoder(kind: str, seed: int = 0, **overrides) -> FrozenDualEncoder:
    kind = kind.replace("_", "-")
    if kind not in ENCODERS:
        raise ConfigurationError(f"unknown encoder {kind!r}; choose from {sorted(ENCODERS)}")
    return ENCODERS[kind](seed=seed, **overrides)


# -- feature cache file -------------------------------------------------------


def encode_feature_cache(features: Mapping[str, np.ndarray], d_embed: Optional[int] = None) -> bytes:
    items = sorted(((k.encode("utf-8"), np.asarray(v)) for k, v in features.items()), key=lambda kv: kv[0])
    if d_embed is None:
        if not items:
            raise ConfigurationError("d_embed is required for an empty cache")
        d_embed = items[0][1].shape[0]
    buf = io.BytesIO()
    buf.write(FEATURE_CACHE_MAGIC)
    buf.write(struct.pack("<IIBQ", FEATURE_CACHE_VERSION, d_embed, 0, len(items)))
    for key, vec in items:
        if vec.shape != (d_embed,):
            raise DimensionError(f"feature {key!r} has shape {vec.shape}, expected ({d_embed},)")
        if len(key) > 0xFFFF:
            raise FormatError(f"key too long: {len(key)} bytes")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(np.asarray(vec, dtype="<f4").tobytes())
    return buf.getvalue()


def write_feature_cache(path, features: Mapping[str, np.ndarray], d_embed: Optional[int] = None) -> None:
    atomic_write_bytes(path, encode_feature_cache(features, d_embed))


def decode_feature_cache(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != FEATURE_CACHE_MAGIC:
        raise FormatError("not a feature cache (bad magic)")
    head = struct.calcsize("<IIBQ")
    if len(data) < 4 + head:
        raise FormatError("truncated feature cache header")
    version, d_embed, code, count = struct.unpack_from("<IIBQ", data, 4)
    if version != FEATURE_CACHE_VERSION:
        raise FormatError(f"unsupported feature cache version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    pos, out = 4 + head, {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            key = data[pos : pos + klen].decode("utf-8")
            pos += klen
            nbytes = d_embed * dt.itemsize
            if pos + nbytes > len(data):
                raise FormatError("truncated feature cache entry")
            out[key] = np.frombuffer(data, dtype=dt, count=d_embed, offset=pos).astype(DTYPE)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated feature cache: {exc}") from None
    if pos != len(data):
        raise FormatError("trailing bytes after feature cache entries")
    return out


def read_feature_cache(path) -> dict[str, np.ndarray]:
    return decode_feature_cache(Path(path).read_bytes())
