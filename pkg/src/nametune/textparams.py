"""Learnable text inputs for Name Tuning, CoOp, CoOp-CSC and CoNa."""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._fileio import atomic_write_bytes
from .classify import PromptSpec
from .core import DTYPE, ClassEntry, SeededRng, TokenSequence, add_offset, concat
from .errors import ConfigurationError, DimensionError, FormatError, SequenceLengthError

INIT_STD = 0.02


class Method(str, enum.Enum):
    NAME_TUNING = "name_tuning"
    COOP = "coop"
    COOP_CSC = "coop_csc"
    CONA = "cona"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_").lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown method {value!r}; expected one of {[m.value for m in cls]}"
            ) from None

    @property
    def has_offsets(self) -> bool:
        return self in (Method.NAME_TUNING, Method.CONA)


_METHOD_CODES = {Method.NAME_TUNING: 0, Method.COOP: 1, Method.COOP_CSC: 2, Method.CONA: 3}


@dataclass
class TextParameterSet:
    """Mutable learnable state of one tuning method.

    ``name_overrides`` replaces the class-name tokens in the random-init
    ablation; offsets are still added on top of it.
    """

    method: Method
    l_context: int = 0
    shared_context: Optional[np.ndarray] = None
    class_contexts: Optional[list[np.ndarray]] = None
    offsets: Optional[list[np.ndarray]] = None
    fixed_prompt: Optional[PromptSpec] = None
    name_overrides: Optional[list[TokenSequence]] = None

    def __post_init__(self):
        self.method = Method.parse(self.method)
        m = self.method
        want = {
            Method.NAME_TUNING: (False, False, True, True),
            Method.COOP: (True, False, False, False),
            Method.COOP_CSC: (False, True, False, False),
            Method.CONA: (True, False, True, False),
        }[m]
        have = (
            self.shared_context is not None,
            self.class_contexts is not None,
            self.offsets is not None,
            self.fixed_prompt is not None,
        )
        if have != want:
            raise ConfigurationError(
                f"{m.value} parameters need (shared_context, class_contexts, offsets, fixed_prompt) "
                f"presence {want}, got {have}"
            )

    @property
    def n_classes(self) -> Optional[int]:
        for group in (self.offsets, self.class_contexts):
            if group is not None:
                return len(group)
        return None

    def learnable(self) -> list[np.ndarray]:
        """Learnable tensors in canonical order: shared context, class contexts, offsets."""
        out = []
        if self.shared_context is not None:
            out.append(self.shared_context)
        if self.class_contexts is not None:
            out.extend(self.class_contexts)
        if self.offsets is not None:
            out.extend(self.offsets)
        return out

    def with_learnable(self, arrays: Sequence[np.ndarray], dtype=DTYPE) -> "TextParameterSet":
        arrays = [np.array(a, dtype=dtype, copy=True) for a in arrays]
        old = self.learnable()
        if len(arrays) != len(old) or any(a.shape != b.shape for a, b in zip(arrays, old)):
            raise DimensionError("replacement tensors do not match the parameter layout")
        it = iter(arrays)
        ctx = next(it) if self.shared_context is not None else None
        cctx = [next(it) for _ in self.class_contexts] if self.class_contexts is not None else None
        offs = [next(it) for _ in self.offsets] if self.offsets is not None else None
        return replace(self, shared_context=ctx, class_contexts=cctx, offsets=offs)

    def copy(self) -> "TextParameterSet":
        return self.with_learnable(self.learnable(), dtype=None)

    def snapshot(self) -> "TextParameterSet":
        return self.with_learnable(self.learnable(), dtype=DTYPE)

    def base_name(self, entry: ClassEntry) -> TokenSequence:
        if self.name_overrides is not None:
            return self.name_overrides[entry.class_id]
        return entry.name_tokens

    def prefix(self, entry: ClassEntry) -> TokenSequence:
        if self.method is Method.NAME_TUNING:
            return self.fixed_prompt.tokenized_prefix
        if self.method is Method.COOP_CSC:
            return TokenSequence(self.class_contexts[entry.class_id])
        return TokenSequence(self.shared_context)

    def assemble(self, entry: ClassEntry, max_seq_len: Optional[int] = None) -> TokenSequence:
        return assemble(self, entry, max_seq_len)


def init_parameters(
    method,
    classes: Sequence[ClassEntry],
    l_context: int,
    rng: SeededRng,
    ablation_random_names: bool = False,
    prompt: Optional[PromptSpec] = None,
) -> TextParameterSet:
    """Fresh parameters: contexts ~ N(0, 0.02^2), offsets exactly zero."""
    method = Method.parse(method)
    if not classes:
        raise ConfigurationError("need at least one class")
    d_token = classes[0].name_tokens.d_token
    n = len(classes)
    if method is not Method.NAME_TUNING and l_context < 0:
        raise ConfigurationError("l_context must be >= 0")
    if method in (Method.COOP, Method.COOP_CSC) and l_context < 1:
        raise ConfigurationError(f"{method.value} needs l_context >= 1")
    if ablation_random_names and not method.has_offsets:
        raise ConfigurationError("the random-name ablation applies only to methods with name offsets")
    if method is Method.NAME_TUNING and prompt is None:
        raise ConfigurationError("name_tuning needs a fixed prompt")

    ctx_rng = rng.fork("context")
    shared = class_ctx = offsets = None
    if method in (Method.COOP, Method.CONA):
        shared = ctx_rng.normal((l_context, d_token), INIT_STD)
    elif method is Method.COOP_CSC:
        class_ctx = [ctx_rng.normal((l_context, d_token), INIT_STD) for _ in range(n)]
    if method.has_offsets:
        offsets = [np.zeros(c.name_tokens.shape, DTYPE) for c in classes]
    overrides = None
    if ablation_random_names:
        name_rng = rng.fork("names")
        overrides = [
            TokenSequence(name_rng.normal(c.name_tokens.shape, INIT_STD), c.name_text) for c in classes
        ]
    return TextParameterSet(
        method=method,
        l_context=0 if method is Method.NAME_TUNING else l_context,
        shared_context=shared,
        class_contexts=class_ctx,
        offsets=offsets,
        fixed_prompt=prompt if method is Method.NAME_TUNING else None,
        name_overrides=overrides,
    )


def assemble(params: TextParameterSet, entry: ClassEntry, max_seq_len: Optional[int] = None) -> TokenSequence:
    """``[prefix, name (+ offset)]`` where the prefix is q, c or c_i depending on the method."""
    n = params.n_classes
    if n is not None and not 0 <= entry.class_id < n:
        raise ConfigurationError(f"class {entry.class_id} is not part of this parameter set")
    name = params.base_name(entry)
    if params.offsets is not None:
        name = add_offset(name, params.offsets[entry.class_id])
    seq = concat(params.prefix(entry), name)
    if max_seq_len is not None and len(seq) > max_seq_len:
        raise SequenceLengthError(
            f"class {entry.class_id} ({entry.name_text!r}) assembles to {len(seq)} tokens > {max_seq_len}"
        )
    return seq


def parameter_l2(params: TextParameterSet) -> float:
    """Half the squared L2 norm of the name offsets; contexts are not penalized."""
    if params.offsets is None:
        return 0.0
    return 0.5 * float(sum(np.sum(np.asarray(e, dtype=np.float64) ** 2) for e in params.offsets))


# -- checkpoint file -----------------------------------------------------------

CHECKPOINT_MAGIC = b"NTPC"
CHECKPOINT_VERSION = 1
ROLE_PROMPT, ROLE_SHARED, ROLE_CLASS_CTX, ROLE_OFFSET, ROLE_NAME = range(5)
_HEADER = "<IBIIQIB"


@dataclass
class Checkpoint:
    params: TextParameterSet
    epoch: int
    seed: int


def _tensors(params: TextParameterSet):
    if params.fixed_prompt is not None:
        yield ROLE_PROMPT, 0, params.fixed_prompt.tokenized_prefix.rows
    if params.shared_context is not None:
        yield ROLE_SHARED, 0, params.shared_context
    for i, c in enumerate(params.class_contexts or []):
        yield ROLE_CLASS_CTX, i, c
    for i, e in enumerate(params.offsets or []):
        yield ROLE_OFFSET, i, e
    for i, t in enumerate(params.name_overrides or []):
        yield ROLE_NAME, i, t.rows


def encode_checkpoint(params: TextParameterSet, epoch: int, seed: int) -> bytes:
    n = params.n_classes or 0
    template = (params.fixed_prompt.template if params.fixed_prompt else "").encode("utf-8")
    flags = 1 if params.name_overrides is not None else 0
    tensors = list(_tensors(params))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack(_HEADER, CHECKPOINT_VERSION, _METHOD_CODES[params.method], n, epoch,
                          int(seed) & 0xFFFFFFFFFFFFFFFF, params.l_context, flags))
    buf.write(struct.pack("<H", len(template)))
    buf.write(template)
    buf.write(struct.pack("<I", len(tensors)))
    for role, index, arr in tensors:
        arr = np.asarray(arr)
        buf.write(struct.pack("<BIB", role, index, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a parameter checkpoint (bad magic)")
    try:
        pos = 4
        version, code, n, epoch, seed, l_context, flags = struct.unpack_from(_HEADER, data, pos)
        pos += struct.calcsize(_HEADER)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        method = {v: k for k, v in _METHOD_CODES.items()}.get(code)
        if method is None:
            raise FormatError(f"unknown method code {code}")
        (tlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        template = data[pos : pos + tlen].decode("utf-8")
        pos += tlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        groups: dict[int, dict[int, np.ndarray]] = {}
        for _ in range(count):
            role, index, rank = struct.unpack_from("<BIB", data, pos)
            pos += 6
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(data):
                raise FormatError("truncated tensor payload")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(DTYPE)
            pos += 4 * size
            groups.setdefault(role, {})[index] = arr
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint tensors")

    def ordered(role):
        if role not in groups:
            return None
        g = groups[role]
        if sorted(g) != list(range(len(g))) or len(g) != n:
            raise FormatError(f"tensor group {role} has indices {sorted(g)}, expected 0..{n - 1}")
        return [g[i] for i in range(n)]

    prompt = None
    if ROLE_PROMPT in groups:
        prompt = PromptSpec(template, TokenSequence(groups[ROLE_PROMPT][0]))
    names = ordered(ROLE_NAME) if flags & 1 else None
    params = TextParameterSet(
        method=method,
        l_context=l_context,
        shared_context=groups.get(ROLE_SHARED, {}).get(0),
        class_contexts=ordered(ROLE_CLASS_CTX),
        offsets=ordered(ROLE_OFFSET),
        fixed_prompt=prompt,
        name_overrides=[TokenSequence(a) for a in names] if names is not None else None,
    )
    return Checkpoint(params, epoch, seed)


def save_checkpoint(path, params: TextParameterSet, epoch: int, seed: int) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, epoch, seed))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
