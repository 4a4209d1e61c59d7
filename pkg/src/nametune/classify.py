"""Zero-shot classification over a frozen dual encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ClassEntry, EmbeddingSpace, Similarity, TokenSequence, concat
from .errors import ConfigurationError, DegenerateInputError, EmptyInputError, NumericError

DEFAULT_PROMPT = "a video of {}"


@dataclass(frozen=True)
class PromptSpec:
    template: str
    tokenized_prefix: TokenSequence

    def __post_init__(self):
        prefix, suffix = split_template(self.template)
        if suffix:
            raise ConfigurationError(f"text after the class-name placeholder is not supported: {self.template!r}")

    @classmethod
    def from_template(cls, template: str, tokenize: Callable[[str], TokenSequence]) -> "PromptSpec":
        prefix, _ = split_template(template)
        return cls(template, tokenize(prefix))


def split_template(template: str) -> tuple[str, str]:
    if template.count("{}") != 1:
        raise ConfigurationError(f"prompt template needs exactly one '{{}}' placeholder: {template!r}")
    prefix, suffix = template.split("{}")
    return prefix.strip(), suffix.strip()


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    class_text_embeddings: np.ndarray
    space: EmbeddingSpace

    def __post_init__(self):
        emb = np.array(self.class_text_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] != self.space.d_embed:
            raise ConfigurationError(f"head needs an N x {self.space.d_embed} matrix with N >= 1, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise NumericError("classifier head contains non-finite values")
        emb.flags.writeable = False
        object.__setattr__(self, "class_text_embeddings", emb)

    @property
    def n_classes(self) -> int:
        return self.class_text_embeddings.shape[0]

    def predict(self, features) -> np.ndarray:
        return predict_batch(features, self)


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError(f"zero-norm {what} under cosine similarity")
    return x / norms


def similarities(v, head: ClassifierHead) -> np.ndarray:
    """Raw similarities ``<t_i, v>`` for one vector (shape N) or a batch (shape B x N)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("visual embedding contains non-finite values")
    t = head.class_text_embeddings
    if head.space.similarity is Similarity.COSINE:
        v = _normalize_rows(v, "visual embedding")
        t = _normalize_rows(t, "class text embedding")
    return v @ t.T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(v, head: ClassifierHead) -> np.ndarray:
    return softmax(similarities(v, head) / head.space.temperature)


def argmax_lowest(scores) -> int:
    """Index of the maximum; the lowest index wins ties."""
    return int(np.argmax(np.asarray(scores)))


def predict(v, head: ClassifierHead) -> int:
    # argmax of the similarities equals argmax of the probabilities and is immune
    # to exp() underflow collapsing distinct scores into ties at small temperature
    return argmax_lowest(similarities(v, head))


def predict_batch(features, head: ClassifierHead) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.argmax(similarities(feats, head), axis=1)


def accuracy(head: ClassifierHead, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyInputError("accuracy needs at least one query")
    return float(np.mean(predict_batch(features, head) == labels))


def _encode_rows(enc, seqs: Sequence[TokenSequence], classes: Sequence[ClassEntry]) -> np.ndarray:
    rows = []
    for seq, entry in zip(seqs, classes):
        enc.check_length(len(seq), f"class {entry.class_id} ({entry.name_text!r})")
        rows.append(enc.encode_text(seq))
    return np.stack(rows)


def build_head(enc, prompt: Optional[PromptSpec], classes: Sequence[ClassEntry], params=None) -> ClassifierHead:
    """Embed every class text input; ``params`` (a TextParameterSet) overrides the plain ``[q, n_i]``."""
    if not classes:
        raise ConfigurationError("build_head needs at least one class")
    if params is None:
        if prompt is None:
            raise ConfigurationError("build_head needs a prompt when no parameters are given")
        seqs = [concat(prompt.tokenized_prefix, c.name_tokens) for c in classes]
    else:
        seqs = [params.assemble(c) for c in classes]
    return ClassifierHead(_encode_rows(enc, seqs, classes), enc.space)


def ensemble_head(enc, prompts: Sequence[PromptSpec], classes: Sequence[ClassEntry]) -> ClassifierHead:
    """Per class: normalize each prompt's embedding, average, normalize again."""
    if not prompts:
        raise ConfigurationError("ensemble_head needs at least one prompt")
    total = None
    for prompt in prompts:
        emb = build_head(enc, prompt, classes).class_text_embeddings
        emb = _normalize_rows(emb, "class text embedding")
        total = emb if total is None else total + emb
    mean = total / len(prompts)
    return ClassifierHead(_normalize_rows(mean, "ensembled class embedding"), enc.space)
