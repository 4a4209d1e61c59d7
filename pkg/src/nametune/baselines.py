"""Baselines that leave the text input alone: a linear probe and VL-prototypes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.optimize

from .classify import ClassifierHead, predict_batch
from .core import EmbeddingSpace, Similarity
from .errors import ConfigurationError

LBFGS_MAXITER = 1000
LBFGS_GTOL = 1e-6
LBFGS_HISTORY = 10


def geometric_grid(low: float, high: float, count: int) -> list[float]:
    return [float(v) for v in np.geomspace(low, high, count)]


LAMBDA_GRID = geometric_grid(1e-6, 1e6, 96)
TEXT_WEIGHT_GRID = geometric_grid(1e-2, 1e2, 16)


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class LinearProbeModel:
    weight: np.ndarray
    bias: np.ndarray
    lam: float
    normalize_inputs: bool = False
    objective: float = float("nan")
    initial_objective: float = float("nan")
    iterations: int = 0

    def logits(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.normalize_inputs:
            x = _normalize(x)
        return x @ self.weight.T + self.bias

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def logistic_objective(params: np.ndarray, x: np.ndarray, labels: np.ndarray, n_classes: int, lam: float):
    """Mean cross-entropy plus ``lam/2 * ||W||^2`` (bias unpenalized), with gradient."""
    n, d = x.shape
    w = params[: n_classes * d].reshape(n_classes, d)
    b = params[n_classes * d :]
    z = x @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -logp[np.arange(n), labels].mean() + 0.5 * lam * np.sum(w * w)
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    p /= n
    gw = p.T @ x + lam * w
    gb = p.sum(axis=0)
    return value, np.concatenate([gw.ravel(), gb])


def linear_probe_fit(features, labels, lam: float, n_classes: int | None = None,
                     normalize_inputs: bool = False) -> LinearProbeModel:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if not lam > 0:
        raise ConfigurationError(f"lambda must be > 0, got {lam}")
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        raise ConfigurationError("linear probe needs examples from at least two classes")
    if normalize_inputs:
        x = _normalize(x)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    d = x.shape[1]
    x0 = np.zeros(n_classes * d + n_classes)
    f0, _ = logistic_objective(x0, x, labels, n_classes, lam)
    res = scipy.optimize.minimize(
        logistic_objective, x0, args=(x, labels, n_classes, lam), jac=True, method="L-BFGS-B",
        options={"maxiter": LBFGS_MAXITER, "gtol": LBFGS_GTOL, "maxcor": LBFGS_HISTORY},
    )
    w = res.x[: n_classes * d].reshape(n_classes, d)
    b = res.x[n_classes * d :]
    return LinearProbeModel(w, b, lam, normalize_inputs, float(res.fun), float(f0), int(res.nit))


@dataclass(frozen=True, eq=False)
class VLPrototypeModel:
    prototypes: np.ndarray
    text_weight: float
    space: EmbeddingSpace

    def head(self) -> ClassifierHead:
        return ClassifierHead(self.prototypes, self.space)

    def predict(self, features) -> np.ndarray:
        return predict_batch(features, self.head())


def vl_prototype_build(head: ClassifierHead, support: Sequence[np.ndarray], text_weight: float) -> VLPrototypeModel:
    """Blend each class's text embedding with the mean of its support embeddings.

    Cosine spaces: ``normalize(w_t * normalize(t_i) + mean_j normalize(v_ij))``.
    Dot spaces skip the normalizations.
    """
    if not text_weight > 0:
        raise ConfigurationError(f"text weight must be > 0, got {text_weight}")
    if len(support) != head.n_classes:
        raise ConfigurationError(f"need support for {head.n_classes} classes, got {len(support)}")
    cosine = head.space.similarity is Similarity.COSINE
    protos = []
    for i, items in enumerate(support):
        items = np.asarray(items, dtype=np.float64)
        if items.size == 0:
            raise ConfigurationError(f"class {i} has no support items")
        items = np.atleast_2d(items)
        text = head.class_text_embeddings[i]
        if cosine:
            protos.append(_normalize(text_weight * _normalize(text) + _normalize(items).mean(axis=0)))
        else:
            protos.append(text_weight * text + items.mean(axis=0))
    return VLPrototypeModel(np.stack(protos), float(text_weight), head.space)


def support_by_class(features, labels, n_classes: int) -> list[np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return [features[labels == i] for i in range(n_classes)]
