"""Reference implementations written straight from the formulas, sharing no code paths with the package.

Everything here works on plain float64 numpy arrays and python floats. The
text encoder is only reached through ``enc.text_forward`` on rows assembled here.
"""
import math

import numpy as np
import torch


def embed_rows(enc, rows: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return enc.text_forward(torch.from_numpy(np.ascontiguousarray(rows, dtype=np.float64))).numpy()


def similarity(v, t, kind: str) -> float:
    dot = sum(float(a) * float(b) for a, b in zip(v, t))
    if kind == "dot":
        return dot
    nv = math.sqrt(sum(float(a) ** 2 for a in v))
    nt = math.sqrt(sum(float(b) ** 2 for b in t))
    return dot / (nv * nt)


def class_probs(v, text_embeddings, kind: str, tau: float) -> list[float]:
    """p(y=i|x) = exp(<t_i, v>/tau) / sum_j exp(<t_j, v>/tau), evaluated literally."""
    sims = [similarity(v, t, kind) / tau for t in text_embeddings]
    num = [math.exp(s) for s in sims]
    z = math.fsum(num)
    return [n / z for n in num]


def assembled_rows(method: str, prefix_rows, name_rows, offset=None) -> np.ndarray:
    name = np.array(name_rows, dtype=np.float64)
    if offset is not None:
        name = name + np.asarray(offset, dtype=np.float64)
    return np.vstack([np.asarray(prefix_rows, dtype=np.float64).reshape(-1, name.shape[1]), name])


def objective(enc, method, prompt_rows, shared, class_ctx, offsets, names, feats, labels, alpha) -> float:
    """-sum log p(y|x) + alpha/2 sum ||eps_i||^2 with the text inputs assembled here."""
    texts = []
    for i, name in enumerate(names):
        if method == "name_tuning":
            prefix = prompt_rows
        elif method == "coop_csc":
            prefix = class_ctx[i]
        else:
            prefix = shared
        off = offsets[i] if offsets is not None else None
        texts.append(embed_rows(enc, assembled_rows(method, prefix, name, off)))
    kind = enc.space.similarity.value
    total = 0.0
    for v, y in zip(feats, labels):
        total -= math.log(class_probs(v, texts, kind, enc.space.temperature)[int(y)])
    if offsets is not None:
        total += alpha * 0.5 * math.fsum(float(np.sum(np.asarray(e, dtype=np.float64) ** 2)) for e in offsets)
    return total


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error; ``floor`` bounds the denominator when both vectors vanish."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def nearest_mean_predictions(support_feats, support_labels, queries, n_classes, kind: str) -> np.ndarray:
    """Classify each query by its most similar per-class support mean (normalized items under cosine)."""
    means = []
    for c in range(n_classes):
        items = [np.asarray(x, dtype=np.float64) for x, y in zip(support_feats, support_labels) if y == c]
        if kind == "cosine":
            items = [x / np.linalg.norm(x) for x in items]
        means.append(sum(items) / len(items))
    out = []
    for q in queries:
        scores = [similarity(q, m, kind) for m in means]
        out.append(int(np.argmax(scores)))
    return np.array(out)
