"""Deterministic synthetic video dataset for desk-scale checks.

Each class's visual cluster sits at the text embedding of its own name plus
a small, box-bounded adversarial offset pushing it toward another class of
the same group. Zero-shot classification with the plain names therefore
confuses the classes, while a name offset inside the box recovers every
cluster center exactly. Videos are frame stacks in the encoder's raw frame
space, built through the pseudo-inverse of its visual map.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .classify import DEFAULT_PROMPT, PromptSpec
from .core import ClassEntry, SeededRng
from .encoder import encode_video, make_encoder, uniform_frame_indices
from .manifest import ManifestRow, write_manifest

TOY_CLASS_NAMES = (
    "pour water", "pour milk", "open fridge", "open drawer", "wipe table",
    "wipe counter", "fold towel", "fold shirt", "chop onion", "chop carrot",
)
TRADITIONAL_COUNTS = {"train": 8, "val": 4, "test": 12}
META_ITEMS_PER_CLASS = 20
FRAMES_PER_ITEM = 16


@dataclass
class ToyDataset:
    rows: list[ManifestRow]
    frames: dict[str, np.ndarray]
    centers: np.ndarray
    encoder_kind: str
    encoder_seed: int

    def features(self, enc) -> dict[str, np.ndarray]:
        out = {}
        for row in self.rows:
            frames = self.frames[row.id]
            idx = uniform_frame_indices(len(frames), enc.frames_per_video)
            out[row.id] = encode_video(enc, frames[idx]).astype(np.float32)
        return out


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def adversarial_centers(enc, classes, prompt: PromptSpec, groups, box: float = 0.08, steps: int = 100):
    """Unit cluster centers E^t([q, n_i + d_i]) with ``|d_i| <= box`` pushed toward the next class in the group."""
    q = torch.from_numpy(prompt.tokenized_prefix.rows.astype(np.float64))
    with torch.no_grad():
        plain = []
        for c in classes:
            e = enc.text_forward(torch.cat([q, torch.from_numpy(c.name_tokens.rows.astype(np.float64))]))
            plain.append(e / e.norm())
    target = {}
    for group in groups:
        for j, cid in enumerate(group):
            target[cid] = group[(j + 1) % len(group)]
    centers = []
    for c in classes:
        n = torch.from_numpy(c.name_tokens.rows.astype(np.float64))
        d = torch.zeros_like(n, requires_grad=True)
        for _ in range(steps):
            e = enc.text_forward(torch.cat([q, n + d]))
            e = e / e.norm()
            obj = e @ plain[target[c.class_id]] - e @ plain[c.class_id]
            (g,) = torch.autograd.grad(obj, d)
            with torch.no_grad():
                d += (box / 20) * g.sign()
                d.clamp_(-box, box)
        with torch.no_grad():
            centers.append(enc.text_forward(torch.cat([q, n + d])).numpy())
    return _unit(np.stack(centers))


def make_toy_dataset(
    paradigm: str = "traditional",
    encoder: str = "toy-transformer",
    encoder_seed: int = 0,
    seed: int = 0,
    n_classes: Optional[int] = None,
    noise_frac: float = 0.2,
    prompt: str = DEFAULT_PROMPT,
) -> ToyDataset:
    enc = make_encoder(encoder, encoder_seed)
    if paradigm == "traditional":
        n_classes = n_classes or 5
        groups = [list(range(n_classes))]
    elif paradigm == "meta_learning":
        n_classes = n_classes or 10
        half = n_classes // 2
        groups = [list(range(half)), list(range(half, n_classes))]
    else:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    if n_classes > len(TOY_CLASS_NAMES):
        names = [f"{TOY_CLASS_NAMES[i % len(TOY_CLASS_NAMES)]} {i // len(TOY_CLASS_NAMES)}" for i in range(n_classes)]
    else:
        names = list(TOY_CLASS_NAMES[:n_classes])
    classes = [ClassEntry(i, name, enc.tokenize(name)) for i, name in enumerate(names)]
    centers = adversarial_centers(enc, classes, PromptSpec.from_template(prompt, enc.tokenize), groups)
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    noise = noise_frac * gaps[gaps > 0].min() / np.sqrt(enc.space.d_embed)
    pinv = np.linalg.pinv(enc.weights()["visual"].astype(np.float64))

    rng = SeededRng(seed).fork("toy-data", paradigm, encoder, encoder_seed)
    if paradigm == "traditional":
        plan = [(split, cid) for cid in range(n_classes) for split, cnt in TRADITIONAL_COUNTS.items()
                for _ in range(cnt)]
    else:
        tags = {cid: "meta_val" if cid < n_classes // 2 else "meta_test" for cid in range(n_classes)}
        plan = [(tags[cid], cid) for cid in range(n_classes) for _ in range(META_ITEMS_PER_CLASS)]
    rows, frames = [], {}
    for j, (split, cid) in enumerate(plan):
        item_id = f"toy-{j:04d}"
        embed = _unit(centers[cid] + noise * rng.normal(enc.space.d_embed).astype(np.float64))
        jitter = 0.1 * noise * rng.normal((FRAMES_PER_ITEM, enc.space.d_embed)).astype(np.float64)
        frames[item_id] = ((embed + jitter) @ pinv.T).astype(np.float32)
        rows.append(ManifestRow(item_id, names[cid], split, f"media/{item_id}.npy", FRAMES_PER_ITEM))
    return ToyDataset(rows, frames, centers, encoder, encoder_seed)


def write_toy_dataset(out_dir, dataset: ToyDataset) -> Path:
    """Write ``manifest.jsonl`` and one ``.npy`` frame stack per item; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "media").mkdir(parents=True, exist_ok=True)
    for row in dataset.rows:
        np.save(out_dir / row.media_path, dataset.frames[row.id], allow_pickle=False)
    path = out_dir / "manifest.jsonl"
    write_manifest(path, dataset.rows)
    return path
