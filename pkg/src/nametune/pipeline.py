"""Manifest to features to split: the plumbing shared by the CLI commands."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import numpy as np

from .encoder import (
    FeatureCacheEncoder,
    encode_feature_cache,
    encode_video,
    read_feature_cache,
    uniform_frame_indices,
)
from ._fileio import atomic_write_bytes
from .errors import CacheBuildError, ConfigurationError
from .manifest import Manifest
from .protocol import DatasetSplit


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_frames(manifest: Manifest, row) -> np.ndarray:
    if row.media_path is None:
        raise ConfigurationError(f"item {row.id!r} references cache key {row.cache_key!r}, not media")
    frames = np.load(manifest.resolve(row), allow_pickle=False)
    if frames.ndim != 2:
        raise ConfigurationError(f"expected a 2-d frame stack, got shape {frames.shape}")
    if row.frame_count is not None and len(frames) != row.frame_count:
        raise ConfigurationError(f"manifest says {row.frame_count} frames, file has {len(frames)}")
    return frames


def video_feature(enc, frames: np.ndarray) -> np.ndarray:
    idx = uniform_frame_indices(len(frames), enc.frames_per_video)
    return encode_video(enc, frames[idx]).astype(np.float32)


def encode_manifest(manifest: Manifest, enc) -> dict[str, np.ndarray]:
    """Frame-averaged embedding per item id; every failure is collected before raising."""
    features, failures = {}, []
    for row in manifest.rows:
        try:
            features[row.id] = video_feature(enc, load_frames(manifest, row))
        except (OSError, ValueError) as exc:
            failures.append((row.id, str(exc) or type(exc).__name__))
    if failures:
        raise CacheBuildError(failures)
    return features


def build_cache(manifest: Manifest, enc, out_path) -> str:
    """Encode every item and write the cache atomically; returns the file's sha256."""
    data = encode_feature_cache(encode_manifest(manifest, enc), enc.space.d_embed)
    atomic_write_bytes(out_path, data)
    return hashlib.sha256(data).hexdigest()


def manifest_features(manifest: Manifest, enc, cache_path: Optional[Path] = None) -> dict[str, np.ndarray]:
    if cache_path is None:
        return encode_manifest(manifest, enc)
    features = read_feature_cache(cache_path)
    missing = [manifest.feature_key(r) for r in manifest.rows if manifest.feature_key(r) not in features]
    if missing:
        raise ConfigurationError(f"cache {cache_path} lacks {len(missing)} item(s), e.g. {missing[0]!r}")
    return features


def load_split(manifest: Manifest, enc, cache_path: Optional[Path] = None):
    """(split, encoder) where the encoder serves cached visual features when a cache is given."""
    features = manifest_features(manifest, enc, cache_path)
    classes = manifest.classes(enc.tokenize)
    if cache_path is not None:
        enc = FeatureCacheEncoder(features, text_encoder=enc)
    return DatasetSplit.from_manifest(manifest, features, classes), enc
