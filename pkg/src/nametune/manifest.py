"""Line-delimited JSON dataset manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from ._fileio import atomic_write_text
from .core import ClassEntry, TokenSequence
from .errors import FormatError, IntegrityError

TRADITIONAL_TAGS = ("train", "val", "test")
META_TAGS = ("meta_train", "meta_val", "meta_test")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    class_name: str
    split: str
    media_path: Optional[str] = None
    frame_count: Optional[int] = None
    cache_key: Optional[str] = None

    def __post_init__(self):
        if not self.class_name:
            raise FormatError(f"row {self.id!r}: class_name is empty")
        if (self.media_path is None) == (self.cache_key is None):
            raise FormatError(f"row {self.id!r}: media needs exactly one of a file path or a cache key")

    def to_json(self) -> str:
        if self.media_path is not None:
            media = {"path": self.media_path, "frames": self.frame_count}
        else:
            media = {"cache_key": self.cache_key}
        return json.dumps(
            {"id": self.id, "class_name": self.class_name, "split": self.split, "media": media},
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRow":
        media = obj["media"]
        if not isinstance(media, dict):
            raise FormatError("media must be an object")
        extra = set(obj) - {"id", "class_name", "split", "media"}
        if extra:
            raise FormatError(f"unknown fields {sorted(extra)}")
        frames = media.get("frames")
        if frames is not None and (not isinstance(frames, int) or frames < 1):
            raise FormatError(f"frame count must be a positive integer, got {frames!r}")
        return cls(
            id=str(obj["id"]),
            class_name=str(obj["class_name"]),
            split=str(obj["split"]),
            media_path=media.get("path"),
            frame_count=frames,
            cache_key=media.get("cache_key"),
        )


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def class_names(self) -> list[str]:
        """Distinct class names in order of first appearance; index = class_id."""
        return list(dict.fromkeys(r.class_name for r in self.rows))

    @property
    def class_ids(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_names)}

    @property
    def paradigm(self) -> Optional[str]:
        tags = {r.split for r in self.rows}
        if not tags:
            return None
        if tags <= set(TRADITIONAL_TAGS):
            return "traditional"
        if tags <= set(META_TAGS):
            return "meta_learning"
        raise FormatError(f"split tags {sorted(tags)} mix paradigms or are unknown")

    def classes(self, tokenize: Callable[[str], TokenSequence]) -> list[ClassEntry]:
        return [ClassEntry(i, name, tokenize(name)) for i, name in enumerate(self.class_names)]

    def resolve(self, row: ManifestRow) -> Path:
        return (self.root / row.media_path).resolve()

    def feature_key(self, row: ManifestRow) -> str:
        return row.cache_key if row.cache_key is not None else row.id


def parse_manifest(lines: Sequence[str], root=".") -> Manifest:
    rows, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise FormatError("record is not an object")
            row = ManifestRow.from_json(obj)
        except (json.JSONDecodeError, KeyError, FormatError, TypeError) as exc:
            raise FormatError(f"manifest line {lineno}: {exc}") from None
        if row.id in seen:
            raise IntegrityError(f"manifest line {lineno}: duplicate id {row.id!r}")
        seen.add(row.id)
        rows.append(row)
    manifest = Manifest(rows, Path(root))
    manifest.paradigm  # validates split tags
    return manifest


def load_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8").splitlines(), root=path.parent)


def dump_manifest(rows: Sequence[ManifestRow]) -> str:
    return "".join(r.to_json() + "\n" for r in rows)


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    atomic_write_text(path, dump_manifest(rows))
