"""Dataset manifest: the JSON index tying image ids to feature files and
(evaluation-only) annotations.

Coordinates are always original-image pixels.  Landmarks and part boxes are
optional and must never be consulted during training.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError


@dataclass(frozen=True)
class Landmark:
    name: str
    x: float
    y: float


@dataclass(frozen=True)
class PartBox:
    name: str
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    feature_path: str
    image_height: int
    image_width: int
    category: str = ""
    landmarks: tuple[Landmark, ...] | None = None
    part_boxes: tuple[PartBox, ...] | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate image ids in manifest: {dup}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]


def _entry_from_dict(raw: dict, idx: int) -> ManifestEntry:
    try:
        landmarks = None
        if raw.get("landmarks") is not None:
            landmarks = tuple(
                Landmark(p["name"], float(p["x"]), float(p["y"])) for p in raw["landmarks"]
            )
        part_boxes = None
        if raw.get("part_boxes") is not None:
            part_boxes = tuple(
                PartBox(
                    b["name"], float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"])
                )
                for b in raw["part_boxes"]
            )
        return ManifestEntry(
            image_id=str(raw["image_id"]),
            feature_path=str(raw["feature_path"]),
            image_height=int(raw["image_height"]),
            image_width=int(raw["image_width"]),
            category=str(raw.get("category", "")),
            landmarks=landmarks,
            part_boxes=part_boxes,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"manifest entry {idx} is malformed: {exc}") from None


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise DataError(f"manifest {path}: expected a JSON array of entries")
    return DatasetManifest([_entry_from_dict(item, i) for i, item in enumerate(raw)])


def _entry_to_dict(entry: ManifestEntry) -> dict:
    out: dict = {
        "image_id": entry.image_id,
        "feature_path": entry.feature_path,
        "image_height": entry.image_height,
        "image_width": entry.image_width,
        "category": entry.category,
    }
    if entry.landmarks is not None:
        out["landmarks"] = [{"name": p.name, "x": p.x, "y": p.y} for p in entry.landmarks]
    if entry.part_boxes is not None:
        out["part_boxes"] = [
            {"name": b.name, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
            for b in entry.part_boxes
        ]
    return out


def save_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    payload = [_entry_to_dict(e) for e in manifest.entries]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_feature_path(manifest_path: str | os.PathLike, entry: ManifestEntry) -> Path:
    """Feature paths are stored relative to the manifest's directory."""
    p = Path(entry.feature_path)
    if p.is_absolute():
        return p
    return Path(manifest_path).parent / p
