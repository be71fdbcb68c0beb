"""Backbone feature extraction over an image folder.

Each image is resized so its short side matches the configured size (224 by
default, keeping objects at comparable scales), pushed through a frozen
VGG16 up to the chosen convolutional stage, and written as an NPY tensor of
shape (h, w, 512) in little-endian float32.  A JSON manifest records image
ids, feature paths, and original pixel sizes; a `features_sample.npy` holds
a random subsample of feature vectors for clustering-based initialization.

All output files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision.transforms import functional as TF

logger = logging.getLogger(__name__)

# Prefix length of torchvision's vgg16().features for each nameable tap.
# All taps yield 512 channels; conv5_3 is the last stage before pool5
# (stride 16: a 224-pixel side becomes 14 cells).
LAYER_TAPS = {
    "conv5_3": 30,
    "conv5_2": 28,
    "conv5_1": 26,
    "conv4_3": 23,
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".ppm", ".webp"}


@dataclass
class ExportSpec:
    image_dir: str
    output_dir: str
    layer: str = "conv5_3"
    short_side: int = 224
    category: str = ""
    weights: str = "pretrained"  # "pretrained" or "random"
    seed: int = 0
    sample_size: int = 100_000
    annotations: str | None = None  # optional manifest-style JSON to merge

    def __post_init__(self) -> None:
        if self.layer not in LAYER_TAPS:
            raise ValueError(f"unknown layer {self.layer!r}; taps: {sorted(LAYER_TAPS)}")
        if self.weights not in ("pretrained", "random"):
            raise ValueError("weights must be 'pretrained' or 'random'")
        if self.short_side < 32:
            raise ValueError("short_side must be at least 32")


def build_backbone(spec: ExportSpec) -> torch.nn.Module:
    """The frozen feature extractor: VGG16 truncated at the configured tap."""
    if spec.weights == "pretrained":
        try:
            net = models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download or cache failure
            raise RuntimeError(
                f"could not load pretrained VGG16 weights: {exc}; "
                "pass weights='random' for an untrained backbone"
            ) from exc
    else:
        torch.manual_seed(spec.seed)
        net = models.vgg16(weights=None)
    backbone = net.features[: LAYER_TAPS[spec.layer]]
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _save_npy(path: Path, arr: np.ndarray) -> None:
    import io

    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f4"))
    _atomic_write(path, buf.getvalue())


def _preprocess(image: Image.Image, short_side: int) -> torch.Tensor:
    image = image.convert("RGB")
    w, h = image.size
    scale = short_side / min(w, h)
    new_w = max(short_side, int(round(w * scale)))
    new_h = max(short_side, int(round(h * scale)))
    tensor = TF.to_tensor(TF.resize(image, [new_h, new_w]))
    return TF.normalize(tensor, IMAGENET_MEAN, IMAGENET_STD).unsqueeze(0)


def _list_images(image_dir: Path) -> list[Path]:
    files = [
        p
        for p in sorted(image_dir.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    if not files:
        raise FileNotFoundError(f"no images found under {image_dir}")
    return files


def _load_annotations(path: str | None) -> dict[str, dict]:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {str(entry["image_id"]): entry for entry in raw}


def export(spec: ExportSpec) -> Path:
    """Run the backbone over every image and write features + manifest.

    Returns the manifest path.  Unreadable images are skipped with a
    warning; deterministic for a fixed spec (inference runs in eval mode
    with gradients disabled).
    """
    image_dir = Path(spec.image_dir)
    out_dir = Path(spec.output_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    backbone = build_backbone(spec)
    annotations = _load_annotations(spec.annotations)

    entries = []
    sample_rng = np.random.default_rng(spec.seed)
    sampled_vectors: list[np.ndarray] = []
    sampled_count = 0
    for path in _list_images(image_dir):
        try:
            with Image.open(path) as img:
                original_w, original_h = img.size
                batch = _preprocess(img, spec.short_side)
        except Exception as exc:
            logger.warning("skipping unreadable image %s: %s", path, exc)
            continue
        with torch.no_grad():
            features = backbone(batch)[0]  # (512, h, w)
        fmap = features.permute(1, 2, 0).numpy().astype(np.float32)
        image_id = path.stem
        rel = f"features/{image_id}.npy"
        _save_npy(out_dir / rel, fmap)

        entry = {
            "image_id": image_id,
            "feature_path": rel,
            "image_height": original_h,
            "image_width": original_w,
            "category": spec.category,
        }
        extra = annotations.get(image_id)
        if extra:
            for key in ("landmarks", "part_boxes"):
                if key in extra:
                    entry[key] = extra[key]
        entries.append(entry)

        flat = fmap.reshape(-1, fmap.shape[2])
        # Reservoir-free subsample: keep a seeded fraction per image, then
        # trim to sample_size at the end.
        budget = max(1, spec.sample_size // 4)
        take = min(len(flat), budget)
        idx = sample_rng.choice(len(flat), size=take, replace=False)
        sampled_vectors.append(flat[np.sort(idx)])
        sampled_count += take

    if not entries:
        raise RuntimeError(f"no readable images under {image_dir}")

    sample = np.concatenate(sampled_vectors, axis=0)
    if len(sample) > spec.sample_size:
        idx = sample_rng.choice(len(sample), size=spec.sample_size, replace=False)
        sample = sample[np.sort(idx)]
    import io

    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(sample, dtype="<f4"))
    _atomic_write(out_dir / "features_sample.npy", buf.getvalue())

    manifest_path = out_dir / "manifest.json"
    payload = json.dumps(entries, indent=2, sort_keys=True) + "\n"
    _atomic_write(manifest_path, payload.encode("utf-8"))
    logger.info("exported %d images to %s", len(entries), out_dir)
    return manifest_path
