"""Deterministic synthetic dataset generator and brute-force reference
implementations used to verify the pipeline at desk scale.

A dataset is built from a canonical template grid: every cell carries its own
unit feature vector, a handful of cells carry mutually orthogonal part
prototypes, and each image is the template seen through a small random
affine transform, with per-image distractor cells that mimic a part without
appearing consistently across images.  Part locations are written to the
manifest as evaluation-only ground truth.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import AffineTransform
from .manifest import (
    DatasetManifest,
    Landmark,
    ManifestEntry,
    PartBox,
    save_manifest,
)
from .tensors import save_feature_map


@dataclass
class SyntheticScene:
    image_id: str
    backbone_map: np.ndarray
    true_parts: list[tuple[int, tuple[float, float]]]  # (part index, (row, col))
    applied_transform: AffineTransform  # template cell coords -> image cell coords
    seed: int


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    scenes: list[SyntheticScene]
    template_field: np.ndarray  # (grid, grid, c_i) unit vectors
    part_prototypes: np.ndarray  # (n_parts, c_i) orthonormal rows
    part_cells: list[tuple[int, int]]
    stride: int
    gt_box_side: float


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _pick_part_cells(
    rng: np.random.Generator, grid: int, n_parts: int, margin: int = 3, min_sep: int = 2
) -> list[tuple[int, int]]:
    # Interior cells with a minimum Chebyshev separation, so random affine
    # jitter never pushes a part off the canvas and parts never collide.
    cells: list[tuple[int, int]] = []
    lo, hi = margin, grid - margin
    if hi <= lo:
        raise ValueError(f"grid {grid} too small for margin {margin}")
    attempts = 0
    while len(cells) < n_parts:
        attempts += 1
        if attempts > 10_000:
            raise ValueError(f"cannot place {n_parts} parts on a {grid}x{grid} grid")
        cand = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
        if all(max(abs(cand[0] - r), abs(cand[1] - c)) >= min_sep for r, c in cells):
            cells.append(cand)
    return cells


def _random_transform(
    rng: np.random.Generator,
    grid: int,
    max_rotation_deg: float,
    scale_range: tuple[float, float],
    max_translation: float,
) -> AffineTransform:
    angle = math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
    scale = rng.uniform(*scale_range)
    t = rng.uniform(-max_translation, max_translation, size=2)
    linear = scale * np.array(
        [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
    )
    center = np.array([(grid - 1) / 2.0, (grid - 1) / 2.0])
    offset = center + t - linear @ center
    return AffineTransform(np.hstack([linear, offset[:, None]]))


def generate_dataset(
    n_images: int,
    n_parts: int,
    c_i: int,
    grid: int,
    noise: float,
    seed: int,
    out_dir: str | os.PathLike | None = None,
    *,
    distractors: int | None = None,
    distractor_cosine: float = 0.9,
    stride: int = 16,
    gt_box_side: float = 64.0,
    max_rotation_deg: float = 10.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    max_translation: float = 2.0,
) -> SyntheticDataset:
    """Generate feature maps, scenes, and a manifest; optionally write to disk.

    Identical seeds produce byte-identical datasets.  `noise` is the exact L2
    norm of the per-cell additive noise vector and must stay within 0.1 so
    part cells remain dominated by their prototype.

    Each image also carries `distractors` confuser cells (default: one per
    part) at inconsistent locations.  Confuser directions are fixed per part
    across the dataset with cosine `distractor_cosine` to the prototype, so a
    clustering-initialized detector confuses them with the real part until
    cross-image coherence separates the two.
    """
    if n_parts >= c_i:
        raise ValueError("n_parts must be smaller than c_i")
    if grid < 8:
        raise ValueError("grid must be at least 8")
    if not 0.0 <= noise <= 0.1:
        raise ValueError("noise norm must be within [0, 0.1]")
    if n_images < 1:
        raise ValueError("need at least one image")
    if distractors is None:
        distractors = n_parts

    rng = np.random.default_rng(seed)
    # Orthonormal part prototypes via QR of a Gaussian block.
    gauss = rng.standard_normal((c_i, n_parts))
    q, _ = np.linalg.qr(gauss)
    prototypes = q[:, :n_parts].T.copy()

    # One fixed confuser direction per part, at the configured cosine.
    confusers = np.empty_like(prototypes)
    for idx in range(n_parts):
        u = _unit(rng, c_i)
        u -= (u @ prototypes[idx]) * prototypes[idx]
        u /= np.linalg.norm(u)
        confusers[idx] = (
            distractor_cosine * prototypes[idx]
            + math.sqrt(1.0 - distractor_cosine**2) * u
        )

    field = rng.standard_normal((grid, grid, c_i))
    field /= np.linalg.norm(field, axis=2, keepdims=True)
    part_cells = _pick_part_cells(rng, grid, n_parts)
    for idx, (r, c) in enumerate(part_cells):
        field[r, c] = prototypes[idx]

    image_px = grid * stride
    scenes: list[SyntheticScene] = []
    entries: list[ManifestEntry] = []
    part_cell_arr = np.asarray(part_cells, dtype=np.float64)
    for i in range(n_images):
        img_rng = np.random.default_rng((seed, i))
        # Redraw until every part stays on the canvas with half a cell to
        # spare, so large translations never push a part off the grid.
        for _ in range(1000):
            transform = _random_transform(
                img_rng, grid, max_rotation_deg, scale_range, max_translation
            )
            moved = transform.apply(part_cell_arr)
            if (moved >= 0.5).all() and (moved <= grid - 1.5).all():
                break
        else:
            raise ValueError("cannot keep parts on the canvas; shrink the transforms")
        inverse = transform.inverse()

        # Bilinearly sample the template field at the inverse-transformed cell
        # centers, so the image content varies sub-cell with the transform and
        # alignment can recover it beyond grid quantization.
        rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
        pts = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
        tpl = inverse.apply(pts)
        inside = (
            (tpl[:, 0] >= 0.0)
            & (tpl[:, 0] <= grid - 1.0)
            & (tpl[:, 1] >= 0.0)
            & (tpl[:, 1] <= grid - 1.0)
        )
        r = np.clip(tpl[:, 0], 0.0, grid - 1.0)
        s = np.clip(tpl[:, 1], 0.0, grid - 1.0)
        r0 = np.floor(r).astype(np.intp)
        s0 = np.floor(s).astype(np.intp)
        r1 = np.minimum(r0 + 1, grid - 1)
        s1 = np.minimum(s0 + 1, grid - 1)
        fr = (r - r0)[:, None]
        fs = (s - s0)[:, None]
        fmap = (
            field[r0, s0] * (1 - fr) * (1 - fs)
            + field[r0, s1] * (1 - fr) * fs
            + field[r1, s0] * fr * (1 - fs)
            + field[r1, s1] * fr * fs
        )
        for j in np.nonzero(~inside)[0]:
            fmap[j] = _unit(img_rng, c_i)
        fmap = fmap.reshape(grid, grid, c_i)

        # True part locations on this image, in real-valued cell coordinates.
        part_coords = transform.apply(np.asarray(part_cells, dtype=np.float64))
        part_cells_img = np.rint(part_coords).astype(np.int64)

        # Confuser cells: part-like vectors at per-image random locations,
        # cycling through the parts and staying clear of the true part cells
        # and of each other.
        placed = 0
        occupied: list[tuple[int, int]] = [tuple(rc) for rc in part_cells_img]
        guard = 0
        while placed < distractors and guard < 1000:
            guard += 1
            cand = (int(img_rng.integers(0, grid)), int(img_rng.integers(0, grid)))
            if any(max(abs(cand[0] - r), abs(cand[1] - c)) < 2 for r, c in occupied):
                continue
            fmap[cand[0], cand[1]] = confusers[placed % n_parts]
            occupied.append(cand)
            placed += 1

        # Stamp prototypes at the (rounded) transformed part cells so every
        # part is always present exactly once.
        for idx, (r, c) in enumerate(part_cells_img):
            if not (0 <= r < grid and 0 <= c < grid):
                raise ValueError("part transformed off the canvas; widen the margin")
            fmap[r, c] = prototypes[idx]

        if noise > 0:
            direction = img_rng.standard_normal((grid, grid, c_i))
            direction /= np.linalg.norm(direction, axis=2, keepdims=True)
            fmap = fmap + noise * direction

        fmap32 = fmap.astype(np.float32)
        image_id = f"img_{i:04d}"
        true_parts = [
            (idx, (float(part_coords[idx, 0]), float(part_coords[idx, 1])))
            for idx in range(n_parts)
        ]
        scenes.append(
            SyntheticScene(
                image_id=image_id,
                backbone_map=fmap32,
                true_parts=true_parts,
                applied_transform=transform,
                seed=i,
            )
        )

        landmarks = []
        boxes = []
        half = gt_box_side / 2.0
        for idx, (r, c) in true_parts:
            x = (c + 0.5) * stride
            y = (r + 0.5) * stride
            landmarks.append(Landmark(name=f"part{idx}", x=x, y=y))
            boxes.append(
                PartBox(
                    name=f"part{idx}",
                    x1=max(0.0, x - half),
                    y1=max(0.0, y - half),
                    x2=min(float(image_px), x + half),
                    y2=min(float(image_px), y + half),
                )
            )
        entries.append(
            ManifestEntry(
                image_id=image_id,
                feature_path=f"features/{image_id}.npy",
                image_height=image_px,
                image_width=image_px,
                category="synthetic",
                landmarks=tuple(landmarks),
                part_boxes=tuple(boxes),
            )
        )

    dataset = SyntheticDataset(
        manifest=DatasetManifest(entries),
        scenes=scenes,
        template_field=field,
        part_prototypes=prototypes,
        part_cells=part_cells,
        stride=stride,
        gt_box_side=gt_box_side,
    )
    if out_dir is not None:
        write_dataset(out_dir, dataset)
    return dataset


def write_dataset(out_dir: str | os.PathLike, dataset: SyntheticDataset) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for scene in dataset.scenes:
        save_feature_map(out / "features" / f"{scene.image_id}.npy", scene.backbone_map)
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, dataset.manifest)
    return manifest_path


# ---------------------------------------------------------------------------
# Independent reference implementations (oracles)
# ---------------------------------------------------------------------------


def oracle_pseudo_gt(
    mean_map: np.ndarray, max_per_channel: int = 3, suppress_radius: int = 0
) -> np.ndarray:
    """Straight-line pseudo-GT reference: plain Python loops, no vectorization."""
    fm = np.asarray(mean_map, dtype=np.float64)
    h, w, c = fm.shape
    if c < 2:
        raise ValueError("need at least 2 channels")
    work = [[[float(fm[i, j, k]) for k in range(c)] for j in range(w)] for i in range(h)]
    labels = [[-1] * w for _ in range(h)]
    counts = [0] * c
    background = c - 1
    for _ in range(h * w):
        best = -math.inf
        best_i = best_j = best_k = 0
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    if work[i][j][k] > best:
                        best = work[i][j][k]
                        best_i, best_j, best_k = i, j, k
        labels[best_i][best_j] = best_k
        for k in range(c):
            work[best_i][best_j][k] = -1.0
        if suppress_radius > 0 and best_k != background:
            for i in range(
                max(0, best_i - suppress_radius), min(h, best_i + suppress_radius + 1)
            ):
                for j in range(
                    max(0, best_j - suppress_radius),
                    min(w, best_j + suppress_radius + 1),
                ):
                    work[i][j][best_k] = -1.0
        counts[best_k] += 1
        if counts[best_k] == max_per_channel and best_k != background:
            for i in range(h):
                for j in range(w):
                    work[i][j][best_k] = -1.0
    return np.asarray(labels, dtype=np.int64)


def oracle_affine_fit(
    src_points: np.ndarray, dst_points: np.ndarray
) -> AffineTransform:
    """Closed-form normal-equations affine fit (reference for RANSAC refits)."""
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if len(src) < 3 or src.shape != dst.shape or src.shape[1] != 2:
        raise ValueError("need matching (n >= 3, 2) point arrays")
    a = np.hstack([src, np.ones((len(src), 1))])
    gram = a.T @ a
    if abs(np.linalg.det(gram)) <= 1e-12:
        raise ValueError("collinear input points")
    sol = np.linalg.solve(gram, a.T @ dst)
    return AffineTransform(sol.T)
