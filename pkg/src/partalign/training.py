"""Self-training loop for the part layer.

Each optimizer step processes one training image: its similar-image pool is
retrieved, every map is pushed through the part layer, pool maps are aligned
and warped onto the training canvas, the warped maps are averaged into a
pseudo ground-truth label map, and the NLL of those labels under the
averaged map is backpropagated into the layer weights (Adagrad).

Retrieval pools, fitted transforms, validity masks, and pseudo labels are
treated as constants of the step; gradients flow only through the masked
average, the bilinear warp, and the per-cell softmax.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import alignment, part_layer, pseudo_gt, similarity
from .alignment import TRANSFORM_FAMILIES, WarpPlan
from .errors import DataError, InvariantViolation
from .manifest import DatasetManifest, ManifestEntry, resolve_feature_path
from .part_layer import AdagradState, PartLayer
from .tensors import load_feature_map, spatial_max_normalize


@dataclass
class TrainConfig:
    """Hyperparameters of one training run; defaults follow the reference setup."""

    top_k: int = 15
    subset_size: int = 2000
    cosine_threshold: float = 0.6
    transform_family: str = "affine"
    max_per_channel: int = 3
    suppress_radius: int = 0
    epochs: int = 10
    seed: int = 0
    refresh_every: int = 0
    k_clusters: int = 512
    learning_rate: float = 5e-3
    lr_decay: float = 0.1
    common_size: int = 14
    ransac_iterations: int = 100
    ransac_inlier_tol: float = 1.0
    ransac_min_inliers: int = 6
    include_self_in_pseudo_gt: bool = False
    init_sample_size: int = 100_000
    match_source: str = "response"  # "response" (part maps) or "backbone" (raw features)

    def __post_init__(self) -> None:
        if self.transform_family not in TRANSFORM_FAMILIES:
            raise ValueError(
                f"transform_family must be one of {TRANSFORM_FAMILIES}, "
                f"got {self.transform_family!r}"
            )
        if self.match_source not in ("response", "backbone"):
            raise ValueError(
                f"match_source must be 'response' or 'backbone', got {self.match_source!r}"
            )
        for name in ("top_k", "subset_size", "max_per_channel", "k_clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("epochs", "suppress_radius", "refresh_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**raw)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_probs(weights: np.ndarray, vh: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    probs = softmax_rows(vh @ weights.T)
    return probs.reshape(shape[0], shape[1], weights.shape[0])


def pipeline_loss(
    weights: np.ndarray,
    train_vh: np.ndarray,
    train_shape: tuple[int, int],
    pool_vhs: Sequence[np.ndarray],
    pool_shapes: Sequence[tuple[int, int]],
    plans: Sequence[WarpPlan],
    labels: np.ndarray,
    *,
    include_self: bool = True,
    eps: float = part_layer.LOG_EPS,
) -> float:
    """Forward-only step loss for fixed transforms and labels.

    Exists as the target for finite-difference checks: it recomputes the loss
    from raw weights through softmax, warp, and masked average.
    """
    h, w = train_shape
    maps = [_forward_probs(weights, train_vh, train_shape)]
    masks = [np.ones((h, w), dtype=bool) if include_self else np.zeros((h, w), dtype=bool)]
    for vh, shape, plan in zip(pool_vhs, pool_shapes, plans):
        probs = _forward_probs(weights, vh, shape)
        maps.append(alignment.apply_warp_plan(probs, plan))
        masks.append(plan.valid)
    mean_map = pseudo_gt.average_aligned(maps, masks)
    loss, _ = part_layer.nll_loss(mean_map, labels, eps)
    return loss


def pipeline_loss_and_grad(
    weights: np.ndarray,
    train_vh: np.ndarray,
    train_shape: tuple[int, int],
    pool_vhs: Sequence[np.ndarray],
    pool_shapes: Sequence[tuple[int, int]],
    plans: Sequence[WarpPlan],
    labels: np.ndarray,
    *,
    include_self: bool = True,
    eps: float = part_layer.LOG_EPS,
) -> tuple[float, np.ndarray]:
    """Step loss and its analytic gradient with respect to the layer weights.

    The chain runs NLL -> masked average -> bilinear warp transpose ->
    softmax -> weight rows.  Pseudo labels and transform parameters are
    constants.
    """
    h, w = train_shape
    c_o = weights.shape[0]
    vhs = [train_vh] + list(pool_vhs)
    shapes = [train_shape] + list(pool_shapes)
    probs = [_forward_probs(weights, vh, shape) for vh, shape in zip(vhs, shapes)]

    self_mask = np.ones((h, w), dtype=bool) if include_self else np.zeros((h, w), dtype=bool)
    canvas_maps = [probs[0]]
    masks = [self_mask]
    for p, plan in zip(probs[1:], plans):
        canvas_maps.append(alignment.apply_warp_plan(p, plan))
        masks.append(plan.valid)

    mean_map = pseudo_gt.average_aligned(canvas_maps, masks)
    loss, grad_mean = part_layer.nll_loss(mean_map, labels, eps)

    # Masked-average backward: valid contributors share 1/count of the cell
    # gradient; cells with no valid contributor fall back to the first map.
    counts = np.sum(np.stack(masks, axis=0), axis=0)
    share = np.where(counts > 0, 1.0 / np.where(counts > 0, counts, 1.0), 0.0)
    shared = grad_mean * share[:, :, None]
    zero_cells = counts == 0

    grad_w = np.zeros_like(weights)

    def accumulate(grad_probs_flat: np.ndarray, p: np.ndarray, vh: np.ndarray) -> None:
        s = p.reshape(-1, c_o)
        inner = (grad_probs_flat * s).sum(axis=1, keepdims=True)
        grad_logits = s * (grad_probs_flat - inner)
        nonlocal grad_w
        grad_w += grad_logits.T @ vh

    # Training map: its canvas contribution plus the zero-contributor fallback.
    grad_train = shared * masks[0][:, :, None]
    if zero_cells.any():
        grad_train = grad_train + grad_mean * zero_cells[:, :, None]
    accumulate(grad_train.reshape(-1, c_o), probs[0], train_vh)

    for p, plan, vh in zip(probs[1:], plans, pool_vhs):
        grad_canvas = shared * plan.valid[:, :, None]
        grad_src = alignment.backprop_warp_plan(grad_canvas, plan)
        accumulate(grad_src.reshape(-1, c_o), p, vh)

    return loss, grad_w


@dataclass
class _ImageRecord:
    entry: ManifestEntry
    shape: tuple[int, int]
    unit_vectors: np.ndarray  # (h*w, c_i)
    feature_map: np.ndarray  # raw backbone map, used when matching on the backbone


@dataclass
class TrainResult:
    layer: PartLayer
    initial_layer: PartLayer
    epoch_losses: list[float]
    similarity_matrix: similarity.SimilarityMatrix
    pools: dict[str, list[str]]
    config: TrainConfig


def _step_seed(base: int, epoch: int, image_idx: int, pool_idx: int) -> int:
    return (base * 1_000_003 + epoch * 10_007 + image_idx * 131 + pool_idx) & 0x7FFFFFFF


def _load_records(
    manifest: DatasetManifest, manifest_path: str | os.PathLike
) -> list[_ImageRecord]:
    records = []
    for entry in manifest:
        fm = load_feature_map(resolve_feature_path(manifest_path, entry))
        records.append(
            _ImageRecord(
                entry=entry,
                shape=(fm.shape[0], fm.shape[1]),
                unit_vectors=part_layer.normalized_vectors(fm),
                feature_map=fm.astype(np.float64),
            )
        )
    if not records:
        raise DataError("empty manifest")
    channels = {r.unit_vectors.shape[1] for r in records}
    if len(channels) != 1:
        raise DataError(f"inconsistent backbone channel counts: {sorted(channels)}")
    return records


def _init_sample(records: list[_ImageRecord], config: TrainConfig) -> np.ndarray:
    all_vecs = np.concatenate([r.unit_vectors for r in records], axis=0)
    if len(all_vecs) > config.init_sample_size:
        rng = np.random.default_rng(config.seed)
        idx = rng.choice(len(all_vecs), size=config.init_sample_size, replace=False)
        all_vecs = all_vecs[np.sort(idx)]
    return all_vecs


def _choose_subset(ids: list[str], config: TrainConfig) -> list[str]:
    if len(ids) <= config.subset_size:
        return list(ids)
    rng = np.random.default_rng(config.seed)
    idx = np.sort(rng.choice(len(ids), size=config.subset_size, replace=False))
    return [ids[i] for i in idx]


def _build_pools(
    records: list[_ImageRecord],
    layer: PartLayer,
    config: TrainConfig,
    threads: int,
    cached: similarity.SimilarityMatrix | None = None,
) -> tuple[similarity.SimilarityMatrix, dict[str, list[str]]]:
    ids = [r.entry.image_id for r in records]
    by_id = {r.entry.image_id: r for r in records}
    subset = _choose_subset(ids, config)

    if cached is not None:
        matrix = cached
    else:
        maps = [
            _forward_probs(layer.weights, by_id[i].unit_vectors, by_id[i].shape)
            for i in subset
        ]
        matrix = similarity.build_similarity_matrix(
            maps, subset, common_size=config.common_size, threads=threads
        )

    dists: dict[str, np.ndarray] = {}

    def location_dist(image_id: str) -> np.ndarray:
        if image_id not in dists:
            rec = by_id[image_id]
            probs = _forward_probs(layer.weights, rec.unit_vectors, rec.shape)
            dists[image_id] = similarity.location_distributions(probs, config.common_size)
        return dists[image_id]

    pools: dict[str, list[str]] = {}
    for image_id in ids:
        candidates = [s for s in matrix.ids if s != image_id]
        if image_id in matrix:
            pools[image_id] = similarity.top_k_pool(
                matrix, image_id, config.top_k, candidates
            )
        else:
            # Out-of-subset query: score it against the cached subset directly.
            q = location_dist(image_id)
            scored = sorted(
                candidates,
                key=lambda cid: (similarity.mean_location_js(q, location_dist(cid)), cid),
            )
            pools[image_id] = scored[: config.top_k]
    return matrix, pools


def train(
    manifest: DatasetManifest,
    manifest_path: str | os.PathLike,
    config: TrainConfig,
    *,
    threads: int = 1,
    features_sample: np.ndarray | None = None,
    similarity_cache: similarity.SimilarityMatrix | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run the full self-training loop and return the trained layer.

    Deterministic for a fixed config seed when `threads` is 1 (parallel
    alignment is also deterministic because every alignment derives its own
    seed, but single-threaded mode is the reproducibility reference).
    """
    records = _load_records(manifest, manifest_path)

    sample = features_sample if features_sample is not None else _init_sample(records, config)
    layer = part_layer.init_from_clusters(sample, config.k_clusters, seed=config.seed)
    initial_layer = layer.copy()

    matrix, pools = _build_pools(records, layer, config, threads, cached=similarity_cache)

    milestones: tuple[int, ...] = ()
    if config.epochs > 1:
        milestones = (max(1, (2 * config.epochs) // 3),)
    state = AdagradState.for_layer(
        layer, base_lr=config.learning_rate, decay=config.lr_decay, milestones=milestones
    )
    by_id = {r.entry.image_id: r for r in records}
    # Backbone features are frozen, so backbone-based alignments never change
    # across epochs and can be cached per (image, neighbour) pair.
    plan_cache: dict[tuple[str, str], alignment.AlignmentResult] | None = (
        {} if config.match_source == "backbone" else None
    )
    epoch_losses: list[float] = []

    for epoch in range(config.epochs):
        if config.refresh_every and epoch > 0 and epoch % config.refresh_every == 0:
            matrix, pools = _build_pools(records, layer, config, threads)
        state.epoch = epoch
        losses = []
        for img_idx, rec in enumerate(records):
            pool_ids = pools[rec.entry.image_id]
            loss = _train_step(layer, state, rec, [by_id[p] for p in pool_ids],
                               config, epoch, img_idx, threads, plan_cache)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise InvariantViolation(f"non-finite epoch loss at epoch {epoch}")
        epoch_losses.append(mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)

    return TrainResult(
        layer=layer,
        initial_layer=initial_layer,
        epoch_losses=epoch_losses,
        similarity_matrix=matrix,
        pools=pools,
        config=config,
    )


def _train_step(
    layer: PartLayer,
    state: AdagradState,
    rec: _ImageRecord,
    pool: list[_ImageRecord],
    config: TrainConfig,
    epoch: int,
    img_idx: int,
    threads: int,
    plan_cache: dict[tuple[str, str], alignment.AlignmentResult] | None,
) -> float:
    h, w = rec.shape
    train_probs = _forward_probs(layer.weights, rec.unit_vectors, rec.shape)
    on_backbone = config.match_source == "backbone"
    if not on_backbone:
        train_match_map = spatial_max_normalize(train_probs)

    def align_one(args: tuple[int, _ImageRecord]) -> alignment.AlignmentResult:
        pool_idx, member = args
        if on_backbone:
            key = (rec.entry.image_id, member.entry.image_id)
            cached = plan_cache.get(key) if plan_cache is not None else None
            if cached is not None:
                return cached
            result = alignment.align_pair(
                rec.feature_map,
                member.feature_map,
                member.feature_map,
                threshold=config.cosine_threshold,
                family=config.transform_family,
                iterations=config.ransac_iterations,
                inlier_tol=config.ransac_inlier_tol,
                min_inliers=config.ransac_min_inliers,
                rng_seed=_step_seed(config.seed, 0, img_idx, pool_idx),
            )
            if plan_cache is not None:
                plan_cache[key] = result
            return result
        probs = _forward_probs(layer.weights, member.unit_vectors, member.shape)
        return alignment.align_pair(
            train_match_map,
            spatial_max_normalize(probs),
            probs,
            threshold=config.cosine_threshold,
            family=config.transform_family,
            iterations=config.ransac_iterations,
            inlier_tol=config.ransac_inlier_tol,
            min_inliers=config.ransac_min_inliers,
            rng_seed=_step_seed(config.seed, epoch, img_idx, pool_idx),
        )

    tasks = list(enumerate(pool))
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(align_one, tasks))
    else:
        results = [align_one(t) for t in tasks]

    # The current part responses of every pool member, warped through the
    # fitted transforms onto the training canvas.
    warped = []
    for member, res in zip(pool, results):
        probs = _forward_probs(layer.weights, member.unit_vectors, member.shape)
        warped.append(alignment.apply_warp_plan(probs, res.plan))

    # Pseudo labels come from the warped pool; the training map is prepended
    # with an all-false mask purely as the zero-contributor fallback (or with
    # an all-true mask when configured to include itself).
    self_mask = np.full((h, w), config.include_self_in_pseudo_gt, dtype=bool)
    if results:
        gt_maps = [train_probs] + warped
        gt_masks = [self_mask] + [r.validity for r in results]
    else:
        gt_maps, gt_masks = [train_probs], [np.ones((h, w), dtype=bool)]
    mean_for_gt = pseudo_gt.average_aligned(gt_maps, gt_masks)
    labels = pseudo_gt.generate_pseudo_gt(
        mean_for_gt, config.max_per_channel, config.suppress_radius
    )

    loss, grad = pipeline_loss_and_grad(
        layer.weights,
        rec.unit_vectors,
        rec.shape,
        [m.unit_vectors for m in pool],
        [m.shape for m in pool],
        [r.plan for r in results],
        labels,
        include_self=True,
    )
    part_layer.adagrad_step(layer, grad, state)
    return loss


def save_metrics(path: str | os.PathLike, result: TrainResult) -> None:
    payload = {
        "epoch_losses": result.epoch_losses,
        "epochs": result.config.epochs,
        "num_images": len(result.pools),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
