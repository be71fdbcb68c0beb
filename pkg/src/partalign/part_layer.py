"""The trainable part-detection head.

A part layer is a single weight matrix applied per cell: the backbone vector
is L2-normalized, dotted against every weight row, and the logits are pushed
through a softmax.  Rows 0..k-1 are part prototypes initialized from
spherical k-means cluster centers; the last row is the background channel.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensors import ensure_feature_map

LOG_EPS = 1e-8
ADAGRAD_EPS = 1e-10


@dataclass
class PartLayer:
    weights: np.ndarray  # (c_o, c_i), row c_o-1 is the background channel

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be a 2-D matrix")
        if not np.isfinite(w).all():
            raise ValueError("weights contain non-finite entries")
        self.weights = w

    @property
    def c_i(self) -> int:
        return self.weights.shape[1]

    @property
    def c_o(self) -> int:
        return self.weights.shape[0]

    @property
    def background_channel(self) -> int:
        return self.c_o - 1

    def copy(self) -> "PartLayer":
        return PartLayer(self.weights.copy())


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _kmeans_pp_seed(xn: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding under cosine distance (1 - cos), on unit vectors."""
    n = len(xn)
    centers = np.empty((k, xn.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = xn[first]
    best_sim = xn @ centers[0]
    for i in range(1, k):
        d = np.maximum(0.0, 1.0 - best_sim)
        mass = d * d
        total = mass.sum()
        if total <= 0.0:
            # Every point coincides with a chosen center; fall back to the
            # first unchosen index so k distinct rows are still produced.
            taken = {int(np.argmax(xn @ centers[j])) for j in range(i)}
            pick = next(j for j in range(n) if j not in taken)
        else:
            pick = int(rng.choice(n, p=mass / total))
        centers[i] = xn[pick]
        best_sim = np.maximum(best_sim, xn @ centers[i])
    return centers


def init_from_clusters(
    features: np.ndarray,
    k_clusters: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-7,
) -> PartLayer:
    """Build a part layer from spherical k-means centers plus a background row.

    Vectors and centers are L2-normalized; assignment maximizes cosine
    similarity.  The returned layer has ``k_clusters + 1`` output channels,
    the extra one being the zero-initialized background row.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D sample (n, c_i)")
    norms = np.linalg.norm(x, axis=1)
    x = x[norms > 0]
    if len(x) < k_clusters:
        raise ValueError(
            f"sample of {len(x)} non-zero vectors is smaller than k={k_clusters}"
        )
    xn = _normalize_rows(x)
    if k_clusters > 1 and float(xn.std(axis=0).max()) == 0.0:
        raise ValueError("zero-variance sample: all vectors identical")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_seed(xn, k_clusters, rng)
    assign = np.full(len(xn), -1, dtype=np.int64)
    for _ in range(max_iters):
        sims = xn @ centers.T
        new_assign = np.argmax(sims, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        shift = 0.0
        member_sim = sims[np.arange(len(xn)), assign]
        for j in range(k_clusters):
            members = xn[assign == j]
            if len(members) == 0:
                # Re-seed an empty cluster at the worst-served point.
                worst = int(np.argmin(member_sim))
                new_center = xn[worst]
                member_sim[worst] = 1.0
            else:
                mean = members.mean(axis=0)
                nrm = np.linalg.norm(mean)
                new_center = mean / nrm if nrm > 0 else centers[j]
            shift = max(shift, float(np.abs(new_center - centers[j]).max()))
            centers[j] = new_center
        if shift < tol:
            break

    weights = np.zeros((k_clusters + 1, x.shape[1]), dtype=np.float64)
    weights[:k_clusters] = centers
    return PartLayer(weights)


def forward(backbone_map: np.ndarray, layer: PartLayer) -> np.ndarray:
    """Per-cell part responses: L2-normalize, dot with weight rows, softmax.

    Zero backbone vectors pass through as zero, yielding a uniform
    distribution over the output channels.  Output cell vectors sum to 1.
    """
    fm = ensure_feature_map(backbone_map, "backbone map")
    h, w, c = fm.shape
    if c != layer.c_i:
        raise ValueError(f"channel mismatch: map has {c}, layer expects {layer.c_i}")
    v = fm.reshape(-1, c).astype(np.float64)
    vh = _normalize_rows(v)
    logits = vh @ layer.weights.T
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.reshape(h, w, layer.c_o).astype(fm.dtype, copy=False)


def normalized_vectors(backbone_map: np.ndarray) -> np.ndarray:
    """Flattened per-cell unit vectors, the retained input to `forward`."""
    fm = ensure_feature_map(backbone_map, "backbone map")
    v = fm.reshape(-1, fm.shape[2]).astype(np.float64)
    return _normalize_rows(v)


def nll_loss(
    mean_map: np.ndarray, labels: np.ndarray, eps: float = LOG_EPS
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of the labels under the mean response map.

    Returns the scalar loss and its gradient with respect to the mean map.
    Values below `eps` are clamped inside the log and get zero gradient.
    """
    fm = ensure_feature_map(mean_map, "mean map")
    h, w, c = fm.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ValueError(f"labels shape {labels.shape} does not match map {(h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c - 1}]")
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    values = fm[rows, cols, labels].astype(np.float64)
    n = h * w
    clamped = np.maximum(values, eps)
    loss = float(-np.log(clamped).mean())
    grad = np.zeros((h, w, c), dtype=np.float64)
    grad[rows, cols, labels] = np.where(values >= eps, -1.0 / (n * clamped), 0.0)
    return loss, grad


@dataclass
class AdagradState:
    """Adagrad accumulator plus the step-decay schedule."""

    accumulator: np.ndarray
    base_lr: float = 5e-3
    decay: float = 0.1
    milestones: tuple[int, ...] = ()
    epoch: int = 0

    @classmethod
    def for_layer(
        cls,
        layer: PartLayer,
        base_lr: float = 5e-3,
        decay: float = 0.1,
        milestones: tuple[int, ...] = (),
    ) -> "AdagradState":
        return cls(
            accumulator=np.zeros_like(layer.weights),
            base_lr=base_lr,
            decay=decay,
            milestones=tuple(milestones),
        )

    def effective_lr(self) -> float:
        passed = sum(1 for m in self.milestones if self.epoch >= m)
        return self.base_lr * self.decay**passed


def adagrad_step(layer: PartLayer, grad: np.ndarray, state: AdagradState) -> None:
    """One in-place Adagrad update of the layer weights."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != layer.weights.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match weights {layer.weights.shape}"
        )
    if not np.isfinite(grad).all():
        raise ValueError("non-finite gradient")
    state.accumulator += grad * grad
    layer.weights -= state.effective_lr() * grad / (np.sqrt(state.accumulator) + ADAGRAD_EPS)


_CHECKPOINT_MAGIC = b"PALW"


def save_checkpoint(
    path: str | os.PathLike,
    layer: PartLayer,
    config: dict | None = None,
    epoch: int = 0,
) -> None:
    """Write weights (header + little-endian float32) and a JSON sidecar."""
    path = Path(path)
    w32 = np.ascontiguousarray(layer.weights, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", layer.c_i, layer.c_o))
        fh.write(w32.tobytes())
    sidecar = {"c_i": layer.c_i, "c_o": layer.c_o, "epoch": epoch, "config": config or {}}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[PartLayer, dict]:
    """Read a checkpoint written by `save_checkpoint`."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    head = len(_CHECKPOINT_MAGIC) + 8
    if len(blob) < head or blob[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a part-layer checkpoint")
    c_i, c_o = struct.unpack("<II", blob[len(_CHECKPOINT_MAGIC) : head])
    expected = c_i * c_o * 4
    if len(blob) != head + expected:
        raise DataError(f"{path}: payload is {len(blob) - head} bytes, want {expected}")
    weights = np.frombuffer(blob[head:], dtype="<f4").reshape(c_o, c_i)
    sidecar_path = Path(str(path) + ".json")
    sidecar: dict = {}
    if sidecar_path.exists():
        try:
            sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{sidecar_path}: malformed sidecar: {exc}") from None
    return PartLayer(weights.astype(np.float64)), sidecar
