"""Unsupervised object-part discovery by aligning feature maps of similar
images, generating pseudo labels, and self-training a part-detection layer
on top of frozen backbone features."""

from .alignment import (
    AffineTransform,
    AlignmentResult,
    Homography,
    Match,
    align_pair,
    match_features,
    ransac_affine,
    ransac_transform,
    warp_to_canvas,
)
from .detect import Detection, extract_peaks, iou, nms
from .errors import DataError, InvariantViolation
from .evaluation import (
    ChannelPartAssignment,
    LandmarkRegressor,
    assign_channels,
    average_precision,
    fit_landmark_regressor,
    normalized_error,
)
from .manifest import (
    DatasetManifest,
    Landmark,
    ManifestEntry,
    PartBox,
    load_manifest,
    save_manifest,
)
from .part_layer import (
    AdagradState,
    PartLayer,
    adagrad_step,
    forward,
    init_from_clusters,
    load_checkpoint,
    nll_loss,
    save_checkpoint,
)
from .pseudo_gt import average_aligned, generate_pseudo_gt
from .similarity import (
    SimilarityMatrix,
    build_similarity_matrix,
    js_divergence,
    map_divergence,
    top_k_pool,
)
from .synth import generate_dataset, oracle_affine_fit, oracle_pseudo_gt
from .tensors import (
    load_feature_map,
    resize_bilinear,
    save_feature_map,
    spatial_max_normalize,
)
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"
