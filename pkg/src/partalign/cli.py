"""Command-line entry point exposing the pipeline stages.

Subcommands: synth, sim, train, infer, eval, align.  Training options come
from a flat TOML config file whose keys mirror TrainConfig; any key can be
overridden with ``--set key=value``.  Exit codes: 0 success, 1 usage error,
2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import detect, evaluation, part_layer, similarity, synth, training
from .alignment import AffineTransform, align_pair
from .errors import DataError, InvariantViolation
from .manifest import load_manifest, resolve_feature_path
from .part_layer import load_checkpoint, save_checkpoint
from .tensors import load_feature_map, spatial_max_normalize
from .training import TrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits with 2; we use 1
        raise UsageError(message)


def _parse_set(values: list[str]) -> dict:
    out = {}
    for item in values:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            parsed = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = raw  # bare strings are allowed without quotes
        out[key.strip()] = parsed
    return out


def _load_train_config(args: argparse.Namespace) -> TrainConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            raw.update(tomllib.loads(path.read_text(encoding="utf-8")))
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config file {path} is not valid TOML: {exc}") from None
    raw.update(_parse_set(getattr(args, "set", []) or []))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _print_config(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _echo(payload: dict) -> None:
    print("config: " + json.dumps(payload, sort_keys=True))


def _load_detections(path: Path) -> dict[str, list[detect.Detection]]:
    if not path.exists():
        raise DataError(f"detections file not found: {path}")
    out: dict[str, list[detect.Detection]] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            det = detect.Detection(
                channel=int(rec["channel"]),
                x=float(rec["x"]),
                y=float(rec["y"]),
                score=float(rec["score"]),
                box=tuple(float(v) for v in rec["box"]),
            )
            out.setdefault(str(rec["image_id"]), []).append(det)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{line_no}: bad detection record: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = {
        "n_images": args.n_images,
        "n_parts": args.n_parts,
        "channels": args.channels,
        "grid": args.grid,
        "noise": args.noise,
        "seed": args.seed if args.seed is not None else 0,
        "distractors": args.distractors,
        "stride": args.stride,
        "gt_box_side": args.gt_box_side,
        "max_rotation_deg": args.max_rotation_deg,
        "max_translation": args.max_translation,
    }
    if args.print_config:
        _print_config(cfg)
        return 0
    _echo(cfg)
    dataset = synth.generate_dataset(
        n_images=args.n_images,
        n_parts=args.n_parts,
        c_i=args.channels,
        grid=args.grid,
        noise=args.noise,
        seed=cfg["seed"],
        out_dir=args.out_dir,
        distractors=args.distractors,
        stride=args.stride,
        gt_box_side=args.gt_box_side,
        max_rotation_deg=args.max_rotation_deg,
        max_translation=args.max_translation,
    )
    print(f"wrote {len(dataset.scenes)} feature maps + manifest under {args.out_dir}")
    return 0


def _cmd_sim(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    if args.print_config:
        _print_config(config.to_dict())
        return 0
    _echo(config.to_dict())
    manifest = load_manifest(args.manifest)
    records = training._load_records(manifest, args.manifest)
    sample = training._init_sample(records, config)
    layer = part_layer.init_from_clusters(sample, config.k_clusters, seed=config.seed)
    subset = training._choose_subset([r.entry.image_id for r in records], config)
    by_id = {r.entry.image_id: r for r in records}
    maps = [
        training._forward_probs(layer.weights, by_id[i].unit_vectors, by_id[i].shape)
        for i in subset
    ]
    matrix = similarity.build_similarity_matrix(
        maps, subset, common_size=config.common_size, threads=args.threads
    )
    meta = similarity.save_similarity(args.out_dir, matrix)
    print(f"wrote similarity cache for {len(subset)} images to {meta}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    if args.print_config:
        _print_config(config.to_dict())
        return 0
    _echo(config.to_dict())
    manifest = load_manifest(args.manifest)
    cache = None
    if args.similarity:
        cache = similarity.load_similarity(args.similarity)
    features_sample = None
    if args.features_sample:
        sample_arr = np.load(args.features_sample, allow_pickle=False)
        if sample_arr.ndim != 2:
            raise DataError(f"{args.features_sample}: features sample must be 2-D")
        features_sample = np.asarray(sample_arr, dtype=np.float64)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(epoch: int, loss: float) -> None:
        print(f"epoch {epoch}: mean loss {loss:.6f}")

    result = training.train(
        manifest,
        args.manifest,
        config,
        threads=args.threads,
        features_sample=features_sample,
        similarity_cache=cache,
        progress=progress,
    )
    save_checkpoint(out / "checkpoint_init.bin", result.initial_layer, config.to_dict(), 0)
    save_checkpoint(out / "checkpoint.bin", result.layer, config.to_dict(), config.epochs)
    training.save_metrics(out / "metrics.json", result)
    print(f"wrote checkpoints and metrics under {out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    cfg = {
        "score_threshold": args.score_threshold,
        "box_side": args.box_side,
        "nms_iou": args.nms_iou,
    }
    if args.print_config:
        _print_config(cfg)
        return 0
    _echo(cfg)
    manifest = load_manifest(args.manifest)
    layer, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_dets = 0
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        for entry in manifest:
            fm = load_feature_map(resolve_feature_path(args.manifest, entry))
            probs = part_layer.forward(fm, layer)
            dets = detect.extract_peaks(
                probs,
                entry.image_height,
                entry.image_width,
                score_threshold=args.score_threshold,
                box_side=args.box_side,
            )
            dets = detect.nms(dets, args.nms_iou)
            for d in dets:
                fh.write(
                    json.dumps(
                        {
                            "box": list(d.box),
                            "channel": d.channel,
                            "image_id": entry.image_id,
                            "score": d.score,
                            "x": d.x,
                            "y": d.y,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            n_dets += len(dets)
    print(f"wrote {n_dets} detections to {out / 'detections.jsonl'}")
    return 0


def _normalizers(manifest, kind: str, pupil_names: tuple[str, str] | None) -> dict[str, float]:
    out: dict[str, float] = {}
    for e in manifest:
        if kind == "image":
            out[e.image_id] = float(max(e.image_height, e.image_width))
        elif kind == "bbox":
            if not e.part_boxes:
                raise DataError(f"{e.image_id}: bbox normalizer needs part boxes")
            x1 = min(b.x1 for b in e.part_boxes)
            y1 = min(b.y1 for b in e.part_boxes)
            x2 = max(b.x2 for b in e.part_boxes)
            y2 = max(b.y2 for b in e.part_boxes)
            out[e.image_id] = float(max(x2 - x1, y2 - y1))
        elif kind == "pupil":
            if pupil_names is None:
                raise UsageError("--normalizer pupil requires --pupil-landmarks a,b")
            by_name = {p.name: p for p in e.landmarks or ()}
            try:
                a, b = by_name[pupil_names[0]], by_name[pupil_names[1]]
            except KeyError as exc:
                raise DataError(f"{e.image_id}: missing pupil landmark {exc}") from None
            out[e.image_id] = float(np.hypot(a.x - b.x, a.y - b.y))
        else:
            raise UsageError(f"unknown normalizer: {kind}")
    return out


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = {
        "match": args.match,
        "iou_threshold": args.iou_threshold,
        "l2_threshold": args.l2_threshold,
        "normalizer": args.normalizer,
    }
    if args.print_config:
        _print_config(cfg)
        return 0
    _echo(cfg)
    manifest = load_manifest(args.manifest)
    detections = _load_detections(Path(args.detections))
    rule: evaluation.MatchRule
    if args.match == "iou":
        rule = evaluation.IoUMatch(args.iou_threshold)
    else:
        rule = evaluation.CenterDistanceMatch(args.l2_threshold)
    report = evaluate_detections_report(manifest, detections, rule, args)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mAP {report['detection']['map']:.4f} -> {out}")
    return 0


def evaluate_detections_report(manifest, detections, rule, args) -> dict:
    report: dict = {"detection": evaluation.evaluate_detections(manifest, detections, rule)}
    pupil = None
    if args.pupil_landmarks:
        names = tuple(args.pupil_landmarks.split(","))
        if len(names) != 2:
            raise UsageError("--pupil-landmarks expects exactly two names")
        pupil = names
    n_channels = 1 + max(
        (d.channel for dets in detections.values() for d in dets), default=0
    )
    try:
        norms = _normalizers(manifest, args.normalizer, pupil)
        report["landmarks"] = evaluation.evaluate_landmarks(
            manifest, detections, n_channels, norms
        )
    except ValueError as exc:
        report["landmarks"] = {"skipped": str(exc)}
    return report


def _cmd_align(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    if args.print_config:
        _print_config(config.to_dict())
        return 0
    _echo(config.to_dict())
    manifest = load_manifest(args.manifest)
    layer, _ = load_checkpoint(args.checkpoint)
    records = training._load_records(manifest, args.manifest)
    by_id = {r.entry.image_id: r for r in records}
    if args.query not in by_id:
        raise DataError(f"query image id not in manifest: {args.query}")
    matrix, pools = training._build_pools(records, layer, config, args.threads)
    query = by_id[args.query]
    on_backbone = config.match_source == "backbone"
    q_probs = training._forward_probs(layer.weights, query.unit_vectors, query.shape)
    q_match = query.feature_map if on_backbone else spatial_max_normalize(q_probs)

    dumps = []
    for pool_idx, neighbor_id in enumerate(pools[args.query]):
        member = by_id[neighbor_id]
        probs = training._forward_probs(layer.weights, member.unit_vectors, member.shape)
        result = align_pair(
            q_match,
            member.feature_map if on_backbone else spatial_max_normalize(probs),
            probs,
            threshold=config.cosine_threshold,
            family=config.transform_family,
            iterations=config.ransac_iterations,
            inlier_tol=config.ransac_inlier_tol,
            min_inliers=config.ransac_min_inliers,
            rng_seed=training._step_seed(config.seed, 0, 0, pool_idx),
        )
        theta = (
            result.transform.theta
            if isinstance(result.transform, AffineTransform)
            else result.transform.matrix
        )
        dumps.append(
            {
                "query": args.query,
                "neighbor": neighbor_id,
                "theta": [[float(v) for v in row] for row in theta],
                "inlier_count": result.inlier_count,
                "match_count": result.match_count,
                "fallback": result.fallback,
            }
        )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.dump:
        with open(out / "alignments.json", "w", encoding="utf-8") as fh:
            json.dump(dumps, fh, indent=2, sort_keys=True)
            fh.write("\n")
    for d in dumps:
        print(
            f"{d['query']} <- {d['neighbor']}: {d['match_count']} matches, "
            f"{d['inlier_count']} inliers"
        )
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker pool size (1 = deterministic)")
    p.add_argument("--print-config", action="store_true", help="print effective config and exit")
    if with_config:
        p.add_argument("--config", help="TOML config file with TrainConfig keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-images", type=int, default=40)
    p.add_argument("--n-parts", type=int, default=5)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--grid", type=int, default=12)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--distractors", type=int, default=None,
                   help="confuser cells per image (default: one per part)")
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--gt-box-side", type=float, default=64.0)
    p.add_argument("--max-rotation-deg", type=float, default=10.0)
    p.add_argument("--max-translation", type=float, default=2.0)
    _add_common(p, with_config=False)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("sim", help="precompute the pairwise similarity cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_sim)

    p = sub.add_parser("train", help="train the part layer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--similarity", help="similarity.json written by `sim`")
    p.add_argument("--features-sample", help="NPY (n, c_i) vector sample for cluster init")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run detection on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--score-threshold", type=float, default=0.1)
    p.add_argument("--box-side", type=float, default=100.0)
    p.add_argument("--nms-iou", type=float, default=0.3)
    _add_common(p, with_config=False)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score detections against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True, help="metrics report JSON path")
    p.add_argument("--match", choices=("iou", "l2"), default="iou")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--l2-threshold", type=float, default=0.1)
    p.add_argument("--normalizer", choices=("image", "bbox", "pupil"), default="image")
    p.add_argument("--pupil-landmarks", help="two landmark names, comma separated")
    _add_common(p, with_config=False)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("align", help="inspect pool alignments for one image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help="image id to align the pool onto")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dump", action="store_true", help="write per-pair alignments.json")
    _add_common(p)
    p.set_defaults(func=_cmd_align)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (InvariantViolation, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
