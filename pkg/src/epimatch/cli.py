"""Command-line surface: match a pair, run metric suites, self-test.

Commands: ``match``, ``eval-hpatches``, ``eval-pose``, ``selftest``,
``export-manifest-template``.  Exit codes are stable: 0 success, 2 when an
image pair yields too few deep seed matches, 1 for I/O, format, or
configuration errors.  Identical inputs give byte-identical outputs for
any ``--threads`` value; batch evaluation fans pairs out to a worker pool
and reduces results in pair order.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, geometry
from .cascade import CascadeConfig, cascade_match
from .errors import (
    DegenerateCameraSpec,
    DegenerateInput,
    EpimatchError,
    InsufficientSeedMatches,
)
from .evaluation import (
    HOMOGRAPHY_THRESHOLDS,
    MMA_THRESHOLDS,
    POSE_THRESHOLDS,
    HomographyGT,
    MetricReport,
    PairRecord,
    homography_accuracy,
    load_pose_pairs,
    matching_precision,
    mma,
    pose_auc,
    pose_error_for_pair,
    summarize_homography,
    summarize_mma,
)
from .features import (
    BackendManifest,
    ManifestLayer,
    builtin_manifest,
    extract_pyramid,
    load_image,
    load_manifest,
)
from .synthetic import SceneSpec, WarpSpec, synth_scene, synth_warp_pair

DEFAULT_BACKEND = "builtin:4"
DEFAULT_SELFTEST_SEED = 1

# Published full-benchmark reference rows, printed for comparison only when
# a run covers a full public dataset (never asserted against local runs).
_REFERENCE_HOMOGRAPHY = {"acc@1px": 0.49, "acc@3px": 0.78, "acc@5px": 0.88}
_REFERENCE_POSE = {
    "auc@5deg": 0.3985,
    "auc@10deg": 0.5411,
    "auc@20deg": 0.6586,
    "precision": 0.9114,
}
_FULL_HPATCHES_SEQUENCES = 100
_FULL_POSE_PAIRS = 1000

# Indirection for the self-test's epipolar checks so a fault can be
# injected (e.g. a sign flip) to prove the suite actually fails.
_SAMPSON = geometry.sampson_distances


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit 1, not argparse's 2."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common_flags(parser):
    parser.add_argument(
        "--backend",
        default=DEFAULT_BACKEND,
        help="manifest JSON path or 'builtin:L' (default %(default)s)",
    )
    parser.add_argument(
        "--layers",
        default=None,
        help="comma-separated pyramid layer indices, ascending (default all)",
    )
    parser.add_argument(
        "--ratio",
        default=None,
        help="ratio-test threshold; a float, or 'layer=value' pairs "
        "separated by commas",
    )
    parser.add_argument(
        "--sampson",
        type=float,
        default=None,
        help="base Sampson inlier threshold in square pixels at scale 1",
    )
    mutual = parser.add_mutually_exclusive_group()
    mutual.add_argument(
        "--mutual", dest="mutual", action="store_true", default=True,
        help="require mutual nearest neighbors (default)",
    )
    mutual.add_argument(
        "--no-mutual", dest="mutual", action="store_false",
        help="accept one-directional nearest neighbors",
    )
    parser.add_argument(
        "--threads", type=int, default=1,
        help="worker threads for batch pair evaluation (default 1)",
    )
    parser.add_argument("--out", default=None, help="output file path")
    parser.add_argument(
        "--format", choices=("json", "csv"), default="json",
        help="report format for --out (default json)",
    )


def _parse_ratio(text):
    if text is None:
        return None
    if "=" not in text:
        return float(text)
    table = {}
    for item in text.split(","):
        layer, _, value = item.partition("=")
        table[int(layer)] = float(value)
    return table


def _build_cascade_config(args) -> CascadeConfig:
    kwargs = {}
    if args.layers is not None:
        kwargs["layers"] = tuple(int(v) for v in args.layers.split(","))
    ratio = _parse_ratio(args.ratio)
    if ratio is not None:
        kwargs["ratio_threshold"] = ratio
    if args.sampson is not None:
        kwargs["sampson_base"] = args.sampson
    kwargs["mutual"] = args.mutual
    return CascadeConfig(**kwargs)


def _resolve_backend(spec: str):
    """Load a manifest path once; pass 'builtin:L' strings through."""
    if spec.startswith("builtin"):
        return spec
    return load_manifest(spec)


def _match_pair(image_a, image_b, backend, cfg):
    pyr_a = extract_pyramid(image_a, backend)
    pyr_b = extract_pyramid(image_b, backend)
    return cascade_match(pyr_a, pyr_b, cfg)


def _diagnostics_payload(diagnostics):
    return [
        {
            "layer": d.layer,
            "scale": d.scale,
            "matched": d.matched,
            "retained": d.retained,
            "inlier_ratio": d.inlier_ratio,
            "degenerate": d.degenerate,
            "fallback": d.fallback,
        }
        for d in diagnostics
    ]


def _match_artifact(result) -> str:
    """JSON-lines match output: header record first, then one row per match."""
    lines = []
    header = {
        "type": "header",
        "f": [float(v) for v in np.asarray(result.f_final).ravel()],
        "degenerate": bool(result.degenerate),
        "match_count": int(len(result.points_a)),
        "diagnostics": _diagnostics_payload(result.diagnostics),
    }
    lines.append(json.dumps(header))
    for i in range(len(result.points_a)):
        lines.append(
            json.dumps(
                {
                    "xA": float(result.points_a[i, 0]),
                    "yA": float(result.points_a[i, 1]),
                    "xB": float(result.points_b[i, 0]),
                    "yB": float(result.points_b[i, 1]),
                    "distance": float(result.distance[i]),
                    "confidence": float(result.confidence[i]),
                }
            )
        )
    return "\n".join(lines) + "\n"


def _emit(text: str, out_path):
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_match(args) -> int:
    backend = _resolve_backend(args.backend)
    cfg = _build_cascade_config(args)
    image_a = load_image(args.image_a)
    image_b = load_image(args.image_b)
    result = _match_pair(image_a, image_b, backend, cfg)
    _emit(_match_artifact(result), args.out)
    return 0


def _pair_workloads(executor_threads, jobs, worker):
    """Map worker over jobs preserving job order regardless of completion."""
    if executor_threads <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=executor_threads) as pool:
        return list(pool.map(worker, jobs))


def _split_of(sequence_name: str):
    if sequence_name.startswith("v_"):
        return "viewpoint"
    if sequence_name.startswith("i_"):
        return "illumination"
    return None


def cmd_eval_hpatches(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return 1
    directories = sorted(d for d in root.iterdir() if d.is_dir())
    if not directories:
        print(f"error: no sequence directories under {root}", file=sys.stderr)
        return 1
    backend = _resolve_backend(args.backend)
    cfg = _build_cascade_config(args)

    jobs = [(d, k) for d in directories for k in range(2, 7)]

    def worker(job):
        directory, k = job
        pair_id = f"{directory.name}/1_{k}"
        try:
            image_a = evaluation._load_image(directory, "1")
            image_b = evaluation._load_image(directory, str(k))
            gt = HomographyGT(
                evaluation._parse_matrix_file(directory / f"H_1_{k}")
            )
        except EpimatchError as exc:
            print(f"warning: skipping {pair_id}: {exc}", file=sys.stderr)
            return pair_id, None, None, None, 0
        try:
            result = _match_pair(image_a, image_b, backend, cfg)
            pts_a, pts_b = result.points_a, result.points_b
        except InsufficientSeedMatches:
            pts_a = pts_b = np.zeros((0, 2))
        height, width = image_a.shape[0], image_a.shape[1]
        mma_result = mma(pts_a, pts_b, gt, MMA_THRESHOLDS)
        hom = homography_accuracy(
            pts_a, pts_b, gt, width, height, HOMOGRAPHY_THRESHOLDS
        )
        return pair_id, directory.name, mma_result, hom, len(pts_a)

    outcomes = _pair_workloads(args.threads, jobs, worker)

    records = []
    by_split = {"overall": ([], []), "viewpoint": ([], []), "illumination": ([], [])}
    skipped = 0
    for pair_id, seq_name, mma_result, hom, count in outcomes:
        if mma_result is None:
            skipped += 1
            records.append(PairRecord(pair_id, 0, {"skipped": 1.0}))
            continue
        metrics = {"skipped": 0.0}
        for t, frac in zip(MMA_THRESHOLDS, mma_result.fractions):
            metrics[f"mma@{int(t)}"] = float(frac)
        metrics["corner_error"] = float(hom.corner_error)
        for t, ok in zip(HOMOGRAPHY_THRESHOLDS, hom.success):
            metrics[f"acc@{int(t)}px"] = 1.0 if ok else 0.0
        metrics["failed"] = 1.0 if hom.failed else 0.0
        records.append(PairRecord(pair_id, count, metrics))
        splits = ["overall"]
        named = _split_of(seq_name)
        if named:
            splits.append(named)
        for split in splits:
            by_split[split][0].append(mma_result)
            by_split[split][1].append(hom)

    if not by_split["overall"][0]:
        print("error: every pair was skipped", file=sys.stderr)
        return 1

    aggregates = {"skipped_pairs": float(skipped)}
    for split, (mma_results, hom_results) in by_split.items():
        if not mma_results:
            continue
        for key, value in summarize_mma(mma_results).items():
            aggregates[f"{split}/{key}"] = value
        for key, value in summarize_homography(hom_results).items():
            aggregates[f"{split}/{key}"] = value

    report = MetricReport(records=tuple(records), aggregates=aggregates)
    _write_report(report, args)
    _print_aggregates(aggregates)
    if len(directories) >= _FULL_HPATCHES_SEQUENCES:
        row = "  ".join(f"{k} {v:.2f}" for k, v in _REFERENCE_HOMOGRAPHY.items())
        print(f"reference (published, full benchmark): {row}")
    return 0


def cmd_eval_pose(args) -> int:
    pairs = load_pose_pairs(args.pairs_file)
    if not pairs:
        print(f"error: no pairs in {args.pairs_file}", file=sys.stderr)
        return 1
    backend = _resolve_backend(args.backend)
    cfg = _build_cascade_config(args)

    def worker(job):
        index, pair = job
        pair_id = f"{index:05d}:{Path(pair.image_a).name}:{Path(pair.image_b).name}"
        image_a = load_image(pair.image_a)
        image_b = load_image(pair.image_b)
        try:
            result = _match_pair(image_a, image_b, backend, cfg)
        except InsufficientSeedMatches:
            return pair_id, 0, float("inf"), 0.0
        error_deg = pose_error_for_pair(
            result.f_final, result.points_a, result.points_b, pair.gt
        )
        precision = matching_precision(result.points_a, result.points_b, pair.gt)
        return pair_id, len(result.points_a), float(error_deg), float(
            precision.fraction
        )

    outcomes = _pair_workloads(args.threads, worker=worker, jobs=list(enumerate(pairs)))

    records = []
    errors = []
    precisions = []
    for pair_id, count, error_deg, precision in outcomes:
        records.append(
            PairRecord(
                pair_id,
                count,
                {"pose_error_deg": error_deg, "precision": precision},
            )
        )
        errors.append(error_deg)
        precisions.append(precision)

    aucs = pose_auc(np.asarray(errors), POSE_THRESHOLDS)
    aggregates = {
        f"auc@{int(t)}deg": float(a) for t, a in zip(POSE_THRESHOLDS, aucs)
    }
    aggregates["precision"] = float(np.mean(precisions))
    aggregates["pairs"] = float(len(records))

    report = MetricReport(records=tuple(records), aggregates=aggregates)
    _write_report(report, args)
    _print_aggregates(aggregates)
    if len(pairs) >= _FULL_POSE_PAIRS:
        row = "  ".join(f"{k} {v:.4f}" for k, v in _REFERENCE_POSE.items())
        print(f"reference (published, full benchmark): {row}")
    return 0


def _write_report(report: MetricReport, args):
    if not args.out:
        return
    text = report.to_json() if args.format == "json" else report.to_csv()
    Path(args.out).write_text(text + ("\n" if not text.endswith("\n") else ""))


def _print_aggregates(aggregates):
    for key in sorted(aggregates):
        print(f"{key} {aggregates[key]!r}")


# ---------------------------------------------------------------------------
# Self-test.


def _fmat_gap(f_est, f_gt) -> float:
    a = np.asarray(f_est, dtype=np.float64)
    b = np.asarray(f_gt, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def _selftest_properties(seed: int):
    """Yield (name, passed, detail) for each synthetic oracle property."""

    scene = synth_scene(seed, n_points=48)
    f_est = geometry.eight_point(scene.points_a, scene.points_b)
    gap = _fmat_gap(f_est, scene.f_gt)
    yield (
        "eight-point recovery",
        gap < 1e-6,
        f"fundamental matrix gap {gap!r}",
    )

    f_hand = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    value = float(_SAMPSON(f_hand, np.array([[0.0, 0.0]]), np.array([[0.0, 1.0]]))[0])
    hand_ok = abs(value - 0.5) < 1e-12
    rng = np.random.default_rng(seed)
    off_surface = scene.points_b + rng.uniform(1.0, 4.0, scene.points_b.shape)
    base = _SAMPSON(scene.f_gt, scene.points_a, off_surface)
    scaled = _SAMPSON(scene.f_gt * 7.5, scene.points_a, off_surface)
    scale_ok = bool(np.all(np.abs(base - scaled) <= 1e-9 * np.abs(base)))
    sign_ok = bool(np.all(base >= 0.0))
    yield (
        "sampson distance",
        hand_ok and scale_ok and sign_ok,
        f"hand case {value!r}, scale invariant {scale_ok}, nonnegative {sign_ok}",
    )

    auc_half = float(pose_auc(np.array([0.0, 10.0]), (10.0,))[0])
    auc_perfect = float(pose_auc(np.zeros(4), (5.0,))[0])
    pts = np.arange(20, dtype=np.float64).reshape(10, 2) * 7.0
    identity_gt = HomographyGT(np.eye(3))
    shifted = mma(pts, pts + np.array([2.0, 0.0]), identity_gt, (1.0, 2.0, 3.0))
    mma_ok = (
        shifted.fractions[0] == 0.0
        and shifted.fractions[1] == 1.0
        and shifted.fractions[2] == 1.0
    )
    precision = matching_precision(
        scene.points_a,
        scene.points_b,
        evaluation.PoseGT(
            k_a=scene.k_a,
            k_b=scene.k_b,
            rotation=scene.rotation,
            translation=scene.translation,
        ),
    )
    yield (
        "metric engines",
        auc_half == 0.5 and auc_perfect == 1.0 and mma_ok
        and precision.fraction == 1.0,
        f"auc {auc_half!r}/{auc_perfect!r}, mma step {mma_ok}, "
        f"precision {precision.fraction!r}",
    )

    warp = synth_warp_pair(seed, n_points=300)
    pyr_a = extract_pyramid(warp.image_a, f"builtin:{WarpSpec().levels}")
    pyr_b = extract_pyramid(warp.image_b, f"builtin:{WarpSpec().levels}")
    result = cascade_match(pyr_a, pyr_b)
    ones = np.ones((len(result.points_a), 1))
    projected = np.concatenate([result.points_a, ones], axis=1) @ warp.h_gt.T
    projected = projected[:, :2] / projected[:, 2:3]
    err = np.linalg.norm(projected - result.points_b, axis=1)
    frac3 = float(np.mean(err <= 3.0)) if len(err) else 0.0
    yield (
        "cascade homography accuracy",
        len(err) >= 50 and frac3 >= 0.9,
        f"matches {len(err)}, within 3px {frac3!r}",
    )

    two_view = synth_scene(seed + 2, n_points=600, render=True)
    pyr_a = extract_pyramid(two_view.image_a, f"builtin:{SceneSpec().levels}")
    pyr_b = extract_pyramid(two_view.image_b, f"builtin:{SceneSpec().levels}")
    result = cascade_match(pyr_a, pyr_b)
    residuals = _SAMPSON(two_view.f_gt, result.points_a, result.points_b)
    residual_ok = bool(
        np.all(residuals >= 0.0) and np.all(residuals <= 1.0)
    )
    gap = _fmat_gap(result.f_final, two_view.f_gt)
    yield (
        "cascade epipolar consistency",
        len(result.points_a) >= 300 and residual_ok and gap <= 1e-3,
        f"matches {len(result.points_a)}, residuals in [0, 1] {residual_ok}, "
        f"matrix gap {gap!r}",
    )


def run_selftest(seed: int = DEFAULT_SELFTEST_SEED, stream=None) -> int:
    """Run the synthetic oracle suite; print one line per property."""
    stream = stream or sys.stdout
    failures = 0
    total = 0
    for name, passed, detail in _selftest_properties(seed):
        total += 1
        status = "PASS" if passed else "FAIL"
        failures += 0 if passed else 1
        print(f"{status} {name}: {detail}", file=stream)
    print(f"{total} properties, {total - failures} passed", file=stream)
    return 0 if failures == 0 else 1


def cmd_selftest(args) -> int:
    return run_selftest(args.seed)


def _manifest_template(backend_spec: str) -> str:
    if backend_spec.startswith("builtin"):
        from .features import _parse_builtin_spec

        return builtin_manifest(_parse_builtin_spec(backend_spec)).to_json()
    manifest = BackendManifest(
        backend="onnx",
        model="backbone.onnx",
        mean=(0.485, 0.456, 0.406),
        std=(0.229, 0.224, 0.225),
        resize="multiple-of-16",
        layers=(
            ManifestLayer(tap="relu1_2", scale=1.0, channels=64),
            ManifestLayer(tap="relu2_2", scale=2.0, channels=128),
            ManifestLayer(tap="relu3_4", scale=4.0, channels=256),
            ManifestLayer(tap="relu4_4", scale=8.0, channels=512),
            ManifestLayer(tap="relu5_4", scale=16.0, channels=512),
        ),
    )
    return manifest.to_json()


def cmd_export_manifest_template(args) -> int:
    _emit(_manifest_template(args.backend) + "\n", args.out)
    return 0


# ---------------------------------------------------------------------------
# Entry point.


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epimatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_match = sub.add_parser("match", parents=[], help="match one image pair")
    p_match.add_argument("image_a")
    p_match.add_argument("image_b")
    _add_common_flags(p_match)
    p_match.set_defaults(func=cmd_match)

    p_hp = sub.add_parser(
        "eval-hpatches", help="MMA and homography accuracy over sequence dirs"
    )
    p_hp.add_argument("root")
    _add_common_flags(p_hp)
    p_hp.set_defaults(func=cmd_eval_hpatches)

    p_pose = sub.add_parser(
        "eval-pose", help="pose AUC and precision over a JSONL pairs file"
    )
    p_pose.add_argument("pairs_file")
    _add_common_flags(p_pose)
    p_pose.set_defaults(func=cmd_eval_pose)

    p_self = sub.add_parser("selftest", help="run the synthetic oracle suite")
    p_self.add_argument(
        "--seed", type=int, default=DEFAULT_SELFTEST_SEED,
        help="base scenario seed (default %(default)s)",
    )
    _add_common_flags(p_self)
    p_self.set_defaults(func=cmd_selftest)

    p_tmpl = sub.add_parser(
        "export-manifest-template", help="write a manifest JSON skeleton"
    )
    _add_common_flags(p_tmpl)
    p_tmpl.set_defaults(func=cmd_export_manifest_template, backend="onnx")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except InsufficientSeedMatches as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EpimatchError, DegenerateCameraSpec, DegenerateInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
