"""
Rangewrench - LiDAR range-view toolkit
Command-line entry point: projection, augmentation, post-processing, evaluation and benchmarks.
"""
import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from config.logging_config import setup_logging
from config.pipeline import PipelineConfig
from config.settings import settings
from core.exceptions import ConsistencyError, NumericError, ParameterError, RangewrenchError
from core.workers import frame_generators, frame_seeds, run_frames
from models.domain import PointCloud
from models.params import ClassMap, MockPredictorConfig, SceneSpec, SensorSpec
from services.augment_service import augment_service
from services.metrics_service import metrics_service
from services.pcio_service import pcio_service
from services.postprocess_service import POST_PROCESSORS, postprocess_service
from services.projection_service import projection_service
from services.synth_service import synth_service

logger = logging.getLogger("rangewrench")

EXIT_OK = 0
EXIT_FAILURE = 1


@dataclass
class Context:
    """Resolved configuration shared by all commands."""

    config: PipelineConfig
    sensor: SensorSpec
    class_map: ClassMap
    jobs: int


# ============================================================================
# Helpers
# ============================================================================

def _int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _frame_paths(inputs: Sequence[str]) -> List[Path]:
    """Expand directories to their ``*.bin`` files, sorted by name."""
    paths: List[Path] = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            paths.extend(sorted(path.glob("*.bin")))
        else:
            paths.append(path)
    if not paths:
        raise ParameterError(f"no point files found in {list(inputs)}", module="pcio")
    return paths


def _read_frame(path: Path, class_map: ClassMap, need_labels: bool = False) -> PointCloud:
    """Read a point file with its sibling ``.label`` file when one exists."""
    label_path = path.with_suffix(".label")
    if label_path.exists():
        return pcio_service.read_labeled_cloud(path, label_path, class_map)
    if need_labels:
        raise ConsistencyError(f"{path.name} has no companion label file {label_path.name}",
                               module="pcio")
    return pcio_service.read_point_cloud(path)


def _load_context(args: argparse.Namespace) -> Context:
    overrides = {}
    for name in ("height", "width", "subclouds", "post", "alpha", "cutoff_mode", "kernel", "seed"):
        value = getattr(args, name, None)
        if value is None or isinstance(value, list):
            continue
        overrides[name] = value

    config = PipelineConfig.load(args.config).with_overrides(**overrides)
    config.check_files()
    return Context(
        config=config,
        sensor=pcio_service.load_sensor_spec(config.pipeline.sensor),
        class_map=pcio_service.load_class_map(config.pipeline.class_map),
        jobs=args.jobs or settings.jobs,
    )


def _emit(frame: pd.DataFrame, csv_path: Optional[str]) -> None:
    """Write a report to ``csv_path`` when given, otherwise print it as CSV."""
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False)
        logger.info(f"Wrote {len(frame)} rows to {csv_path}")
    else:
        sys.stdout.write(frame.to_csv(index=False))


# ============================================================================
# Commands
# ============================================================================

def cmd_synth(ctx: Context, args: argparse.Namespace) -> int:
    """Generate labeled scenes as KITTI point and label files."""
    out_dir = Path(args.out_dir)
    count = args.scenes or ctx.config.synth.scenes
    seeds = frame_seeds(ctx.config.pipeline.seed, count)
    section = ctx.config.synth.model_dump(exclude={"scenes"})

    def generate(i: int) -> dict:
        spec = SceneSpec(seed=seeds[i], sensor=ctx.sensor, **section)
        cloud = synth_service.generate_scene(spec)
        stem = f"{i:06d}"
        pcio_service.write_point_cloud(cloud, out_dir / f"{stem}.bin")
        pcio_service.write_labels(cloud.labels, ctx.class_map, out_dir / f"{stem}.label")
        return {"frame": stem, "points": cloud.count}

    _emit(pd.DataFrame(run_frames(generate, list(range(count)), ctx.jobs)), args.csv)
    return EXIT_OK


def cmd_project(ctx: Context, args: argparse.Namespace) -> int:
    """Project frames into N sub-cloud range images and report validity."""
    out_dir = Path(args.out_dir)
    rview = ctx.config.rview

    def project(path: Path) -> dict:
        cloud = _read_frame(path, ctx.class_map)
        images, index = projection_service.project_multi(
            cloud, ctx.sensor, rview.height, rview.width, rview.subclouds
        )
        for i, image in enumerate(images):
            pcio_service.write_range_image(image, out_dir / f"{path.stem}_{i}.rimg")
        if args.coords:
            coords = projection_service.unproject_coords(index)
            coords.to_csv(out_dir / f"{path.stem}_coords.csv")
        report = projection_service.validity_stats(index, images)
        return {
            "frame": path.stem,
            "points": report.total_points,
            "projected": report.projected_points,
            "validity": report.validity,
            "occupancy_2d": report.occupancy_2d,
        }

    _emit(pd.DataFrame(run_frames(project, _frame_paths(args.inputs), ctx.jobs)), args.csv)
    return EXIT_OK


def cmd_split(ctx: Context, args: argparse.Namespace) -> int:
    """Write the modulo sub-clouds of each frame as separate point (and label) files."""
    out_dir = Path(args.out_dir)
    n = ctx.config.rview.subclouds

    def split(path: Path) -> dict:
        cloud = _read_frame(path, ctx.class_map)
        subclouds, _ = projection_service.split_cloud(cloud, n)
        for i, sub in enumerate(subclouds):
            pcio_service.write_point_cloud(sub, out_dir / f"{path.stem}_{i}.bin")
            if sub.is_labeled:
                pcio_service.write_labels(sub.labels, ctx.class_map, out_dir / f"{path.stem}_{i}.label")
        return {"frame": path.stem, "points": cloud.count, "subclouds": n}

    _emit(pd.DataFrame(run_frames(split, _frame_paths(args.inputs), ctx.jobs)), args.csv)
    return EXIT_OK


def cmd_augment(ctx: Context, args: argparse.Namespace) -> int:
    """Run the training augmentation order and write the fused range images."""
    out_dir = Path(args.out_dir)
    config = ctx.config
    paths = _frame_paths(args.inputs)
    clouds = [_read_frame(path, ctx.class_map, need_labels=True) for path in paths]

    wpd = None
    if config.augment.wpd.enabled:
        section = config.augment.wpd
        if section.pool_dir:
            pool = augment_service.build_paste_pool(section.pool_dir, ctx.class_map)
        else:
            # Paste from the frames being augmented
            pool = clouds
        wpd = augment_service.build_wpd_config(
            ctx.class_map, pool, threshold=section.threshold,
            sample_frames=section.sample_frames, per_point=section.per_point,
        )

    generators = frame_generators(config.pipeline.seed, len(paths))

    def augment(i: int) -> dict:
        images = augment_service.augment_frame(
            clouds[i], ctx.sensor, config.rview.height, config.rview.width, config.rview.subclouds,
            generators[i], ctx.class_map.ignore_id, gda=config.augment.gda, wpd=wpd,
            select_one=config.augment.select_one,
        )
        for j, image in enumerate(images):
            pcio_service.write_range_image(image, out_dir / f"{paths[i].stem}_{j}.rimg")
        return {
            "frame": paths[i].stem,
            "images": len(images),
            "occupancy_2d": float(np.mean([image.occupancy_ratio for image in images])),
        }

    _emit(pd.DataFrame(run_frames(augment, list(range(len(paths))), ctx.jobs)), args.csv)
    return EXIT_OK


def cmd_mock_predict(ctx: Context, args: argparse.Namespace) -> int:
    """Turn ground-truth label planes into noisy score volumes."""
    out_dir = Path(args.out_dir)
    config = ctx.config
    paths = _frame_paths(args.inputs)
    seeds = frame_seeds(config.pipeline.seed, len(paths))
    noise_rate = args.noise if args.noise is not None else config.mock.noise_rate

    def predict(i: int) -> dict:
        cloud = _read_frame(paths[i], ctx.class_map, need_labels=True)
        images, _ = projection_service.project_multi(
            cloud, ctx.sensor, config.rview.height, config.rview.width, config.rview.subclouds
        )
        mock = MockPredictorConfig(noise_rate=noise_rate, temperature=config.mock.temperature,
                                   seed=seeds[i])
        planes = np.stack([image.label_plane for image in images])
        volume = synth_service.mock_predict_volume(planes, ctx.class_map.num_classes, mock)
        pcio_service.write_score_volume(volume, out_dir / f"{paths[i].stem}.svol")
        return {"frame": paths[i].stem, "images": volume.n_images, "classes": volume.num_classes}

    _emit(pd.DataFrame(run_frames(predict, list(range(len(paths))), ctx.jobs)), args.csv)
    return EXIT_OK


def cmd_postprocess(ctx: Context, args: argparse.Namespace) -> int:
    """Label every 3D point from a score volume and write KITTI label files."""
    out_dir = Path(args.out_dir)
    scores_dir = Path(args.scores_dir or args.out_dir)
    config = ctx.config
    ignore_id = ctx.class_map.ignore_id

    def postprocess(path: Path) -> dict:
        cloud = _read_frame(path, ctx.class_map)
        volume = pcio_service.read_score_volume(scores_dir / f"{path.stem}.svol")
        if volume.num_classes != ctx.class_map.num_classes:
            raise ConsistencyError(
                f"{path.stem}.svol scores {volume.num_classes} classes, the class map has "
                f"{ctx.class_map.num_classes}", module="postproc",
            )
        shape = (volume.n_images, volume.height, volume.width)
        expected = (config.rview.subclouds, config.rview.height, config.rview.width)
        if shape != expected:
            logger.warning(f"{path.stem}.svol is {shape} (N, H, W), configuration says "
                           f"{expected}; following the score volume")

        images, index = projection_service.project_multi(cloud, ctx.sensor, volume.height,
                                                         volume.width, volume.n_images)
        ranges = np.stack([image.ranges for image in images])
        labels = postprocess_service.run(
            config.pipeline.post, volume, ranges, index, ignore_id,
            nnri_params=config.postproc.nnri, knn_params=config.postproc.knn,
        )
        full = pcio_service.scatter_to_source(labels, cloud, ignore_id)
        pcio_service.write_labels(full, ctx.class_map, out_dir / f"{path.stem}.label")
        return {"frame": path.stem, "points": len(full), "post": config.pipeline.post}

    _emit(pd.DataFrame(run_frames(postprocess, _frame_paths(args.inputs), ctx.jobs)), args.csv)
    return EXIT_OK


def cmd_eval(ctx: Context, args: argparse.Namespace) -> int:
    """IoU/accuracy of predicted label files against ground truth."""
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir() != gt.is_dir():
        raise ParameterError("--pred and --gt must both be files or both be directories",
                             module="metrics")
    if pred.is_dir():
        pairs = [(p, gt / p.name) for p in sorted(pred.glob("*.label"))]
    else:
        pairs = [(pred, gt)]
    if not pairs:
        raise ParameterError(f"no label files in {pred}", module="metrics")

    class_map = ctx.class_map

    def evaluate(pair):
        pred_path, gt_path = pair
        predicted = pcio_service.read_labels(pred_path, class_map)
        truth = pcio_service.read_labels(gt_path, class_map)
        if len(predicted) != len(truth):
            raise ConsistencyError(f"{pred_path.name}: {len(predicted)} predictions for "
                                   f"{len(truth)} ground-truth labels", module="metrics")
        return metrics_service.confusion(predicted, truth, class_map.num_classes, class_map.ignore_id)

    matrices = run_frames(evaluate, pairs, ctx.jobs)
    total = matrices[0]
    for matrix in matrices[1:]:
        total = total + matrix

    scores = metrics_service.scores(total)
    sys.stdout.write(metrics_service.format_table(scores, class_map.class_names) + "\n")
    if args.csv:
        _emit(metrics_service.scores_frame(scores, class_map.class_names), args.csv)
    logger.info(f"Evaluated {len(pairs)} frames: mIoU {scores.miou:.4f}, mAcc {scores.macc:.4f}")
    return EXIT_OK


def cmd_stats(ctx: Context, args: argparse.Namespace) -> int:
    """3D validity and 2D occupancy over a grid of resolutions and sub-cloud counts."""
    heights = args.height or [ctx.config.rview.height]
    widths = args.width or [ctx.config.rview.width]
    subclouds = args.subclouds or [1]

    def grid(path: Path) -> pd.DataFrame:
        cloud = _read_frame(path, ctx.class_map)
        frame = projection_service.validity_grid(cloud, ctx.sensor, heights, widths, subclouds)
        frame.insert(0, "frame", path.stem)
        return frame

    table = pd.concat(run_frames(grid, _frame_paths(args.inputs), ctx.jobs), ignore_index=True)
    _emit(table, args.csv)

    if {32, 64} <= set(heights) and {1024, 2048} <= set(widths):
        summary = table.groupby(["subclouds", "height", "width"], as_index=False)["validity"].mean()
        try:
            ratio = projection_service.resolution_gain_ratio(summary, subclouds=subclouds[0])
            logger.info(f"Validity gain of doubling H over doubling W: {ratio:.3f}")
        except (NumericError, ParameterError) as e:
            logger.warning(f"Validity gain ratio undefined: {e}")
    if args.plot:
        _plot_validity(table, args.plot)
    return EXIT_OK


def _plot_validity(table: pd.DataFrame, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = table.groupby(["subclouds", "height", "width"], as_index=False)["validity"].mean()
    fig, ax = plt.subplots(figsize=(6, 4))
    for (n, height), rows in summary.groupby(["subclouds", "height"]):
        ax.plot(rows["width"], rows["validity"], marker="o", label=f"H={height}, N={n}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("width W (pixels)")
    ax.set_ylabel("3D validity")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved validity plot to {path}")


def cmd_bench(ctx: Context, args: argparse.Namespace) -> int:
    """Time loading, projection and post-processing of one frame."""
    config = ctx.config
    path = _frame_paths(args.inputs)[0]
    cloud = _read_frame(path, ctx.class_map)
    rview = config.rview

    images, index = projection_service.project_multi(cloud, ctx.sensor, rview.height, rview.width,
                                                     rview.subclouds)
    if cloud.is_labeled:
        planes = np.stack([image.label_plane for image in images])
    else:
        planes = np.stack([np.where(image.occupancy, 0, -1) for image in images])
    volume = synth_service.mock_predict_volume(
        planes, ctx.class_map.num_classes,
        MockPredictorConfig(noise_rate=config.mock.noise_rate, seed=config.pipeline.seed),
    )
    ranges = np.stack([image.ranges for image in images])

    stages = {
        "load": lambda: _read_frame(path, ctx.class_map),
        "project": lambda: projection_service.project_multi(
            cloud, ctx.sensor, rview.height, rview.width, rview.subclouds),
        config.pipeline.post: lambda: postprocess_service.run(
            config.pipeline.post, volume, ranges, index, ctx.class_map.ignore_id,
            nnri_params=config.postproc.nnri, knn_params=config.postproc.knn),
    }
    report = metrics_service.bench(
        stages, warmup=args.warmup, iters=args.iters,
        config={"N": rview.subclouds, "H": rview.height, "W": rview.width,
                "k": config.postproc.nnri.k, "post": config.pipeline.post},
    )
    _emit(metrics_service.timings_frame(report), args.csv)
    return EXIT_OK


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline TOML file (falls back to FLARES_CONFIG)")
    common.add_argument("--seed", type=int, help="base seed for every random draw")
    common.add_argument("--jobs", type=int, help="worker threads (default: machine parallelism)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--csv", help="write the report to this CSV file instead of stdout")

    raster = argparse.ArgumentParser(add_help=False)
    raster.add_argument("--height", type=int, help="range image rows H")
    raster.add_argument("--width", type=int, help="range image columns W")
    raster.add_argument("--subclouds", type=int, help="sub-cloud count N")

    post = argparse.ArgumentParser(add_help=False)
    post.add_argument("--post", choices=POST_PROCESSORS, help="post-processor")
    post.add_argument("--alpha", type=float, help="NNRI cut-off factor")
    post.add_argument("--cutoff-mode", choices=["adaptive", "constant"], help="NNRI cut-off mode")
    post.add_argument("--kernel", type=int,
                      help="Window size k (odd) of the selected post-processor")

    parser = argparse.ArgumentParser(
        prog="rangewrench",
        description="LiDAR range-view toolkit: projection, augmentation, post-processing, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate labeled synthetic scenes")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scenes", type=int, help="number of scenes (default from [synth])")

    p = sub.add_parser("project", parents=[common, raster], help="project frames to range images")
    p.add_argument("inputs", nargs="+", help="point files or directories")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--coords", action="store_true", help="also write per-point pixel coordinates")

    p = sub.add_parser("split", parents=[common, raster], help="write modulo sub-clouds")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("augment", parents=[common, raster], help="training augmentation pipeline")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("mock-predict", parents=[common, raster],
                       help="score volumes from ground-truth labels")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--noise", type=float, help="label corruption rate (default from [mock])")

    p = sub.add_parser("postprocess", parents=[common, raster, post],
                       help="label 3D points from score volumes")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scores-dir", help="directory holding <frame>.svol (default: --out-dir)")

    p = sub.add_parser("eval", parents=[common], help="IoU and accuracy of label files")
    p.add_argument("--pred", required=True, help="predicted label file or directory")
    p.add_argument("--gt", required=True, help="ground-truth label file or directory")

    p = sub.add_parser("stats", parents=[common], help="validity over resolutions and N")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--height", type=_int_list, help="comma-separated H values")
    p.add_argument("--width", type=_int_list, help="comma-separated W values")
    p.add_argument("--subclouds", type=_int_list, help="comma-separated N values")
    p.add_argument("--plot", help="save a validity plot (PNG)")

    p = sub.add_parser("bench", parents=[common, raster, post], help="latency benchmark")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--iters", type=int, default=100)

    return parser


COMMANDS: dict = {
    "synth": cmd_synth,
    "project": cmd_project,
    "split": cmd_split,
    "augment": cmd_augment,
    "mock-predict": cmd_mock_predict,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    command: Callable[[Context, argparse.Namespace], int] = COMMANDS[args.command]

    try:
        ctx = _load_context(args)
        logger.info(f"Running '{args.command}' with {ctx.jobs} worker(s)")
        return command(ctx, args)
    except RangewrenchError as e:
        logger.error(f"{args.command} failed in module '{e.module}': {e.detail}")
        print(f"error: {e}", file=sys.stderr)
    except ValidationError as e:
        logger.error(f"{args.command} failed validation: {e}")
        print(f"error: [cli] invalid parameters: {e}", file=sys.stderr)
    except OSError as e:
        logger.error(f"{args.command} failed on file access: {e}")
        print(f"error: [pcio] {e}", file=sys.stderr)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
