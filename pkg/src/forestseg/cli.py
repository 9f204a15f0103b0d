"""Command-line entry points: synth, pipeline, select-queries, merge,
evaluate, gradcheck.

Exit codes: 0 success, 2 input error, 3 config error, 4 internal invariant
violation. Every command is deterministic given its --seed.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import io
from .core import voxelize, voxel_labels_from_points
from .errors import ForestSegError, ParseError
from .isa_select import select_queries_fps_euclidean, select_queries_isa, selection_stats
from .losses import run_gradient_checks
from .pipeline import (
    BlockPrediction,
    PipelineConfig,
    run_pipeline,
    run_pipeline_from_blocks,
)
from .synthgen import CorruptionParams, ForestParams, generate_forest, oracle_embeddings

_FOREST_PARAM_KEYS = {
    "n_trees": int,
    "plot_size": float,
    "trunk_height_min": float,
    "trunk_height_max": float,
    "crown_radius_min": float,
    "crown_radius_max": float,
    "points_per_tree_min": int,
    "points_per_tree_max": int,
    "understory_fraction": float,
    "ground_density": float,
    "min_spacing": float,
    "seed": int,
}


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ForestSegError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def _emit_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        click.echo(text)


@click.group()
def main() -> None:
    """Forest point-cloud segmentation pipeline tools."""


def _parse_forest_params(path: str, seed_override: int | None) -> ForestParams:
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}: line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _FOREST_PARAM_KEYS:
            raise ParseError(f"{path}: line {lineno}: unknown parameter {key!r}")
        try:
            values[key] = _FOREST_PARAM_KEYS[key](value)
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: bad value {value!r} for {key}") from None
    kwargs: dict = {}
    for name in ("n_trees", "plot_size", "understory_fraction", "ground_density", "min_spacing", "seed"):
        if name in values:
            kwargs[name] = values[name]
    for field_name, lo_key, hi_key in (
        ("trunk_height_range", "trunk_height_min", "trunk_height_max"),
        ("crown_radius_range", "crown_radius_min", "crown_radius_max"),
        ("points_per_tree_range", "points_per_tree_min", "points_per_tree_max"),
    ):
        lo = values.get(lo_key)
        hi = values.get(hi_key)
        if lo is not None or hi is not None:
            base = dict(zip(("lo", "hi"), getattr(ForestParams(), field_name)))
            kwargs[field_name] = (lo if lo is not None else base["lo"], hi if hi is not None else base["hi"])
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return ForestParams(**kwargs)


@main.command()
@click.option("--params", "params_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Flat key=value parameter file.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output cloud (.ply or .tsv).")
@click.option("--seed", type=int, default=None, help="Override the seed from the params file.")
@_handle_errors
def synth(params_path: str, out: str, seed: int | None) -> None:
    """Generate a deterministic synthetic forest plot with GT labels."""
    params = _parse_forest_params(params_path, seed)
    cloud = generate_forest(params)
    io.write_cloud(out, cloud)
    click.echo(f"wrote {cloud.n} points ({params.n_trees} trees) to {out}")


def _config_options(fn):
    options = [
        click.option("--radius", type=float, default=16.0, show_default=True),
        click.option("--stride", type=float, default=4.0, show_default=True),
        click.option("--resolution", type=float, default=0.2, show_default=True),
        click.option("--k-queries", type=int, default=300, show_default=True),
        click.option("--binary-threshold", type=float, default=0.5, show_default=True),
        click.option("--nms-iou", type=float, default=0.3, show_default=True),
        click.option("--score-threshold", type=float, default=0.4, show_default=True),
        click.option("--boundary-margin", type=float, default=0.5, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config(radius, stride, resolution, k_queries, binary_threshold,
                  nms_iou, score_threshold, boundary_margin, seed) -> PipelineConfig:
    return PipelineConfig(
        radius=radius,
        stride=stride,
        resolution=resolution,
        k_queries=k_queries,
        binary_threshold=binary_threshold,
        nms_iou=nms_iou,
        score_threshold=score_threshold,
        boundary_margin=boundary_margin,
        seed=seed,
    )


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--predictor", default="oracle", show_default=True,
              help="'oracle' or a directory of per-block mask JSON files.")
@click.option("--out-labels", type=click.Path(dir_okay=False), default=None)
@click.option("--out-report", type=click.Path(dir_okay=False), default=None)
@click.option("--dump-blocks", type=click.Path(file_okay=False), default=None,
              help="Also write each block's predictions as JSON into this directory.")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--split-prob", type=float, default=0.0, show_default=True)
@click.option("--merge-prob", type=float, default=0.0, show_default=True)
@click.option("--drop-prob", type=float, default=0.0, show_default=True)
@click.option("--point-noise", type=float, default=0.0, show_default=True)
@click.option("--score-noise", type=float, default=0.0, show_default=True)
@_config_options
@_handle_errors
def pipeline(input_path, predictor, out_labels, out_report, dump_blocks, threads,
             split_prob, merge_prob, drop_prob, point_noise, score_noise, **config_kwargs) -> None:
    """Run the full segmentation pipeline over a point cloud."""
    config = _build_config(**config_kwargs)
    cloud = io.read_cloud(input_path)
    if predictor == "oracle":
        corruption = CorruptionParams(
            split_prob=split_prob,
            merge_prob=merge_prob,
            drop_prob=drop_prob,
            point_noise=point_noise,
            score_noise=score_noise,
        )
        result = run_pipeline(cloud, config, corruption=corruption, threads=threads)
        if dump_blocks:
            from .pipeline import make_oracle_predictor
            from .tiling import tile_cloud

            out_dir = Path(dump_blocks)
            out_dir.mkdir(parents=True, exist_ok=True)
            predict = make_oracle_predictor(cloud, corruption, config.seed)
            for block in tile_cloud(cloud, config.radius, config.stride):
                bp = predict(block)
                io.write_block_file(out_dir / f"block_{bp.block_id:05d}.json", bp.block_id,
                                    bp.geometry.center_xy, bp.geometry.radius, bp.masks, bp.semantic)
    else:
        block_dir = Path(predictor)
        if not block_dir.is_dir():
            raise ParseError(f"predictor must be 'oracle' or a directory, got {predictor!r}")
        predictions = _load_block_dir(block_dir)
        result = run_pipeline_from_blocks(predictions, cloud, config)

    if out_labels:
        io.write_labels_tsv(out_labels, result.merge.instance, result.merge.semantic)
    if out_report:
        io.write_json(out_report, result.report)
    else:
        click.echo(json.dumps(result.report, sort_keys=True, indent=2))


def _load_block_dir(block_dir: Path) -> list[BlockPrediction]:
    files = sorted(block_dir.glob("*.json"))
    if not files:
        raise ParseError(f"{block_dir}: no block JSON files found")
    predictions = []
    for path in files:
        block_id, geom, masks, semantic = io.read_block_file(path)
        predictions.append(BlockPrediction(block_id=block_id, geometry=geom, masks=masks, semantic=semantic))
    return predictions


@main.command("select-queries")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Labeled cloud used to build the oracle embedding field.")
@click.option("--method", type=click.Choice(["isa", "fps"]), default="isa", show_default=True)
@click.option("--k", type=int, default=300, show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--resolution", type=float, default=0.2, show_default=True)
@click.option("--noise-sigma", type=float, default=0.05, show_default=True)
@click.option("--separation", type=float, default=3.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_handle_errors
def select_queries(input_path, method, k, threshold, resolution, noise_sigma, separation, seed, out) -> None:
    """Select query voxels and report coverage statistics as JSON."""
    cloud = io.read_cloud(input_path)
    from .errors import MissingLabels

    if not cloud.has_labels:
        raise MissingLabels(f"{input_path}: query selection statistics need GT labels")
    vox = voxelize(cloud, resolution)
    gt = voxel_labels_from_points(vox, cloud)
    field = oracle_embeddings(vox, gt, noise_sigma=noise_sigma, separation=separation, seed=seed)
    if method == "isa":
        selection = select_queries_isa(field, k, threshold=threshold)
    else:
        selection = select_queries_fps_euclidean(vox, k)
    stats = selection_stats(selection, gt)
    _emit_json(
        {
            "method": selection.method,
            "k_requested": selection.k_requested,
            "k_selected": selection.k,
            "voxel_indices": [int(v) for v in selection.voxel_indices],
            "coverage_rate": stats.coverage_rate,
            "tree_voxel_ratio": stats.tree_voxel_ratio,
        },
        out,
    )


@main.command()
@click.option("--blocks", "blocks_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--cloud", "cloud_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-labels", type=click.Path(dir_okay=False), default=None)
@click.option("--out-report", type=click.Path(dir_okay=False), default=None)
@_config_options
@_handle_errors
def merge(blocks_dir, cloud_path, out_labels, out_report, **config_kwargs) -> None:
    """Merge per-block mask files into a scene labeling (TSV)."""
    config = _build_config(**config_kwargs)
    cloud = io.read_cloud(cloud_path)
    predictions = _load_block_dir(Path(blocks_dir))
    result = run_pipeline_from_blocks(predictions, cloud, config)
    if out_labels:
        io.write_labels_tsv(out_labels, result.merge.instance, result.merge.semantic)
    if out_report:
        io.write_json(out_report, result.report)
    else:
        click.echo(json.dumps(result.report, sort_keys=True, indent=2))


@main.command()
@click.option("--pred", "pred_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--iou", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_handle_errors
def evaluate(pred_path, gt_path, iou, out) -> None:
    """Evaluate predicted labels against ground truth; JSON report."""
    from .errors import ShapeMismatch
    from .metrics import evaluate_labels

    pred_inst, pred_sem = io.read_labels_tsv(pred_path)
    gt_inst, gt_sem = io.read_labels_tsv(gt_path)
    if len(pred_inst) != len(gt_inst):
        raise ShapeMismatch(f"pred has {len(pred_inst)} points but gt has {len(gt_inst)}")
    report = evaluate_labels(
        pred_inst,
        gt_inst,
        pred_sem if pred_sem is not None and gt_sem is not None else None,
        gt_sem if pred_sem is not None and gt_sem is not None else None,
        iou_threshold=iou,
    )
    _emit_json({"iou_threshold": iou, **report.to_dict()}, out)


@main.command()
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_handle_errors
def gradcheck(trials, seed, out) -> None:
    """Verify every analytic loss gradient against finite differences."""
    report = run_gradient_checks(trials=trials, seed=seed)
    _emit_json(report, out)
    if not report["all_pass"]:
        sys.exit(4)


if __name__ == "__main__":
    main()
