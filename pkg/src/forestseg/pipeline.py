"""End-to-end orchestration: tile, predict per block, merge, vote, evaluate.

Blocks may be predicted in parallel; the merge is a deterministic fold over
masks sorted by (block id, query index), and each block's random stream is
seeded from (master seed, block id), so results are byte-identical for any
worker count or completion order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from .core import PointCloud
from .errors import ConfigError, ShapeMismatch
from .merging import (
    BlockGeometry,
    InstanceMask,
    MergeConfig,
    discard_boundary_masks,
    resolve_points,
    score_filter,
    score_nms,
    semantic_vote_arrays,
)
from .metrics import EvalReport, evaluate_labels
from .synthgen import CorruptionParams, oracle_predictor
from .tiling import sliding_window_centers, tile_cloud

THREADS_ENV_VAR = "FORESTSEG_THREADS"


@dataclass(frozen=True)
class PipelineConfig:
    """Run parameters; defaults follow the reference operating point."""

    radius: float = 16.0
    stride: float = 4.0
    resolution: float = 0.2
    k_queries: int = 300
    binary_threshold: float = 0.5
    nms_iou: float = 0.3
    score_threshold: float = 0.4
    boundary_margin: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("radius", "stride", "resolution"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k_queries < 1:
            raise ConfigError("k_queries must be >= 1")
        for name in ("binary_threshold", "nms_iou", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.boundary_margin < self.radius:
            raise ConfigError("boundary_margin must be in [0, radius)")

    def merge_config(self) -> MergeConfig:
        return MergeConfig(
            nms_iou_threshold=self.nms_iou,
            score_threshold=self.score_threshold,
            boundary_margin=self.boundary_margin,
            block_radius=self.radius,
        )

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "stride": self.stride,
            "resolution": self.resolution,
            "k_queries": self.k_queries,
            "binary_threshold": self.binary_threshold,
            "nms_iou": self.nms_iou,
            "score_threshold": self.score_threshold,
            "boundary_margin": self.boundary_margin,
            "seed": self.seed,
        }


@dataclass(eq=False)
class BlockPrediction:
    """Everything one block contributes to the merge."""

    block_id: int
    geometry: BlockGeometry
    masks: list[InstanceMask]
    semantic: tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]] | None = None


@dataclass(eq=False)
class MergeOutcome:
    """Stage-by-stage mask lists plus the final per-point labeling."""

    masks_predicted: list[InstanceMask]
    masks_after_boundary: list[InstanceMask]
    masks_after_filter: list[InstanceMask]
    masks_kept: list[InstanceMask]
    instance: npt.NDArray[np.int64]
    semantic: npt.NDArray[np.int64] | None

    def stage_counts(self) -> dict:
        return {
            "predicted": len(self.masks_predicted),
            "after_boundary_discard": len(self.masks_after_boundary),
            "after_score_filter": len(self.masks_after_filter),
            "after_nms": len(self.masks_kept),
        }


@dataclass(eq=False)
class PipelineResult:
    config: PipelineConfig
    n_blocks: int
    n_blocks_empty: int
    merge: MergeOutcome
    evaluation: EvalReport | None = None
    report: dict = field(default_factory=dict)


def effective_threads(requested: int) -> int:
    """Requested worker count, capped by the FORESTSEG_THREADS env var."""
    if requested < 1:
        raise ConfigError("thread count must be >= 1")
    cap = os.environ.get(THREADS_ENV_VAR)
    if cap is not None:
        try:
            cap_value = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {cap!r}") from None
        if cap_value >= 1:
            return min(requested, cap_value)
    return requested


def merge_block_predictions(
    predictions: list[BlockPrediction],
    positions: npt.NDArray[np.float64],
    config: PipelineConfig,
) -> MergeOutcome:
    """Fuse per-block predictions into one scene labeling.

    Stage order: boundary discard, score filter, NMS, point resolution,
    semantic vote. Input order is irrelevant; masks are canonically sorted
    first.
    """
    n_points = len(positions)
    merge_cfg = config.merge_config()
    geometries = {p.block_id: p.geometry for p in predictions}
    masks = sorted(
        (m for p in predictions for m in p.masks),
        key=lambda m: (m.block_id, m.query_index),
    )
    for mask in masks:
        if mask.size and (mask.point_ids[0] < 0 or mask.point_ids[-1] >= n_points):
            raise ShapeMismatch(
                f"mask from block {mask.block_id} references points outside 0..{n_points - 1}"
            )
    after_boundary = discard_boundary_masks(masks, geometries, positions, merge_cfg.boundary_margin)
    after_filter = score_filter(after_boundary, merge_cfg.score_threshold)
    kept = score_nms(after_filter, merge_cfg.nms_iou_threshold)
    instance = resolve_points(kept, n_points)

    semantic = None
    voted = [p for p in sorted(predictions, key=lambda p: p.block_id) if p.semantic is not None]
    if voted:
        semantic = semantic_vote_arrays(
            [p.semantic[0] for p in voted],
            [p.semantic[1] for p in voted],
            n_points,
        )
    return MergeOutcome(
        masks_predicted=masks,
        masks_after_boundary=after_boundary,
        masks_after_filter=after_filter,
        masks_kept=kept,
        instance=instance,
        semantic=semantic,
    )


def make_oracle_predictor(cloud: PointCloud, corruption: CorruptionParams, master_seed: int):
    """Per-block predictor backed by the ground-truth oracle."""

    def predict(block) -> BlockPrediction:
        masks = oracle_predictor(block, cloud, corruption, seed=[master_seed, block.block_id])
        semantic = None
        if cloud.semantic is not None:
            semantic = (block.point_indices, cloud.semantic[block.point_indices])
        return BlockPrediction(
            block_id=block.block_id,
            geometry=BlockGeometry(center_xy=(float(block.center_xy[0]), float(block.center_xy[1])),
                                   radius=block.radius),
            masks=masks,
            semantic=semantic,
        )

    return predict


def run_pipeline(
    cloud: PointCloud,
    config: PipelineConfig = PipelineConfig(),
    corruption: CorruptionParams = CorruptionParams(),
    predictor=None,
    threads: int = 1,
    evaluate: bool = True,
) -> PipelineResult:
    """Tile the cloud, predict every block, merge, and evaluate against GT.

    ``predictor`` maps a CylinderBlock to a BlockPrediction; the default is
    the ground-truth oracle with the given corruption. Evaluation runs when
    the cloud carries instance labels.
    """
    blocks = tile_cloud(cloud, config.radius, config.stride)
    n_centers_x_y = _grid_size(cloud, config.stride)
    if predictor is None:
        predictor = make_oracle_predictor(cloud, corruption, config.seed)

    workers = effective_threads(threads)
    if workers == 1:
        predictions = [predictor(block) for block in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(predictor, blocks))
    predictions.sort(key=lambda p: p.block_id)

    merge = merge_block_predictions(predictions, cloud.positions, config)

    evaluation = None
    if evaluate and cloud.instance is not None:
        evaluation = evaluate_labels(
            merge.instance,
            cloud.instance,
            merge.semantic,
            cloud.semantic if merge.semantic is not None else None,
        )

    result = PipelineResult(
        config=config,
        n_blocks=len(blocks),
        n_blocks_empty=n_centers_x_y - len(blocks),
        merge=merge,
        evaluation=evaluation,
    )
    result.report = build_report(result)
    return result


def _grid_size(cloud: PointCloud, stride: float) -> int:
    xy = cloud.positions[:, :2]
    return len(sliding_window_centers(xy.min(axis=0), xy.max(axis=0), stride))


def build_report(result: PipelineResult) -> dict:
    report = {
        "config": result.config.to_dict(),
        "blocks": {"grid": result.n_blocks + result.n_blocks_empty,
                   "processed": result.n_blocks,
                   "empty_skipped": result.n_blocks_empty},
        "masks": result.merge.stage_counts(),
    }
    if result.evaluation is not None:
        report["evaluation"] = result.evaluation.to_dict()
    return report


def run_pipeline_from_blocks(
    predictions: list[BlockPrediction],
    cloud: PointCloud,
    config: PipelineConfig,
    evaluate: bool = True,
) -> PipelineResult:
    """Merge externally supplied per-block predictions (file-fed predictor)."""
    predictions = sorted(predictions, key=lambda p: p.block_id)
    merge = merge_block_predictions(predictions, cloud.positions, config)
    evaluation = None
    if evaluate and cloud.instance is not None:
        evaluation = evaluate_labels(
            merge.instance,
            cloud.instance,
            merge.semantic,
            cloud.semantic if merge.semantic is not None else None,
        )
    result = PipelineResult(
        config=config,
        n_blocks=len(predictions),
        n_blocks_empty=0,
        merge=merge,
        evaluation=evaluation,
    )
    result.report = build_report(result)
    return result


__all__ = [
    "BlockPrediction",
    "MergeOutcome",
    "PipelineConfig",
    "PipelineResult",
    "build_report",
    "effective_threads",
    "make_oracle_predictor",
    "merge_block_predictions",
    "run_pipeline",
    "run_pipeline_from_blocks",
]
