"""Deterministic synthetic forests and oracle predictors for pipeline checks.

The generator builds multi-scale scenes (large canopy trees plus small
understory trees over a ground plane). The oracles emit per-voxel embeddings
and per-block instance masks whose quality degrades under controlled
corruption, standing in for a trained network so every downstream stage can
be verified end to end.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .core import GROUND, LEAF, WOOD, PointCloud, SparseVoxelization, VoxelLabels
from .errors import CodebookExhausted, ConfigError, MissingLabels, PlacementFailed
from .isa_select import EMBEDDING_DIM, EmbeddingField
from .losses import DELTA_D
from .merging import InstanceMask
from .tiling import CylinderBlock

# Fraction of a split tree shared by both fragments. Keeping split pairs
# overlapping above typical NMS thresholds lets duplicate suppression see
# them; a disjoint split would be invisible to IoU-based NMS.
SPLIT_OVERLAP = 0.4


@dataclass(frozen=True)
class ForestParams:
    """Scene recipe; every field has a desk-scale default."""

    n_trees: int = 30
    plot_size: float = 20.0
    trunk_height_range: tuple[float, float] = (2.0, 6.0)
    crown_radius_range: tuple[float, float] = (0.8, 2.0)
    points_per_tree_range: tuple[int, int] = (300, 800)
    understory_fraction: float = 0.25
    ground_density: float = 20.0
    min_spacing: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.plot_size <= 0:
            raise ConfigError("plot_size must be positive")
        for name in ("trunk_height_range", "crown_radius_range", "points_per_tree_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ConfigError(f"{name} must be a positive (low, high) range")
        if not 0.0 <= self.understory_fraction <= 1.0:
            raise ConfigError("understory_fraction must be in [0, 1]")
        if self.ground_density < 0 or self.min_spacing < 0:
            raise ConfigError("ground_density and min_spacing must be >= 0")


@dataclass(frozen=True)
class CorruptionParams:
    """Error injection mirroring the usual failure modes of a predictor:
    over-segmentation (splits), under-segmentation (merges), missed trees
    (drops), membership noise, and score noise.

    ``point_noise`` is the upper bound of a per-mask noise fraction drawn
    uniformly from [0, point_noise], so a corrupted scene contains the whole
    quality spectrum from exact masks down to mostly-junk ones.
    """

    split_prob: float = 0.0
    merge_prob: float = 0.0
    drop_prob: float = 0.0
    point_noise: float = 0.0
    score_noise: float = 0.0

    def __post_init__(self) -> None:
        for name in ("split_prob", "merge_prob", "drop_prob", "point_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.score_noise < 0:
            raise ConfigError("score_noise must be >= 0")


def generate_forest(params: ForestParams) -> PointCloud:
    """Sample a labeled forest plot; fully deterministic given the seed.

    Trees are a vertical trunk segment (wood) topped by an ellipsoidal crown
    (leaf); tree centers are rejection-sampled to respect the minimum
    spacing. Ground points carry class ground and instance 0; tree points
    carry instance ids 1..n_trees in placement order.
    """
    rng = np.random.default_rng(params.seed)
    centers: list[np.ndarray] = []
    max_attempts = 1000 + 200 * params.n_trees
    attempts = 0
    while len(centers) < params.n_trees:
        attempts += 1
        if attempts > max_attempts:
            raise PlacementFailed(
                f"placed {len(centers)}/{params.n_trees} trees after {max_attempts} attempts; "
                f"min_spacing {params.min_spacing} m is infeasible on a {params.plot_size} m plot"
            )
        cand = rng.uniform(0.0, params.plot_size, size=2)
        if all(np.hypot(*(cand - c)) >= params.min_spacing for c in centers):
            centers.append(cand)

    n_under = int(round(params.understory_fraction * params.n_trees))
    under = np.zeros(params.n_trees, dtype=bool)
    if n_under:
        under[rng.choice(params.n_trees, size=n_under, replace=False)] = True

    positions = []
    semantic = []
    instance = []
    lo_pts, hi_pts = params.points_per_tree_range
    for t in range(params.n_trees):
        height = rng.uniform(*params.trunk_height_range)
        crown_r = rng.uniform(*params.crown_radius_range)
        n_pts = int(rng.integers(lo_pts, hi_pts + 1))
        if under[t]:
            height *= 0.35
            crown_r *= 0.45
            n_pts = max(40, int(n_pts * 0.3))
        n_trunk = max(8, int(0.3 * n_pts))
        n_crown = max(8, n_pts - n_trunk)

        trunk = np.empty((n_trunk, 3))
        trunk[:, :2] = centers[t] + rng.normal(0.0, 0.03, size=(n_trunk, 2))
        trunk[:, 2] = rng.uniform(0.0, height, size=n_trunk)

        crown_rz = 0.8 * crown_r
        direction = rng.normal(size=(n_crown, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radial = rng.uniform(0.0, 1.0, size=(n_crown, 1)) ** (1.0 / 3.0)
        crown = direction * radial * np.array([crown_r, crown_r, crown_rz])
        crown += np.array([centers[t][0], centers[t][1], height + 0.3 * crown_rz])

        positions.append(np.vstack([trunk, crown]))
        semantic.append(np.r_[np.full(n_trunk, WOOD), np.full(n_crown, LEAF)])
        instance.append(np.full(n_trunk + n_crown, t + 1))

    n_ground = int(round(params.ground_density * params.plot_size**2))
    if n_ground:
        ground = np.empty((n_ground, 3))
        ground[:, :2] = rng.uniform(0.0, params.plot_size, size=(n_ground, 2))
        ground[:, 2] = rng.uniform(0.0, 0.05, size=n_ground)
        positions.append(ground)
        semantic.append(np.full(n_ground, GROUND))
        instance.append(np.zeros(n_ground, dtype=np.int64))

    return PointCloud(
        positions=np.vstack(positions),
        semantic=np.concatenate(semantic),
        instance=np.concatenate(instance),
    )


def _lattice_codes(count: int, extent: int) -> npt.NDArray[np.float64]:
    """First ``count`` nonnegative integer 5-vectors ordered by (L1 norm, lex).

    Distinct vectors differ by L1 distance >= 1, so scaling by a separation
    yields codes at least that far apart.
    """
    if count > extent**EMBEDDING_DIM:
        raise CodebookExhausted(
            f"{count} codes requested but lattice extent {extent} offers only {extent**EMBEDDING_DIM}"
        )
    vecs: list[tuple[int, ...]] = []
    shell = 0
    while len(vecs) < count:
        width = min(extent, shell + 1)
        vecs.extend(
            sorted(v for v in itertools.product(range(width), repeat=EMBEDDING_DIM) if sum(v) == shell)
        )
        shell += 1
    return np.array(vecs[:count], dtype=np.float64)


def oracle_embeddings(
    vox: SparseVoxelization,
    gt: VoxelLabels,
    noise_sigma: float = 0.0,
    separation: float = 2 * DELTA_D,
    flip_prob: float = 0.0,
    seed: int = 0,
    lattice_extent: int = 10,
) -> EmbeddingField:
    """Per-voxel embeddings clustered by instance, plus binary tree probability.

    Every instance receives a fixed 5-D code with pairwise L1 distance at
    least ``separation``; background voxels sit at the origin code. Gaussian
    noise of the given sigma is added per voxel, and tree probabilities are
    exact indicators optionally flipped with a small probability.
    """
    if separation <= 0:
        raise ConfigError("separation must be positive")
    if gt.m != vox.m:
        raise ConfigError(f"labels cover {gt.m} voxels but the grid has {vox.m}")
    rng = np.random.default_rng(seed)
    present = np.unique(gt.instance[gt.instance >= 1])
    codes = _lattice_codes(len(present) + 1, lattice_extent) * separation
    table = np.zeros((int(gt.instance.max(initial=0)) + 1, EMBEDDING_DIM))
    table[0] = codes[0]
    for i, uid in enumerate(present):
        table[uid] = codes[i + 1]
    emb = table[gt.instance].copy()
    if noise_sigma > 0:
        emb += rng.normal(0.0, noise_sigma, size=emb.shape)
    tree_prob = (gt.instance >= 1).astype(np.float64)
    if flip_prob > 0:
        flip = rng.random(vox.m) < flip_prob
        tree_prob[flip] = 1.0 - tree_prob[flip]
    return EmbeddingField(embeddings=emb, tree_prob=tree_prob)


def _overlap_split(
    positions: npt.NDArray[np.float64],
    members: npt.NDArray[np.int64],
    rng: np.random.Generator,
) -> list[npt.NDArray[np.int64]]:
    # Random vertical plane through the xy centroid; each fragment takes its
    # side plus the shared band so the pair overlaps by SPLIT_OVERLAP.
    theta = rng.uniform(0.0, 2.0 * np.pi)
    normal = np.array([np.cos(theta), np.sin(theta)])
    xy = positions[members, :2]
    s = (xy - xy.mean(axis=0)) @ normal
    order = np.argsort(s, kind="stable")
    m = len(members)
    take = min(m, max(1, int(np.ceil(m * (1.0 + SPLIT_OVERLAP) / 2.0))))
    return [np.sort(members[order[:take]]), np.sort(members[order[m - take:]])]


def oracle_predictor(
    block: CylinderBlock,
    cloud: PointCloud,
    corruption: CorruptionParams = CorruptionParams(),
    seed=0,
) -> list[InstanceMask]:
    """Emit instance masks for one block, starting from ground truth.

    Corruption applies drops, then nearest-neighbor merges, then overlapping
    splits, then membership noise. Each mask's score is the IoU between the
    emitted mask and the full ground-truth mask of its source tree (best
    source for merged masks) plus clipped Gaussian noise, so scores
    correlate with quality the way the score supervision intends. In
    particular a tree clipped by the block boundary scores below 1 even
    without corruption.
    """
    if not cloud.has_labels:
        raise MissingLabels("oracle predictor requires ground-truth labels on the cloud")
    rng = np.random.default_rng(seed)
    pts = block.point_indices
    inst = cloud.instance[pts]
    present = np.unique(inst[inst >= 1])
    if len(present) == 0:
        return []

    local = {int(uid): pts[inst == uid] for uid in present}
    full = {int(uid): np.flatnonzero(cloud.instance == uid) for uid in present}

    survivors = [int(uid) for uid in present if rng.random() >= corruption.drop_prob]

    centroids = {uid: cloud.positions[local[uid], :2].mean(axis=0) for uid in survivors}
    consumed: set[int] = set()
    units: list[tuple[tuple[int, ...], np.ndarray]] = []
    for uid in survivors:
        if uid in consumed:
            continue
        if rng.random() < corruption.merge_prob:
            others = [v for v in survivors if v not in consumed and v != uid]
            if others:
                dists = [float(np.hypot(*(centroids[v] - centroids[uid]))) for v in others]
                partner = others[int(np.argmin(dists))]
                consumed.update((uid, partner))
                units.append(((uid, partner), np.sort(np.concatenate([local[uid], local[partner]]))))
                continue
        consumed.add(uid)
        units.append(((uid,), local[uid]))

    emitted: list[tuple[tuple[int, ...], np.ndarray]] = []
    for source, members in units:
        if rng.random() < corruption.split_prob:
            emitted.extend((source, frag) for frag in _overlap_split(cloud.positions, members, rng))
        else:
            emitted.append((source, members))

    result = []
    for query_index, (source, members) in enumerate(emitted):
        original = members
        if corruption.point_noise > 0 and len(members):
            n_swap = int(rng.uniform(0.0, corruption.point_noise) * len(members))
            if n_swap:
                drop_idx = rng.choice(len(members), size=n_swap, replace=False)
                kept = np.delete(members, drop_idx)
                pool = np.setdiff1d(pts, original, assume_unique=False)
                n_add = min(n_swap, len(pool))
                added = rng.choice(pool, size=n_add, replace=False) if n_add else np.empty(0, dtype=np.int64)
                members = np.union1d(kept, added)
        score = 0.0
        for uid in source:
            inter = len(np.intersect1d(members, full[uid], assume_unique=True))
            if inter:
                score = max(score, inter / (len(members) + len(full[uid]) - inter))
        if corruption.score_noise > 0:
            score = float(np.clip(score + rng.normal(0.0, corruption.score_noise), 0.0, 1.0))
        result.append(
            InstanceMask(point_ids=members, score=score, block_id=block.block_id, query_index=query_index)
        )
    return result
