"""Multilevel part substitution: synthesize new labeled shapes by
replacing part subtrees with same-label subtrees from other shapes.

Donor parts are aligned by bounding-box affine transform (common-part
bbox when the subtrees share leaf semantics), rescaled to stay inside the
source shape's bounding box, and contact bands between different parts
are unlabeled via nearest-neighbor overlap masking.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from mlcseg.core import (
    UNLABELED,
    HierLabels,
    LabeledCloud,
    PartNode,
    PartTree,
    PointCloud,
    coarsen_labels,
)
from mlcseg.errors import DegenerateDonor, NoDonorFound
from mlcseg.streams import substream

_DEGENERATE_EXTENT = 1e-12


@dataclass(frozen=True)
class SubstitutionParams:
    theta: tuple = ()  # per-level replacement thresholds; scalar broadcast
    theta_default: float = 0.5
    overlap_epsilon: float = 0.02  # fraction of shape diameter
    seed: int = 0

    def __post_init__(self):
        for t in self.theta:
            if not 0.0 <= t <= 1.0:
                raise ValueError("theta values must lie in [0, 1]")
        if not 0.0 <= self.theta_default <= 1.0:
            raise ValueError("theta_default must lie in [0, 1]")
        if self.overlap_epsilon <= 0:
            raise ValueError("overlap_epsilon must be positive")

    def theta_at(self, level: int) -> float:
        if 1 <= level <= len(self.theta):
            return self.theta[level - 1]
        return self.theta_default


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if np.any(self.lo > self.hi):
            raise ValueError("Aabb needs lo <= hi componentwise")

    @classmethod
    def of_points(cls, points: np.ndarray) -> "Aabb":
        return cls(points.min(axis=0), points.max(axis=0))

    @property
    def extent(self):
        return self.hi - self.lo

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class AxisAffine:
    """Per-axis scale followed by translation."""

    scale: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.translation


def bbox_affine(src: Aabb, dst: Aabb) -> AxisAffine:
    """Transform mapping ``src`` corners onto ``dst`` corners.

    Axes where ``src`` is degenerate use scale 1 and center alignment so
    planar parts stay planar.
    """
    scale = np.ones(3)
    translation = np.zeros(3)
    for axis in range(3):
        if src.extent[axis] > _DEGENERATE_EXTENT:
            scale[axis] = dst.extent[axis] / src.extent[axis]
            translation[axis] = dst.lo[axis] - scale[axis] * src.lo[axis]
        else:
            translation[axis] = dst.center[axis] - src.center[axis]
    return AxisAffine(scale, translation)


# ---------------------------------------------------------------------------
# Candidate selection and donor lookup

def select_candidates(tree: PartTree, params: SubstitutionParams,
                      rng: np.random.Generator) -> list:
    """Visit nodes coarsest to finest; a node is selected with probability
    theta at its level, and children of selected nodes are skipped.
    Returns pairwise node-disjoint subtrees."""
    selected = []
    queue = deque(tree.root.children)
    while queue:
        node = queue.popleft()
        if rng.uniform() < params.theta_at(node.level):
            selected.append(node)
        else:
            queue.extend(node.children)
    return selected


def _matching_subtrees(tree: PartTree, level: int, label: int) -> list:
    return [
        node for node in tree.root.subtree_nodes()
        if node.level == level and node.label == label
    ]


def find_donor(level: int, label: int, pool: list, source_index: int,
               rng: np.random.Generator):
    """Uniformly pick a (shape_index, subtree) with the given root
    (level, label) from pool shapes other than the source."""
    matches = []
    for idx, tree in enumerate(pool):
        if idx == source_index:
            continue
        for node in _matching_subtrees(tree, level, label):
            matches.append((idx, node))
    if not matches:
        raise NoDonorFound(
            f"no other shape carries label {label} at level {level}"
        )
    return matches[int(rng.integers(len(matches)))]


# ---------------------------------------------------------------------------
# Substitution

def _leaf_labels(node: PartNode) -> set:
    return {leaf.label for leaf in node.leaves()}


def _union_bbox(points: np.ndarray, nodes: list, labels: set,
                finest_level: int) -> Aabb:
    idx = np.concatenate([
        leaf.point_indices for node in nodes for leaf in node.leaves()
        if leaf.label in labels
    ])
    return Aabb.of_points(points[idx])


def _shrink_into(points: np.ndarray, bbox: Aabb) -> np.ndarray:
    """Uniform shrink about the (box-clamped) centroid with the minimal
    factor that restores containment."""
    inside = np.all((points >= bbox.lo) & (points <= bbox.hi), axis=1)
    if np.all(inside):
        return points
    center = np.clip(points.mean(axis=0), bbox.lo, bbox.hi)
    offsets = points - center
    factor = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(offsets > 0, (bbox.hi - center) / offsets, np.inf)
        down = np.where(offsets < 0, (bbox.lo - center) / offsets, np.inf)
    factor = min(factor, float(np.min(up)), float(np.min(down)))
    factor = max(factor, 0.0)
    return center + factor * offsets


def substitute(source: LabeledCloud, candidate: PartNode,
               donor_shape: LabeledCloud, donor: PartNode,
               source_bbox: Aabb):
    """Replace candidate subtree P with donor subtree Q.

    Returns (points, fine_labels) for the replacement region.  With no
    shared leaf semantics, Q is mapped by bbox(Q) -> bbox(P); with shared
    leaves, the union bbox of the shared leaves drives the alignment and
    the transformed donor is uniformly shrunk into ``source_bbox`` if it
    escapes.
    """
    if candidate.level != donor.level or candidate.label != donor.label:
        raise ValueError("candidate and donor must share their root label")
    donor_idx = donor.point_indices
    donor_points = donor_shape.cloud.points[donor_idx]
    donor_labels = donor_shape.labels.at(donor_shape.labels.level_count)[donor_idx]
    donor_bbox = Aabb.of_points(donor_points)
    if donor_points.shape[0] < 3 or np.all(donor_bbox.extent <= _DEGENERATE_EXTENT):
        raise DegenerateDonor(
            f"donor part has {donor_points.shape[0]} points and extent "
            f"{donor_bbox.extent}"
        )

    finest = source.schema.level_count
    shared = _leaf_labels(candidate) & _leaf_labels(donor)
    cand_bbox = Aabb.of_points(source.cloud.points[candidate.point_indices])
    if shared:
        src_box = _union_bbox(donor_shape.cloud.points, [donor], shared, finest)
        dst_box = _union_bbox(source.cloud.points, [candidate], shared, finest)
    else:
        src_box = donor_bbox
        dst_box = cand_bbox
    moved = bbox_affine(src_box, dst_box).apply(donor_points)
    moved = _shrink_into(moved, source_bbox)
    return moved, donor_labels.copy()


# ---------------------------------------------------------------------------
# Overlap masking

def shape_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance, via convex hull vertices when available."""
    if points.shape[0] > 64:
        try:
            from scipy.spatial import ConvexHull

            points = points[ConvexHull(points).vertices]
        except Exception:
            pass  # coplanar or tiny sets fall back to brute force
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=2)).max())


def mark_overlaps(shape: LabeledCloud, params: SubstitutionParams,
                  restrict_to=None) -> np.ndarray:
    """Flag points whose nearest neighbor from a different finest-level
    part lies within overlap_epsilon * diameter.

    ``restrict_to`` (optional point index set) limits flagging to contacts
    that involve at least one of those points.  Returns a boolean mask;
    UNLABELED points are never flagged and never trigger flags.
    """
    points = shape.cloud.points
    fine = shape.labels.at(shape.labels.level_count)
    threshold = params.overlap_epsilon * shape_diameter(points)
    flagged = np.zeros(shape.n, dtype=bool)
    labeled = fine != UNLABELED
    restrict_mask = None
    if restrict_to is not None:
        restrict_mask = np.zeros(shape.n, dtype=bool)
        restrict_mask[np.asarray(restrict_to, dtype=np.int64)] = True
    for label in np.unique(fine[labeled]):
        part = np.flatnonzero(labeled & (fine == label))
        other = np.flatnonzero(labeled & (fine != label))
        if other.size == 0:
            continue
        tree = cKDTree(points[other])
        dist, nbr = tree.query(points[part], k=1)
        close = dist <= threshold
        if restrict_mask is not None:
            involved = restrict_mask[part] | restrict_mask[other[nbr]]
            close &= involved
        flagged[part[close]] = True
    return flagged


def apply_overlap_mask(shape: LabeledCloud, mask: np.ndarray) -> LabeledCloud:
    """Set UNLABELED at every level for flagged points."""
    levels = []
    for arr in shape.labels.levels:
        out = arr.copy()
        out[mask] = UNLABELED
        levels.append(out)
    return LabeledCloud(shape.cloud, HierLabels(tuple(levels)), shape.schema)


# ---------------------------------------------------------------------------
# Pool augmentation

def synthesize_shape(pool: list, trees: list, source_index: int,
                     params: SubstitutionParams,
                     rng: np.random.Generator) -> LabeledCloud:
    """One substitution pass over a source shape: select candidate
    subtrees, find donors, substitute, and mask contact overlaps."""
    source = pool[source_index]
    source_bbox = Aabb.of_points(source.cloud.points)
    candidates = select_candidates(trees[source_index], params, rng)

    keep = np.ones(source.n, dtype=bool)
    new_points = []
    new_fine = []
    replaced_any = False
    for candidate in candidates:
        try:
            donor_shape_idx, donor = find_donor(
                candidate.level, candidate.label, trees, source_index, rng
            )
        except NoDonorFound:
            continue  # leave this candidate unreplaced
        try:
            pts, fine = substitute(
                source, candidate, pool[donor_shape_idx], donor, source_bbox
            )
        except DegenerateDonor:
            continue
        keep[candidate.point_indices] = False
        new_points.append(pts)
        new_fine.append(fine)
        replaced_any = True

    kept_idx = np.flatnonzero(keep)
    points = source.cloud.points[kept_idx]
    fine = source.labels.at(source.labels.level_count)[kept_idx]
    if replaced_any:
        points = np.vstack([points] + new_points)
        fine = np.concatenate([fine] + new_fine)
    labels = coarsen_labels(fine, source.schema)
    shape = LabeledCloud(PointCloud(points), labels, source.schema)
    if replaced_any:
        replaced = np.arange(kept_idx.size, shape.n)
        mask = mark_overlaps(shape, params, restrict_to=replaced)
        shape = apply_overlap_mask(shape, mask)
    return shape


def augment_pool(pool: list, count: int,
                 params: SubstitutionParams) -> list:
    """Synthesize ``count`` shapes, each from a uniformly sampled source
    in ``pool`` (>= 2 shapes, one schema)."""
    if count == 0:
        return []
    if len(pool) < 2:
        raise ValueError("augment_pool needs at least 2 pool shapes")
    trees = [shape.tree() for shape in pool]
    out = []
    for i in range(count):
        rng = substream(params.seed, "augment", i)
        source_index = int(rng.integers(len(pool)))
        out.append(synthesize_shape(pool, trees, source_index, params, rng))
    return out
