"""Hierarchical label schemas, labeled point clouds, and probability fields.

Levels are numbered 1 (coarsest) to K (finest).  Labels are dense 0-based
integer ids per level; ``UNLABELED`` (-1) marks points excluded from
supervised losses and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mlcseg.errors import (
    EmptyLevel,
    IncoherentLabels,
    MissingParent,
    OutOfRangeLabel,
    OutOfRangeParent,
    SchemaError,
)

UNLABELED = -1


# ---------------------------------------------------------------------------
# Label schema

@dataclass(frozen=True)
class LabelSchema:
    """K-level hierarchical label space.

    ``labels_per_level[k-1]`` is the number of labels at level k.
    ``parent_maps[k-2]`` maps a level-k label id to its level-(k-1) parent,
    for k in 2..K.  A missing parent is stored as -1 and rejected by
    :func:`validate_schema`.
    """

    labels_per_level: tuple
    parent_maps: tuple = ()
    level_names: tuple = None

    def __post_init__(self):
        object.__setattr__(
            self, "labels_per_level", tuple(int(x) for x in self.labels_per_level)
        )
        object.__setattr__(
            self,
            "parent_maps",
            tuple(np.asarray(m, dtype=np.int64) for m in self.parent_maps),
        )

    @property
    def level_count(self):
        return len(self.labels_per_level)

    def parent_map(self, level):
        """Parent map for level ``level`` (2..K)."""
        if not 2 <= level <= self.level_count:
            raise IndexError(f"no parent map for level {level}")
        return self.parent_maps[level - 2]

    @classmethod
    def from_parent_dicts(cls, labels_per_level, parent_dicts, level_names=None):
        """Build a schema from one {child_id: parent_id} dict per level 2..K."""
        maps = []
        for k, d in enumerate(parent_dicts, start=2):
            n_child = labels_per_level[k - 1]
            arr = np.full(n_child, -1, dtype=np.int64)
            for child, parent in d.items():
                if 0 <= child < n_child:
                    arr[child] = parent
            maps.append(arr)
        return cls(tuple(labels_per_level), tuple(maps), level_names)


def validate_schema(schema: LabelSchema) -> None:
    """Raise a :class:`SchemaError` subclass unless all invariants hold."""
    if schema.level_count < 1:
        raise EmptyLevel("schema must have at least one level")
    for k, count in enumerate(schema.labels_per_level, start=1):
        if count < 1:
            raise EmptyLevel(f"level {k} has {count} labels")
    if len(schema.parent_maps) != schema.level_count - 1:
        raise MissingParent(
            f"expected {schema.level_count - 1} parent maps, "
            f"got {len(schema.parent_maps)}"
        )
    for k in range(2, schema.level_count + 1):
        pm = schema.parent_map(k)
        if pm.shape != (schema.labels_per_level[k - 1],):
            raise MissingParent(
                f"parent map for level {k} covers {pm.shape[0]} labels, "
                f"expected {schema.labels_per_level[k - 1]}"
            )
        if np.any(pm < 0):
            missing = int(np.flatnonzero(pm < 0)[0])
            raise MissingParent(f"level {k} label {missing} has no parent")
        if np.any(pm >= schema.labels_per_level[k - 2]):
            bad = int(np.flatnonzero(pm >= schema.labels_per_level[k - 2])[0])
            raise OutOfRangeParent(
                f"level {k} label {bad} maps to out-of-range parent {int(pm[bad])}"
            )


# ---------------------------------------------------------------------------
# Point clouds

@dataclass(frozen=True)
class PointCloud:
    """n x 3 points, optionally with unit normals."""

    points: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (n, 3) with n >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points shape")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    @property
    def n(self):
        return self.points.shape[0]


def normalize_to_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Center points on their bounding-box center and scale the farthest
    point onto the unit sphere."""
    pts = np.asarray(points, dtype=np.float64)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    centered = pts - center
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0:
        centered = centered / radius
    return centered


# ---------------------------------------------------------------------------
# Hierarchical labels

@dataclass(frozen=True)
class HierLabels:
    """Per-point label ids at each of the K levels; -1 means UNLABELED."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(
            self,
            "levels",
            tuple(np.asarray(l, dtype=np.int64) for l in self.levels),
        )

    @property
    def level_count(self):
        return len(self.levels)

    @property
    def n(self):
        return self.levels[0].shape[0]

    def at(self, level):
        """Labels at level ``level`` (1-based)."""
        return self.levels[level - 1]


def validate_hier_labels(labels: HierLabels, schema: LabelSchema) -> None:
    """Check range, hierarchical coherence, and sentinel propagation."""
    if labels.level_count != schema.level_count:
        raise IncoherentLabels(
            f"labels have {labels.level_count} levels, schema has "
            f"{schema.level_count}"
        )
    n = labels.n
    for k in range(1, schema.level_count + 1):
        lk = labels.at(k)
        if lk.shape != (n,):
            raise IncoherentLabels(f"level {k} has wrong length")
        valid = lk != UNLABELED
        if np.any((lk[valid] < 0) | (lk[valid] >= schema.labels_per_level[k - 1])):
            raise OutOfRangeLabel(f"level {k} contains out-of-range label ids")
    for k in range(2, schema.level_count + 1):
        fine = labels.at(k)
        coarse = labels.at(k - 1)
        pm = schema.parent_map(k)
        both = (fine != UNLABELED) & (coarse != UNLABELED)
        if np.any(pm[fine[both]] != coarse[both]):
            raise IncoherentLabels(f"levels {k - 1}/{k} violate the parent map")
        # UNLABELED at a coarse level must propagate to finer levels.
        if np.any((coarse == UNLABELED) & (fine != UNLABELED)):
            raise IncoherentLabels(
                f"level {k} labels a point that is UNLABELED at level {k - 1}"
            )


def coarsen_labels(fine_labels, schema: LabelSchema) -> HierLabels:
    """Fill levels K-1..1 from finest-level labels via the parent maps.

    UNLABELED entries stay UNLABELED at every level.
    """
    validate_schema(schema)
    fine = np.asarray(fine_labels, dtype=np.int64)
    valid = fine != UNLABELED
    if np.any((fine[valid] < 0) | (fine[valid] >= schema.labels_per_level[-1])):
        raise OutOfRangeLabel("finest-level labels out of range")
    levels = [fine]
    current = fine
    for k in range(schema.level_count, 1, -1):
        pm = schema.parent_map(k)
        coarse = np.full_like(current, UNLABELED)
        keep = current != UNLABELED
        coarse[keep] = pm[current[keep]]
        levels.append(coarse)
        current = coarse
    return HierLabels(tuple(reversed(levels)))


# ---------------------------------------------------------------------------
# Part trees

@dataclass
class PartNode:
    """One shape part: a (level, label) pair with its point index set."""

    level: int
    label: int
    point_indices: np.ndarray
    children: list = field(default_factory=list)

    def leaves(self):
        if not self.children:
            return [self]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def subtree_nodes(self):
        out = [self]
        for c in self.children:
            out.extend(c.subtree_nodes())
        return out


@dataclass
class PartTree:
    """Part hierarchy of a labeled shape; the root is a synthetic level-0
    node whose children are the coarsest-level parts."""

    root: PartNode
    schema: LabelSchema


def tree_from_labels(cloud: PointCloud, labels: HierLabels,
                     schema: LabelSchema) -> PartTree:
    """Group points into one node per (level, label) pair with >= 1 point."""
    validate_hier_labels(labels, schema)
    if labels.n != cloud.n:
        raise IncoherentLabels("labels and cloud disagree on point count")

    def build(level, indices):
        nodes = []
        lk = labels.at(level)[indices]
        for label in np.unique(lk[lk != UNLABELED]):
            sub = indices[lk == label]
            node = PartNode(level, int(label), sub)
            if level < schema.level_count:
                node.children = build(level + 1, sub)
            nodes.append(node)
        return nodes

    all_idx = np.arange(cloud.n)
    root = PartNode(0, UNLABELED, all_idx)
    root.children = build(1, all_idx)
    return PartTree(root, schema)


# ---------------------------------------------------------------------------
# Probability fields and correspondences

@dataclass(frozen=True)
class ProbField:
    """Per level k: an n x L^(k) row-stochastic matrix."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(
            self,
            "levels",
            tuple(np.asarray(l, dtype=np.float64) for l in self.levels),
        )

    @property
    def level_count(self):
        return len(self.levels)

    @property
    def n(self):
        return self.levels[0].shape[0]

    def at(self, level):
        return self.levels[level - 1]


def validate_prob_field(p: ProbField) -> None:
    for k, mat in enumerate(p.levels, start=1):
        if np.any(mat < -0.0) or np.any(mat > 1.0 + 1e-12):
            raise ValueError(f"level {k} has entries outside [0, 1]")
        if np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"level {k} rows do not sum to 1")


@dataclass(frozen=True)
class Correspondence:
    """Aligned index triples linking a source cloud to its two perturbed
    copies: ``orig[j]`` in the source corresponds to row ``rows_a[j]`` of
    copy A and row ``rows_b[j]`` of copy B."""

    orig: np.ndarray
    rows_a: np.ndarray
    rows_b: np.ndarray

    def __post_init__(self):
        for name in ("orig", "rows_a", "rows_b"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.int64)
            )
        if not (len(self.orig) == len(self.rows_a) == len(self.rows_b)):
            raise ValueError("correspondence arrays must have equal length")

    def __len__(self):
        return len(self.orig)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(idx, idx, idx)


# ---------------------------------------------------------------------------
# Labeled clouds

@dataclass(frozen=True)
class LabeledCloud:
    """A point cloud with per-point hierarchical labels under one schema."""

    cloud: PointCloud
    labels: HierLabels
    schema: LabelSchema

    def __post_init__(self):
        if self.labels.n != self.cloud.n:
            raise IncoherentLabels("labels and cloud disagree on point count")

    @property
    def n(self):
        return self.cloud.n

    def validate(self):
        validate_schema(self.schema)
        validate_hier_labels(self.labels, self.schema)

    def tree(self) -> PartTree:
        return tree_from_labels(self.cloud, self.labels, self.schema)
