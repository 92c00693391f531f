"""Random perturbation pairs: two scaled/rotated/translated copies of a
cloud, clipped to the unit box, with tracked point correspondence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mlcseg.core import Correspondence, PointCloud
from mlcseg.errors import EmptyCorrespondence
from mlcseg.streams import substream


@dataclass(frozen=True)
class PerturbParams:
    scale_range: tuple = (0.75, 1.25)
    max_rotation_deg: float = 10.0
    translation_range: tuple = (-0.25, 0.25)
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scale_range[0] <= 0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError("scale_range must be a positive interval")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError("max_rotation_deg must lie in [0, 180]")
        if self.translation_range[1] < self.translation_range[0]:
            raise ValueError("translation_range must be an interval")


@dataclass(frozen=True)
class RigidScaleTransform:
    """translation o rotation o uniform scale."""

    scale: float
    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # 3

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (self.scale * points) @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        rotated = normals @ self.rotation.T
        lengths = np.linalg.norm(rotated, axis=1, keepdims=True)
        return rotated / lengths


@dataclass(frozen=True)
class PerturbPair:
    """Two perturbed copies of one cloud.

    ``keep_a``/``keep_b`` mark source points that survived clipping in each
    copy; ``corr`` links surviving-in-both source indices to their rows in
    the clipped copies.
    """

    copy_a: PointCloud
    copy_b: PointCloud
    keep_a: np.ndarray
    keep_b: np.ndarray
    transform_a: RigidScaleTransform
    transform_b: RigidScaleTransform
    corr: Correspondence


def _axis_rotation(axis: int, angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    mat = np.eye(3)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    mat[i, i] = c
    mat[j, j] = c
    mat[i, j] = -s if axis != 1 else s
    mat[j, i] = s if axis != 1 else -s
    return mat


def sample_transform(params: PerturbParams,
                     rng: np.random.Generator) -> RigidScaleTransform:
    """Draw scale, then pitch/yaw/roll, then translation, each uniform.

    Rotation composes as yaw*pitch*roll (Z then X then Y about the axes),
    applied before translation.
    """
    scale = rng.uniform(*params.scale_range)
    bound = np.deg2rad(params.max_rotation_deg)
    pitch = rng.uniform(-bound, bound)
    yaw = rng.uniform(-bound, bound)
    roll = rng.uniform(-bound, bound)
    rotation = (
        _axis_rotation(2, yaw) @ _axis_rotation(0, pitch) @ _axis_rotation(1, roll)
    )
    translation = rng.uniform(
        params.translation_range[0], params.translation_range[1], size=3
    )
    return RigidScaleTransform(float(scale), rotation, translation)


def _clip_mask(points: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.all((points >= lo) & (points <= hi), axis=1)


def make_pair(cloud: PointCloud, params: PerturbParams,
              rng: np.random.Generator = None) -> PerturbPair:
    """Apply two independently sampled transforms and clip to the unit box.

    Normals are rotated (never scaled or translated) and renormalized.
    Raises :class:`EmptyCorrespondence` when no point survives in both
    copies.
    """
    if rng is None:
        rng = substream(params.seed, "perturb")
    t_a = sample_transform(params, rng)
    t_b = sample_transform(params, rng)

    copies = []
    keeps = []
    for t in (t_a, t_b):
        moved = t.apply(cloud.points)
        keep = _clip_mask(moved, params.clip_lo, params.clip_hi)
        normals = None
        if cloud.normals is not None:
            normals = t.apply_normals(cloud.normals)[keep]
        if not np.any(keep):
            raise EmptyCorrespondence("a perturbed copy lost every point")
        copies.append(PointCloud(moved[keep], normals))
        keeps.append(keep)

    keep_a, keep_b = keeps
    both = keep_a & keep_b
    orig = np.flatnonzero(both)
    if orig.size == 0:
        raise EmptyCorrespondence("no point survives clipping in both copies")
    pos_a = np.cumsum(keep_a) - 1
    pos_b = np.cumsum(keep_b) - 1
    corr = Correspondence(orig, pos_a[orig], pos_b[orig])
    return PerturbPair(copies[0], copies[1], keep_a, keep_b, t_a, t_b, corr)
