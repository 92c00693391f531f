"""Loss kernels with hand-derived gradients w.r.t. pre-softmax logits.

Terms: multilevel cross-entropy on labeled pairs, symmetric-KL point
consistency, BC/OC part consistency, cross-copy hierarchical consistency,
and their weighted total.  Probabilities are floored at ``KL_EPS`` inside
logarithms only; the argmax defining pseudo-partitions is treated as a
constant during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mlcseg.core import (
    UNLABELED,
    Correspondence,
    HierLabels,
    LabelSchema,
    ProbField,
)
from mlcseg.errors import MissingLabels, NoLabeledPoints

KL_EPS = 1e-8


@dataclass(frozen=True)
class LogitsField:
    """Per level k: an n x L^(k) matrix of unnormalized scores."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(
            self,
            "levels",
            tuple(np.asarray(l, dtype=np.float64) for l in self.levels),
        )
        for mat in self.levels:
            if not np.all(np.isfinite(mat)):
                raise ValueError("logits must be finite")

    @property
    def level_count(self):
        return len(self.levels)

    @property
    def n(self):
        return self.levels[0].shape[0]

    def at(self, level):
        return self.levels[level - 1]


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    lambda_point: float = 0.01
    lambda_part: float = 0.01
    lambda_hier: float = 0.01

    def __post_init__(self):
        for name in ("gamma", "lambda_point", "lambda_part", "lambda_hier"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    """Scalar loss terms plus gradients w.r.t. the logits of both copies."""

    seg: float
    point: float
    part: float
    hier: float
    total: float
    grad_a: list = field(default_factory=list)
    grad_b: list = field(default_factory=list)


def softmax_field(logits: LogitsField) -> ProbField:
    """Numerically stable row softmax per level."""
    out = []
    for mat in logits.levels:
        shifted = mat - mat.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out.append(e / e.sum(axis=1, keepdims=True))
    return ProbField(tuple(out))


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Chain dL/dp back through a row softmax to dL/dlogits."""
    inner = np.sum(dp * p, axis=1, keepdims=True)
    return p * (dp - inner)


def _zero_grads(p: ProbField):
    return [np.zeros_like(mat) for mat in p.levels]


def _log_clamped(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, KL_EPS))


# ---------------------------------------------------------------------------
# Segmentation loss

def seg_loss(q: HierLabels, p_a: ProbField, p_b: ProbField,
             corr: Correspondence):
    """Multilevel cross-entropy of both copies against the ground truth,
    averaged as 1/(2n) over correspondence points and summed over levels.

    Points UNLABELED at a level are skipped at that level.  Returns
    (value, grad_a, grad_b) with gradients w.r.t. logits: per included
    term, (softmax - onehot) / (2n).
    """
    n = len(corr)
    if n == 0:
        raise NoLabeledPoints("empty correspondence")
    grad_a = _zero_grads(p_a)
    grad_b = _zero_grads(p_b)
    total = 0.0
    any_labeled = False
    for k in range(1, p_a.level_count + 1):
        labels = q.at(k)[corr.orig]
        mask = labels != UNLABELED
        if not np.any(mask):
            continue
        any_labeled = True
        lab = labels[mask]
        for p, rows, grad in (
            (p_a, corr.rows_a, grad_a),
            (p_b, corr.rows_b, grad_b),
        ):
            mat = p.at(k)
            sel = rows[mask]
            probs = mat[sel]
            total += -np.sum(_log_clamped(probs[np.arange(len(lab)), lab]))
            g = probs.copy()
            g[np.arange(len(lab)), lab] -= 1.0
            # corr rows are unique per copy, so fancy += is exact.
            grad[k - 1][sel] += g / (2 * n)
    if not any_labeled:
        raise NoLabeledPoints("no labeled point at any level over the correspondence")
    return total / (2 * n), grad_a, grad_b


# ---------------------------------------------------------------------------
# Point-level consistency

def _sym_kl_rows(a: np.ndarray, b: np.ndarray):
    """Symmetric KL per row plus its derivatives w.r.t. a and b.

    Uses sum_m (a_m - b_m) (log a_m - log b_m) with clamped logs; the
    derivative respects the clamp so finite differences agree everywhere.
    """
    log_a = _log_clamped(a)
    log_b = _log_clamped(b)
    diff = a - b
    log_diff = log_a - log_b
    value = np.sum(diff * log_diff)
    da = log_diff + np.where(a > KL_EPS, diff / np.maximum(a, KL_EPS), 0.0)
    db = -log_diff - np.where(b > KL_EPS, diff / np.maximum(b, KL_EPS), 0.0)
    return value, da, db


def point_consistency(p_a: ProbField, p_b: ProbField, corr: Correspondence):
    """Symmetric KL between corresponding rows, all levels, 1/(2n) scaled.

    Returns (value, grad_a, grad_b) with gradients w.r.t. logits.
    """
    n = len(corr)
    grad_a = _zero_grads(p_a)
    grad_b = _zero_grads(p_b)
    total = 0.0
    for k in range(1, p_a.level_count + 1):
        a = p_a.at(k)[corr.rows_a]
        b = p_b.at(k)[corr.rows_b]
        value, da, db = _sym_kl_rows(a, b)
        total += value
        dpa = np.zeros_like(p_a.at(k))
        dpb = np.zeros_like(p_b.at(k))
        dpa[corr.rows_a] += da / (2 * n)
        dpb[corr.rows_b] += db / (2 * n)
        grad_a[k - 1] = softmax_backward(p_a.at(k), dpa)
        grad_b[k - 1] = softmax_backward(p_b.at(k), dpb)
    return total / (2 * n), grad_a, grad_b


def point_consistency_mse(p_a: ProbField, p_b: ProbField, corr: Correspondence):
    """MSE variant of the point consistency term, kept for ablations."""
    n = len(corr)
    grad_a = _zero_grads(p_a)
    grad_b = _zero_grads(p_b)
    total = 0.0
    for k in range(1, p_a.level_count + 1):
        a = p_a.at(k)[corr.rows_a]
        b = p_b.at(k)[corr.rows_b]
        diff = a - b
        total += np.sum(diff * diff)
        dpa = np.zeros_like(p_a.at(k))
        dpb = np.zeros_like(p_b.at(k))
        dpa[corr.rows_a] += 2 * diff / (2 * n)
        dpb[corr.rows_b] += -2 * diff / (2 * n)
        grad_a[k - 1] = softmax_backward(p_a.at(k), dpa)
        grad_b[k - 1] = softmax_backward(p_b.at(k), dpb)
    return total / (2 * n), grad_a, grad_b


# ---------------------------------------------------------------------------
# Part-level consistency

@dataclass(frozen=True)
class PseudoPartition:
    """Row-argmax label assignment per level; smallest index wins ties."""

    levels: tuple

    def at(self, level):
        return self.levels[level - 1]


def pseudo_partition(p: ProbField) -> PseudoPartition:
    return PseudoPartition(tuple(mat.argmax(axis=1) for mat in p.levels))


def confidences(partition: PseudoPartition, p: ProbField, level: int,
                label: int):
    """Belonging- and outlier-confidence of one part.

    BC is the mean of the label's probability column over points assigned
    to it; OC the mean over the remaining points.  Either is None when
    its point set is empty.
    """
    mask = partition.at(level) == label
    column = p.at(level)[:, label]
    inside = int(mask.sum())
    bc = float(column[mask].mean()) if inside else None
    oc = float(column[~mask].mean()) if inside < mask.size else None
    return bc, oc


def _part_terms_one_side(assign, x, y, dx, dy):
    """BC/OC squared differences with the partition of the imposing copy
    ``x`` imposed on copy ``y``, summed over all labels of one level.

    alpha = beta = 1/2 when a part is nonempty; an empty part drops its
    BC term (alpha=0, beta=1); a part covering every point drops its OC
    term (alpha=1, beta=0).  Gradients accumulate into ``dx``/``dy`` with
    the assignment held constant.
    """
    n, n_labels = x.shape
    member = np.zeros((n, n_labels))
    member[np.arange(n), assign] = 1.0
    inside = member.sum(axis=0)
    outside = n - inside

    alpha = np.where(inside > 0, np.where(outside > 0, 0.5, 1.0), 0.0)
    beta = np.where(inside > 0, np.where(outside > 0, 0.5, 0.0), 1.0)

    sum_in_x = np.sum(x * member, axis=0)
    sum_in_y = np.sum(y * member, axis=0)
    safe_in = np.maximum(inside, 1)
    safe_out = np.maximum(outside, 1)
    d_bc = (sum_in_x - sum_in_y) / safe_in
    d_oc = ((x.sum(axis=0) - sum_in_x) - (y.sum(axis=0) - sum_in_y)) / safe_out

    value = float(np.sum(alpha * d_bc ** 2) + np.sum(beta * d_oc ** 2))
    bc_coef = 2 * alpha * d_bc / safe_in
    oc_coef = 2 * beta * d_oc / safe_out
    dx += member * bc_coef + (1.0 - member) * oc_coef
    dy -= member * bc_coef + (1.0 - member) * oc_coef
    return value


def part_consistency(p_a: ProbField, p_b: ProbField, corr: Correspondence):
    """BC/OC consistency between the pseudo-partitions of the two copies.

    The partition of each copy is imposed on the other; assignments are
    constants for differentiation (argmax detached).  Returns
    (value, grad_a, grad_b) with gradients w.r.t. logits.
    """
    grad_a = _zero_grads(p_a)
    grad_b = _zero_grads(p_b)
    total = 0.0
    for k in range(1, p_a.level_count + 1):
        a = p_a.at(k)[corr.rows_a]
        b = p_b.at(k)[corr.rows_b]
        da = np.zeros_like(a)
        db = np.zeros_like(b)
        assign_a = a.argmax(axis=1)
        assign_b = b.argmax(axis=1)
        total += _part_terms_one_side(assign_a, a, b, da, db)
        total += _part_terms_one_side(assign_b, b, a, db, da)
        dpa = np.zeros_like(p_a.at(k))
        dpb = np.zeros_like(p_b.at(k))
        dpa[corr.rows_a] += da
        dpb[corr.rows_b] += db
        grad_a[k - 1] = softmax_backward(p_a.at(k), dpa)
        grad_b[k - 1] = softmax_backward(p_b.at(k), dpb)
    return total, grad_a, grad_b


# ---------------------------------------------------------------------------
# Hierarchical consistency

def merge_to_parent(rows, fine_level: int, schema: LabelSchema) -> np.ndarray:
    """Sum fine-level probability columns over each parent's children to
    form pseudo-probability rows at the parent level.

    ``rows`` is either a ProbField (level ``fine_level`` is merged) or the
    raw n x L^(fine_level) matrix.
    """
    if isinstance(rows, ProbField):
        rows = rows.at(fine_level)
    pm = schema.parent_map(fine_level)
    coarse = np.zeros((rows.shape[0], schema.labels_per_level[fine_level - 2]))
    np.add.at(coarse.T, pm, rows.T)
    return coarse


def _kl_rows(a: np.ndarray, b: np.ndarray):
    """KL(a || b) summed over rows, with clamp-aware derivatives."""
    log_diff = _log_clamped(a) - _log_clamped(b)
    value = np.sum(a * log_diff)
    da = log_diff + np.where(a > KL_EPS, 1.0, 0.0)
    db = -np.where(b > KL_EPS, a / np.maximum(b, KL_EPS), 0.0)
    return value, da, db


def hierarchical_consistency(p_a: ProbField, p_b: ProbField,
                             schema: LabelSchema, corr: Correspondence):
    """Cross-copy KL between merged fine-level pseudo-probabilities and the
    other copy's direct coarse predictions, levels 1..K-1, 1/(2n) scaled.

    Returns (value, grad_a, grad_b) with gradients w.r.t. logits; zero for
    single-level schemas.
    """
    n = len(corr)
    grad_a = _zero_grads(p_a)
    grad_b = _zero_grads(p_b)
    levels = p_a.level_count
    if levels < 2:
        return 0.0, grad_a, grad_b
    dpa = [np.zeros_like(mat) for mat in p_a.levels]
    dpb = [np.zeros_like(mat) for mat in p_b.levels]
    total = 0.0
    for k in range(1, levels):
        fine_a = p_a.at(k + 1)[corr.rows_a]
        fine_b = p_b.at(k + 1)[corr.rows_b]
        coarse_a = p_a.at(k)[corr.rows_a]
        coarse_b = p_b.at(k)[corr.rows_b]
        merged_a = merge_to_parent(fine_a, k + 1, schema)
        merged_b = merge_to_parent(fine_b, k + 1, schema)
        pm = schema.parent_map(k + 1)

        value, d_merged, d_direct = _kl_rows(merged_a, coarse_b)
        total += value
        dpa[k][corr.rows_a] += d_merged[:, pm] / (2 * n)
        dpb[k - 1][corr.rows_b] += d_direct / (2 * n)

        value, d_merged, d_direct = _kl_rows(merged_b, coarse_a)
        total += value
        dpb[k][corr.rows_b] += d_merged[:, pm] / (2 * n)
        dpa[k - 1][corr.rows_a] += d_direct / (2 * n)
    for k in range(levels):
        grad_a[k] = softmax_backward(p_a.levels[k], dpa[k])
        grad_b[k] = softmax_backward(p_b.levels[k], dpb[k])
    return total / (2 * n), grad_a, grad_b


# ---------------------------------------------------------------------------
# Total loss

def total_loss(logits_a: LogitsField, logits_b: LogitsField,
               q: HierLabels, schema: LabelSchema, corr: Correspondence,
               weights: LossWeights, use_mse_point: bool = False) -> LossReport:
    """Weighted combination of all loss terms with summed logit gradients.

    ``q`` may be None only when ``weights.gamma == 0`` (unlabeled sample).
    """
    if weights.gamma > 0 and q is None:
        raise MissingLabels("gamma > 0 requires ground-truth labels")
    p_a = softmax_field(logits_a)
    p_b = softmax_field(logits_b)

    if q is not None:
        l_seg, gs_a, gs_b = seg_loss(q, p_a, p_b, corr)
    else:
        l_seg = 0.0
        gs_a, gs_b = _zero_grads(p_a), _zero_grads(p_b)
    point_fn = point_consistency_mse if use_mse_point else point_consistency
    l_point, gp_a, gp_b = point_fn(p_a, p_b, corr)
    l_part, gq_a, gq_b = part_consistency(p_a, p_b, corr)
    l_hier, gh_a, gh_b = hierarchical_consistency(p_a, p_b, schema, corr)

    total = (
        weights.gamma * l_seg
        + weights.lambda_point * l_point
        + weights.lambda_part * l_part
        + weights.lambda_hier * l_hier
    )
    grad_a = [
        weights.gamma * gs + weights.lambda_point * gp
        + weights.lambda_part * gq + weights.lambda_hier * gh
        for gs, gp, gq, gh in zip(gs_a, gp_a, gq_a, gh_a)
    ]
    grad_b = [
        weights.gamma * gs + weights.lambda_point * gp
        + weights.lambda_part * gq + weights.lambda_hier * gh
        for gs, gp, gq, gh in zip(gs_b, gp_b, gq_b, gh_b)
    ]
    return LossReport(l_seg, l_point, l_part, l_hier, total, grad_a, grad_b)
