"""Central finite-difference verification of every analytic gradient.

Used by the `gradcheck` CLI subcommand and the acceptance suite.  Random
small instances (n <= 20, K <= 3, L <= 8) are drawn per trial; the
part-consistency term is only probed at coordinates whose row argmax is
stable under the probe step.
"""

from __future__ import annotations

import numpy as np

from mlcseg.core import Correspondence, HierLabels, LabelSchema
from mlcseg.losses import (
    LogitsField,
    LossWeights,
    hierarchical_consistency,
    part_consistency,
    point_consistency,
    seg_loss,
    softmax_field,
    total_loss,
)
from mlcseg.trainer import backward, forward, init_model

STEP = 1e-5
TOLERANCE = 1e-4
# Logit margin guaranteeing the row argmax cannot flip under +-STEP.
ARGMAX_MARGIN = 1e-3


def relative_error(analytic, numeric, floor=1e-6):
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def random_schema(rng) -> LabelSchema:
    k = int(rng.integers(1, 4))
    counts = [int(rng.integers(2, 9)) for _ in range(k)]
    # Parents must cover the coarser level so it is never empty of children.
    counts_sorted = sorted(counts)
    parent_dicts = []
    for level in range(2, k + 1):
        coarse, fine = counts_sorted[level - 2], counts_sorted[level - 1]
        assignment = np.concatenate([
            np.arange(coarse), rng.integers(0, coarse, size=fine - coarse)
        ])
        rng.shuffle(assignment)
        parent_dicts.append({c: int(p) for c, p in enumerate(assignment)})
    return LabelSchema.from_parent_dicts(tuple(counts_sorted), parent_dicts)


def random_instance(rng, n_max=20):
    """Schema, logits for both copies, coherent labels, and a random
    subset correspondence."""
    schema = random_schema(rng)
    n = int(rng.integers(2, n_max + 1))
    logits_a = LogitsField(tuple(
        rng.normal(0, 1.5, size=(n, count)) for count in schema.labels_per_level
    ))
    logits_b = LogitsField(tuple(
        rng.normal(0, 1.5, size=(n, count)) for count in schema.labels_per_level
    ))
    fine = rng.integers(0, schema.labels_per_level[-1], size=n)
    fine[rng.uniform(size=n) < 0.2] = -1
    if np.all(fine == -1):
        fine[0] = 0
    from mlcseg.core import coarsen_labels

    q = coarsen_labels(fine, schema)
    size = int(rng.integers(1, n + 1))
    idx = np.sort(rng.choice(n, size=size, replace=False))
    if np.all(fine[idx] == -1):
        # Keep at least one labeled point inside the correspondence.
        extra = int(np.flatnonzero(fine != -1)[0])
        idx = np.unique(np.append(idx, extra))
    corr = Correspondence(idx, idx, idx)
    return schema, logits_a, logits_b, q, corr


def _flatten(levels):
    return np.concatenate([mat.reshape(-1) for mat in levels])


def _stable_mask(logits: LogitsField, corr_rows) -> np.ndarray:
    """Coordinates whose row argmax survives a +-STEP logit probe."""
    masks = []
    for mat in logits.levels:
        top2 = np.sort(mat, axis=1)[:, -2:]
        stable_row = (top2[:, 1] - top2[:, 0]) > ARGMAX_MARGIN
        mask = np.zeros(mat.shape, dtype=bool)
        mask[corr_rows] = stable_row[corr_rows, None]
        masks.append(mask.reshape(-1))
    return np.concatenate(masks)


def fd_check(loss_fn, logits_a, logits_b, step=STEP, coord_mask=None):
    """Max relative error of the analytic gradient of ``loss_fn`` against
    central differences over every (or the masked) logit coordinate."""
    _, grad_a, grad_b = loss_fn(logits_a, logits_b)
    worst = 0.0
    for side, logits in (("a", logits_a), ("b", logits_b)):
        grads = grad_a if side == "a" else grad_b
        flat_grad = _flatten(grads)
        mats = [m.copy() for m in logits.levels]
        flat = _flatten(mats)
        mask = np.ones(flat.size, dtype=bool)
        if coord_mask is not None:
            mask = coord_mask[side]
        for j in np.flatnonzero(mask):
            orig = flat[j]
            flat[j] = orig + step
            plus = loss_fn(_unflatten(flat, mats), logits_b)[0] if side == "a" \
                else loss_fn(logits_a, _unflatten(flat, mats))[0]
            flat[j] = orig - step
            minus = loss_fn(_unflatten(flat, mats), logits_b)[0] if side == "a" \
                else loss_fn(logits_a, _unflatten(flat, mats))[0]
            flat[j] = orig
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, relative_error(flat_grad[j], numeric))
    return worst


def _unflatten(flat, template_mats):
    out = []
    offset = 0
    for mat in template_mats:
        size = mat.size
        out.append(flat[offset:offset + size].reshape(mat.shape))
        offset += size
    return LogitsField(tuple(out))


def check_term(term: str, rng) -> float:
    """One random-instance finite-difference trial for a loss term."""
    schema, logits_a, logits_b, q, corr = random_instance(rng)

    if term == "seg":
        def fn(la, lb):
            return seg_loss(q, softmax_field(la), softmax_field(lb), corr)
    elif term == "point":
        def fn(la, lb):
            return point_consistency(softmax_field(la), softmax_field(lb), corr)
    elif term == "part":
        def fn(la, lb):
            return part_consistency(softmax_field(la), softmax_field(lb), corr)
    elif term == "hier":
        def fn(la, lb):
            return hierarchical_consistency(
                softmax_field(la), softmax_field(lb), schema, corr
            )
    elif term == "total":
        weights = LossWeights(1.0, 0.01, 0.01, 0.01)

        def fn(la, lb):
            report = total_loss(la, lb, q, schema, corr, weights)
            return report.total, report.grad_a, report.grad_b
    else:
        raise ValueError(f"unknown term {term!r}")

    coord_mask = None
    if term in ("part", "total"):
        coord_mask = {
            "a": _stable_mask(logits_a, corr.rows_a),
            "b": _stable_mask(logits_b, corr.rows_b),
        }
    return fd_check(fn, logits_a, logits_b, coord_mask=coord_mask)


def check_model_backward(rng, n_coords=40) -> float:
    """Finite-difference check of the MLP backward pass.

    Uses a fixed random upstream gradient C so the scalar C . logits has
    the analytic parameter gradient backward(C); a random subset of
    parameter coordinates is probed.
    """
    schema = random_schema(rng)
    n = int(rng.integers(2, 21))
    d_in = 6
    model = init_model(schema, d_in, int(rng.integers(1 << 30)))
    feats = rng.normal(0, 1, size=(n, d_in))
    upstream = [
        rng.normal(0, 1, size=(n, count)) for count in schema.labels_per_level
    ]

    def scalar_loss():
        logits, _ = forward(model, feats)
        return sum(float(np.sum(c * mat))
                   for c, mat in zip(upstream, logits.levels))

    _, cache = forward(model, feats)
    grads = backward(model, cache, upstream)

    worst = 0.0
    names = sorted(model.params)
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        arr = model.params[name]
        j = int(rng.integers(arr.size))
        orig = arr.reshape(-1)[j]
        arr.reshape(-1)[j] = orig + STEP
        plus = scalar_loss()
        arr.reshape(-1)[j] = orig - STEP
        minus = scalar_loss()
        arr.reshape(-1)[j] = orig
        numeric = (plus - minus) / (2 * STEP)
        worst = max(worst, relative_error(grads[name].reshape(-1)[j], numeric))
    return worst


ALL_TERMS = ("seg", "point", "part", "hier", "total", "model")


def run_suite(trials: int = 50, seed: int = 0, tolerance: float = TOLERANCE):
    """Run ``trials`` random instances per term; returns {term: worst
    relative error}."""
    results = {}
    for term_index, term in enumerate(ALL_TERMS):
        rng = np.random.default_rng([seed, term_index])
        worst = 0.0
        for _ in range(trials):
            if term == "model":
                worst = max(worst, check_model_backward(rng))
            else:
                worst = max(worst, check_term(term, rng))
        results[term] = worst
    return results
