"""Desk-scale semi-supervised training: a pointwise MLP with hand-derived
backpropagation, mixed labeled/unlabeled/synthetic batches, and an SGD
schedule with two step decays."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from mlcseg.core import LabelSchema, LabeledCloud, PointCloud
from mlcseg.errors import EmptyLabeledPool
from mlcseg.losses import LogitsField, LossWeights, total_loss
from mlcseg.perturb import PerturbParams, make_pair
from mlcseg.streams import substream


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_iters: int = 80000
    lr: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    perturb: PerturbParams = field(default_factory=PerturbParams)
    aug_count: int = 0
    knn: int = 16
    use_normals: bool = False
    eval_every: int = 0  # 0 = evaluate only after the last iteration
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even")

    def lr_at(self, iteration: int) -> float:
        # x0.1 decays at 50% and 75% of the iteration budget.
        lr = self.lr
        if iteration >= self.max_iters // 2:
            lr *= 0.1
        if iteration >= (3 * self.max_iters) // 4:
            lr *= 0.1
        return lr


# ---------------------------------------------------------------------------
# Pointwise model

HIDDEN = 64


@dataclass
class ToyModel:
    """Two hidden layers of width 64 with softplus, one linear head per
    hierarchy level."""

    params: dict
    schema: LabelSchema
    d_in: int


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_model(schema: LabelSchema, d_in: int, seed: int) -> ToyModel:
    rng = substream(seed, "init")
    params = {
        "w1": _glorot(rng, d_in, HIDDEN),
        "b1": np.zeros(HIDDEN),
        "w2": _glorot(rng, HIDDEN, HIDDEN),
        "b2": np.zeros(HIDDEN),
    }
    for k, n_labels in enumerate(schema.labels_per_level, start=1):
        params[f"head_w{k}"] = _glorot(rng, HIDDEN, n_labels)
        params[f"head_b{k}"] = np.zeros(n_labels)
    return ToyModel(params, schema, d_in)


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def point_features(cloud: PointCloud, knn: int = 16,
                   use_normals: bool = False) -> np.ndarray:
    """Per-point input: coordinates, optional normal, and the mean offset
    to the k nearest neighbors."""
    pts = cloud.points
    k = min(knn, pts.shape[0] - 1)
    if k >= 1:
        tree = cKDTree(pts)
        _, nbr = tree.query(pts, k=k + 1)
        context = pts[nbr[:, 1:]].mean(axis=1) - pts
    else:
        context = np.zeros_like(pts)
    cols = [pts]
    if use_normals:
        if cloud.normals is None:
            cols.append(np.zeros_like(pts))
        else:
            cols.append(cloud.normals)
    cols.append(context)
    return np.hstack(cols)


def forward(model: ToyModel, features: np.ndarray):
    """MLP forward pass; returns (LogitsField, cache for backward)."""
    p = model.params
    z1 = features @ p["w1"] + p["b1"]
    h1 = _softplus(z1)
    z2 = h1 @ p["w2"] + p["b2"]
    h2 = _softplus(z2)
    logits = tuple(
        h2 @ p[f"head_w{k}"] + p[f"head_b{k}"]
        for k in range(1, model.schema.level_count + 1)
    )
    cache = (features, z1, h1, z2, h2)
    return LogitsField(logits), cache


def forward_cloud(model: ToyModel, cloud: PointCloud, knn: int = 16,
                  use_normals: bool = False):
    return forward(model, point_features(cloud, knn, use_normals))


def backward(model: ToyModel, cache, grad_logits) -> dict:
    """Exact chain rule from per-level logit gradients to parameter
    gradients."""
    feats, z1, h1, z2, h2 = cache
    p = model.params
    grads = {}
    dh2 = np.zeros_like(h2)
    for k, g in enumerate(grad_logits, start=1):
        grads[f"head_w{k}"] = h2.T @ g
        grads[f"head_b{k}"] = g.sum(axis=0)
        dh2 += g @ p[f"head_w{k}"].T
    dz2 = dh2 * _sigmoid(z2)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ p["w2"].T
    dz1 = dh1 * _sigmoid(z1)
    grads["w1"] = feats.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def predict(model: ToyModel, cloud: PointCloud, knn: int = 16,
            use_normals: bool = False):
    """Argmax labels per level for an unperturbed cloud."""
    logits, _ = forward_cloud(model, cloud, knn, use_normals)
    return [mat.argmax(axis=1) for mat in logits.levels]


# ---------------------------------------------------------------------------
# Batch construction

def build_batch(labeled: list, synthetic: list, unlabeled: list,
                config: TrainConfig, rng: np.random.Generator) -> list:
    """(shape, is_labeled) slots: half labeled (half of those synthetic
    when available), half unlabeled.  Pools are sampled with replacement;
    with no unlabeled data the whole batch is labeled."""
    if not labeled:
        raise EmptyLabeledPool("labeled pool is empty")
    half = config.batch_size // 2
    batch = []
    n_synth = half // 2 if synthetic else 0
    for _ in range(n_synth):
        batch.append((synthetic[int(rng.integers(len(synthetic)))], True))
    for _ in range(half - n_synth):
        batch.append((labeled[int(rng.integers(len(labeled)))], True))
    for _ in range(half):
        if unlabeled:
            batch.append((unlabeled[int(rng.integers(len(unlabeled)))], False))
        else:
            batch.append((labeled[int(rng.integers(len(labeled)))], True))
    return batch


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainData:
    labeled: list
    unlabeled: list
    test: list
    synthetic: list = field(default_factory=list)

    @property
    def schema(self) -> LabelSchema:
        return self.labeled[0].schema


def evaluate(model: ToyModel, shapes: list, config: TrainConfig) -> list:
    """Per-level s-mIoU over a shape list."""
    from mlcseg.metrics import s_miou

    schema = shapes[0].schema
    preds = [
        predict(model, s.cloud, config.knn, config.use_normals) for s in shapes
    ]
    out = []
    for k in range(1, schema.level_count + 1):
        out.append(s_miou(
            [p[k - 1] for p in preds],
            [s.labels.at(k) for s in shapes],
            schema.labels_per_level[k - 1],
        ))
    return out


def train(config: TrainConfig, data: TrainData, log_lines: list = None):
    """Run the full loop; returns the trained model.

    Appends one text line per iteration (iter, lr, loss terms) plus
    periodic evaluation lines to ``log_lines`` when given.  Fully
    deterministic for a fixed config and seed.
    """
    schema = data.schema
    d_in = 9 if config.use_normals else 6
    model = init_model(schema, d_in, config.seed)
    bs = config.batch_size
    for it in range(config.max_iters):
        lr = config.lr_at(it)
        batch = build_batch(
            data.labeled, data.synthetic, data.unlabeled, config,
            substream(config.seed, "batch", it),
        )
        acc = {name: np.zeros_like(arr) for name, arr in model.params.items()}
        terms = np.zeros(5)
        for slot, (shape, is_labeled) in enumerate(batch):
            pair = make_pair(
                shape.cloud, config.perturb,
                substream(config.seed, "perturb", it, slot),
            )
            logits_a, cache_a = forward_cloud(
                model, pair.copy_a, config.knn, config.use_normals
            )
            logits_b, cache_b = forward_cloud(
                model, pair.copy_b, config.knn, config.use_normals
            )
            weights = replace(
                config.weights,
                gamma=config.weights.gamma if is_labeled else 0.0,
            )
            report = total_loss(
                logits_a, logits_b,
                shape.labels if is_labeled else None,
                schema, pair.corr, weights,
            )
            terms += (report.seg, report.point, report.part,
                      report.hier, report.total)
            for grads in (
                backward(model, cache_a, report.grad_a),
                backward(model, cache_b, report.grad_b),
            ):
                for name, g in grads.items():
                    acc[name] += g
        for name in model.params:
            model.params[name] -= (lr / bs) * acc[name]
        if log_lines is not None:
            seg, point, part, hier, tot = terms / bs
            log_lines.append(
                f"iter {it} lr {lr:.6g} L_seg {seg:.6g} L_point {point:.6g} "
                f"L_part {part:.6g} L_h {hier:.6g} L_tc {tot:.6g}"
            )
        if (config.eval_every and (it + 1) % config.eval_every == 0
                and data.test and log_lines is not None):
            mious = evaluate(model, data.test, config)
            log_lines.append(
                "eval iter {} s-mIoU {}".format(
                    it, " ".join(f"{m:.2f}" for m in mious)
                )
            )
    return model


def save_checkpoint(path, model: ToyModel) -> None:
    from mlcseg import fileio

    arrays = dict(model.params)
    arrays["_meta"] = np.array(
        [model.d_in, model.schema.level_count]
        + list(model.schema.labels_per_level),
        dtype=np.float64,
    )
    fileio.write_arrays(path, arrays)


def load_checkpoint(path, schema: LabelSchema) -> ToyModel:
    from mlcseg import fileio

    arrays = fileio.parse_arrays(path)
    meta = arrays.pop("_meta")
    return ToyModel(arrays, schema, int(meta[0]))
