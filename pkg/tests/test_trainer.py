import numpy as np
import pytest

from mlcseg.core import LabelSchema
from mlcseg.errors import EmptyLabeledPool
from mlcseg.losses import LogitsField, LossWeights
from mlcseg.perturb import PerturbParams
from mlcseg.streams import substream
from mlcseg.synth import chair_spec, generate_shape, schema_from_spec
from mlcseg.trainer import (
    TrainConfig,
    TrainData,
    backward,
    build_batch,
    evaluate,
    forward,
    forward_cloud,
    init_model,
    load_checkpoint,
    point_features,
    predict,
    save_checkpoint,
    train,
)


def small_pool(count, points=64, seed=0):
    spec = chair_spec(points)
    return [generate_shape(spec, substream(seed, "pool", i))
            for i in range(count)]


def small_config(**kw):
    defaults = dict(
        batch_size=4,
        max_iters=3,
        lr=0.1,
        weights=LossWeights(1.0, 0.01, 0.01, 0.01),
        perturb=PerturbParams(),
        knn=8,
        seed=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# Config

def test_batch_size_must_be_even():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=5)


def test_lr_schedule_decays_at_half_and_three_quarters():
    config = TrainConfig(batch_size=2, max_iters=80000, lr=0.1)
    assert config.lr_at(0) == 0.1
    assert config.lr_at(39999) == 0.1
    assert config.lr_at(40000) == pytest.approx(0.01)
    assert config.lr_at(59999) == pytest.approx(0.01)
    assert config.lr_at(60000) == pytest.approx(0.001)
    assert config.lr_at(79999) == pytest.approx(0.001)


# ---------------------------------------------------------------------------
# Model forward/backward

def test_forward_shapes_match_schema():
    schema = LabelSchema((3, 6), (np.array([0, 0, 1, 1, 2, 2]),))
    model = init_model(schema, d_in=6, seed=0)
    feats = np.random.default_rng(0).normal(size=(10, 6))
    logits, _ = forward(model, feats)
    assert logits.at(1).shape == (10, 3)
    assert logits.at(2).shape == (10, 6)
    assert all(np.all(np.isfinite(m)) for m in logits.levels)


def test_init_model_deterministic():
    schema = LabelSchema((2,))
    a = init_model(schema, 6, seed=3)
    b = init_model(schema, 6, seed=3)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_point_features_mean_offset():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    from mlcseg.core import PointCloud

    feats = point_features(PointCloud(pts), knn=2)
    assert feats.shape == (3, 6)
    # Neighbors of the middle point are its two ends: mean offset 0.
    assert np.allclose(feats[1, 3:], [0.0, 0.0, 0.0])
    # Neighbors of the first point: (1,0,0) and (2,0,0) -> mean offset 1.5.
    assert np.allclose(feats[0, 3:], [1.5, 0.0, 0.0])


def test_zero_upstream_gives_zero_param_gradient():
    schema = LabelSchema((2, 4), (np.array([0, 0, 1, 1]),))
    model = init_model(schema, 6, seed=1)
    feats = np.random.default_rng(1).normal(size=(5, 6))
    _, cache = forward(model, feats)
    grads = backward(model, cache, [np.zeros((5, 2)), np.zeros((5, 4))])
    assert all(np.allclose(g, 0.0) for g in grads.values())


def test_backward_linear_in_upstream():
    schema = LabelSchema((3,))
    model = init_model(schema, 6, seed=2)
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(6, 6))
    _, cache = forward(model, feats)
    g1 = [rng.normal(size=(6, 3))]
    g2 = [rng.normal(size=(6, 3))]
    grads_sum = backward(model, cache, [g1[0] + g2[0]])
    grads_1 = backward(model, cache, g1)
    grads_2 = backward(model, cache, g2)
    for name in grads_sum:
        assert np.allclose(grads_sum[name], grads_1[name] + grads_2[name],
                           atol=1e-12)


# ---------------------------------------------------------------------------
# Batch construction

def test_build_batch_requires_labeled_pool():
    with pytest.raises(EmptyLabeledPool):
        build_batch([], [], [], small_config(), substream(0, "b"))


def test_build_batch_degenerate_pools_all_labeled():
    pool = small_pool(2)
    batch = build_batch(pool, [], [], small_config(batch_size=8),
                        substream(0, "b"))
    assert len(batch) == 8
    assert all(is_labeled for _, is_labeled in batch)


def test_build_batch_synthetic_split():
    labeled = small_pool(3)
    synthetic = small_pool(2, seed=1)
    unlabeled = small_pool(2, seed=2)
    batch = build_batch(labeled, synthetic, unlabeled,
                        small_config(batch_size=16), substream(0, "b"))
    assert len(batch) == 16
    flags = [is_labeled for _, is_labeled in batch]
    assert sum(flags) == 8
    synth_ids = {id(s) for s in synthetic}
    n_synth = sum(1 for shape, _ in batch if id(shape) in synth_ids)
    assert n_synth == 4


def test_build_batch_deterministic():
    pool = small_pool(3)
    unlabeled = small_pool(2, seed=4)
    b1 = build_batch(pool, [], unlabeled, small_config(), substream(5, "b"))
    b2 = build_batch(pool, [], unlabeled, small_config(), substream(5, "b"))
    assert [id(s) for s, _ in b1] == [id(s) for s, _ in b2]


# ---------------------------------------------------------------------------
# Training loop

def data_from_pool(pool, n_labeled, n_test):
    return TrainData(
        labeled=pool[:n_labeled],
        unlabeled=pool[n_labeled:len(pool) - n_test],
        test=pool[len(pool) - n_test:],
    )


def test_zero_iters_returns_initial_model():
    pool = small_pool(3)
    data = data_from_pool(pool, 2, 1)
    config = small_config(max_iters=0)
    model = train(config, data)
    reference = init_model(data.schema, 6, config.seed)
    for name in model.params:
        assert np.array_equal(model.params[name], reference.params[name])


def test_train_deterministic_bit_exact():
    pool = small_pool(4, points=48)
    data = data_from_pool(pool, 2, 1)
    config = small_config(max_iters=3)
    m1 = train(config, data)
    m2 = train(config, data)
    for name in m1.params:
        assert np.array_equal(m1.params[name], m2.params[name])


def test_train_log_lines():
    pool = small_pool(3, points=48)
    data = data_from_pool(pool, 2, 1)
    log = []
    train(small_config(max_iters=2, eval_every=1), data, log)
    iter_lines = [l for l in log if l.startswith("iter ")]
    eval_lines = [l for l in log if l.startswith("eval ")]
    assert len(iter_lines) == 2
    assert len(eval_lines) == 2
    assert "L_tc" in iter_lines[0]


def test_supervised_loss_decreases():
    """Supervised-only training on a tiny set: the 50-iteration moving
    average of the loss trends downward (tiny upticks from batch noise
    are tolerated)."""
    pool = small_pool(3, points=48, seed=7)
    data = TrainData(labeled=pool, unlabeled=[], test=[])
    config = small_config(
        max_iters=200,
        weights=LossWeights(1.0, 0.0, 0.0, 0.0),
        perturb=PerturbParams(scale_range=(0.95, 1.05), max_rotation_deg=3.0,
                              translation_range=(-0.05, 0.05)),
    )
    log = []
    train(config, data, log)
    losses = np.array([
        float(line.split("L_tc ")[1]) for line in log
        if line.startswith("iter ")
    ])
    window = 50
    moving = np.convolve(losses, np.ones(window) / window, mode="valid")
    assert moving[-1] < 0.7 * moving[0]
    assert np.all(np.diff(moving) <= 0.02 * moving[0])


def test_evaluate_returns_per_level_scores():
    pool = small_pool(2, points=32)
    config = small_config(max_iters=1)
    data = data_from_pool(pool, 1, 1)
    model = train(config, data)
    mious = evaluate(model, data.test, config)
    assert len(mious) == 2
    assert all(0.0 <= m <= 100.0 for m in mious)


# ---------------------------------------------------------------------------
# Checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    pool = small_pool(3, points=48)
    data = data_from_pool(pool, 2, 1)
    model = train(small_config(max_iters=2), data)
    path = tmp_path / "ckpt.txt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path, data.schema)
    assert loaded.d_in == model.d_in
    for name in model.params:
        assert np.array_equal(loaded.params[name], model.params[name])
    # Identical predictions after reload.
    cloud = data.test[0].cloud
    p1 = predict(model, cloud, knn=8)
    p2 = predict(loaded, cloud, knn=8)
    for a, b in zip(p1, p2):
        assert np.array_equal(a, b)
