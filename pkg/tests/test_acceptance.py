"""Acceptance gate: one test per criterion, each announcing a PASS/FAIL
line on the real stdout so the verdicts survive pytest's capture."""

import time

import numpy as np
import pytest

from mlcseg import fileio, gradcheck
from mlcseg.core import (
    Correspondence,
    HierLabels,
    LabelSchema,
    LabeledCloud,
    PointCloud,
    ProbField,
    coarsen_labels,
)
from mlcseg.losses import (
    LossWeights,
    confidences,
    hierarchical_consistency,
    merge_to_parent,
    part_consistency,
    point_consistency,
    pseudo_partition,
    seg_loss,
)
from mlcseg.metrics import flat_mious, p_miou, s_miou
from mlcseg.partsub import SubstitutionParams, augment_pool, mark_overlaps
from mlcseg.perturb import PerturbParams, make_pair, sample_transform
from mlcseg.streams import substream
from mlcseg.synth import chair_spec, generate_shape
from mlcseg.trainer import TrainConfig, TrainData, evaluate, save_checkpoint, train

from conftest import random_corr, random_labels, random_prob_field, random_schema
import oracles


@pytest.fixture
def announce(capfd):
    """One uncapturable verdict line per criterion, then the assertion."""

    def _announce(ok, number, name, detail):
        status = "PASS" if ok else "FAIL"
        with capfd.disabled():
            print(f"\nACCEPTANCE {number} ({name}): {status} — {detail}",
                  flush=True)
        assert ok, f"acceptance criterion {number} ({name}) failed: {detail}"

    return _announce


# ---------------------------------------------------------------------------
# 1. Gradient suite

def test_acceptance_1_gradient_suite(announce):
    t0 = time.time()
    results = gradcheck.run_suite(trials=50, seed=0)
    elapsed = time.time() - t0
    worst = max(results.values())
    ok = worst <= 1e-4 and elapsed < 60.0
    detail = ("worst rel err {:.2e} over 50 trials/term (tol 1e-4), "
              "{:.1f}s (budget 60s); per-term: {}").format(
        worst, elapsed,
        " ".join(f"{k}={v:.1e}" for k, v in results.items()))
    announce(ok, 1, "gradient suite", detail)


# ---------------------------------------------------------------------------
# 2. Oracle equivalence

def _numpy_overlap_oracle(points, fine, epsilon):
    """O(n^2) full-distance-matrix reference for overlap masking."""
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    diameter = d.max()
    labeled = fine != -1
    flagged = np.zeros(len(points), dtype=bool)
    for i in np.flatnonzero(labeled):
        other = labeled & (fine != fine[i])
        if other.any() and d[i, other].min() <= epsilon * diameter:
            flagged[i] = True
    return flagged


def test_acceptance_2_oracle_equivalence(announce):
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    trials = 100

    for _ in range(trials):
        schema = random_schema(rng)
        n = int(rng.integers(2, 15))
        p_a = random_prob_field(rng, schema, n)
        p_b = random_prob_field(rng, schema, n)
        corr = random_corr(rng, n)
        q = random_labels(rng, schema, n)
        while not np.any(q.at(schema.level_count)[corr.orig] != -1):
            q = random_labels(rng, schema, n)
        pa = [m.tolist() for m in p_a.levels]
        pb = [m.tolist() for m in p_b.levels]
        ra, rb = corr.rows_a.tolist(), corr.rows_b.tolist()

        # Three consistency losses (plus seg) against brute-force sums.
        v, _, _ = seg_loss(q, p_a, p_b, corr)
        worst = max(worst, abs(v - oracles.seg_oracle(
            [l.tolist() for l in q.levels], pa, pb,
            corr.orig.tolist(), ra, rb)))
        v, _, _ = point_consistency(p_a, p_b, corr)
        worst = max(worst, abs(v - oracles.point_oracle(pa, pb, ra, rb)))
        v, _, _ = part_consistency(p_a, p_b, corr)
        worst = max(worst, abs(v - oracles.part_oracle(pa, pb, ra, rb)))
        v, _, _ = hierarchical_consistency(p_a, p_b, schema, corr)
        worst = max(worst, abs(v - oracles.hier_oracle(
            pa, pb,
            [schema.parent_map(k).tolist()
             for k in range(2, schema.level_count + 1)],
            schema.labels_per_level, ra, rb)))

        # Pseudo-partition and BC/OC.
        part = pseudo_partition(p_a)
        for k in range(1, schema.level_count + 1):
            expected = [oracles.argmax_oracle(row) for row in pa[k - 1]]
            assert part.at(k).tolist() == expected
        level = int(rng.integers(1, schema.level_count + 1))
        label = int(rng.integers(schema.labels_per_level[level - 1]))
        bc, oc = confidences(part, p_a, level, label)
        exp_bc, exp_oc = oracles.bc_oc_oracle(
            part.at(level).tolist(), p_a.at(level)[:, label].tolist(), label)
        for got, expected in ((bc, exp_bc), (oc, exp_oc)):
            if expected is None:
                assert got is None
            else:
                worst = max(worst, abs(got - expected))

    # Metrics oracles.
    for _ in range(trials):
        n_labels = int(rng.integers(2, 6))
        n_shapes = int(rng.integers(1, 5))
        preds, gts = [], []
        for _ in range(n_shapes):
            n = int(rng.integers(3, 25))
            gt = rng.integers(0, n_labels, size=n)
            gt[rng.uniform(size=n) < 0.15] = -1
            pred = np.where(rng.uniform(size=n) < 0.6, gt,
                            rng.integers(0, n_labels, size=n))
            pred[pred == -1] = 0
            preds.append(pred)
            gts.append(gt)
        pl = [p.tolist() for p in preds]
        gl = [g.tolist() for g in gts]
        worst = max(worst, abs(
            p_miou(preds, gts, n_labels)
            - oracles.p_miou_oracle(pl, gl, n_labels)))
        worst = max(worst, abs(
            s_miou(preds, gts, n_labels)
            - oracles.s_miou_oracle(pl, gl, n_labels)))
        cats = [str(rng.integers(3)) for _ in range(n_shapes)]
        got = flat_mious(preds, gts, cats, n_labels)
        expected = oracles.flat_mious_oracle(pl, gl, cats, n_labels)
        worst = max(worst, abs(got[0] - expected[0]),
                    abs(got[1] - expected[1]))

    # Overlap masking.
    schema1 = LabelSchema((3,))
    for _ in range(trials):
        n = int(rng.integers(4, 40))
        pts = rng.uniform(-1, 1, size=(n, 3))
        labels = rng.integers(0, 3, size=n)
        labels[rng.uniform(size=n) < 0.1] = -1
        shape = LabeledCloud(PointCloud(pts), HierLabels((labels,)), schema1)
        params = SubstitutionParams(overlap_epsilon=float(rng.uniform(0.01, 0.3)))
        mask = mark_overlaps(shape, params)
        expected = _numpy_overlap_oracle(pts, labels, params.overlap_epsilon)
        assert mask.tolist() == expected.tolist()

    elapsed = time.time() - t0
    ok = worst <= 1e-9 and elapsed < 120.0
    announce(ok, 2, "oracle equivalence",
             f"worst abs deviation {worst:.2e} over {trials} instances/op "
             f"(tol 1e-9), {elapsed:.1f}s (budget 120s)")


# ---------------------------------------------------------------------------
# 3. Analytic anchors

def test_acceptance_3_analytic_anchors(announce):
    rng = np.random.default_rng(2)
    ok = True
    notes = []

    # Identical copies: point and part terms vanish exactly; the
    # hierarchical term vanishes exactly when the prediction is
    # hierarchy-consistent (coarse rows built as exact merges of fine rows).
    for _ in range(20):
        schema = random_schema(rng)
        n = int(rng.integers(2, 12))
        p = random_prob_field(rng, schema, n)
        corr = Correspondence.identity(n)
        v_point, _, _ = point_consistency(p, p, corr)
        v_part, _, _ = part_consistency(p, p, corr)
        ok &= v_point == 0.0 and v_part == 0.0
        if schema.level_count >= 2:
            levels = list(p.levels)
            for k in range(schema.level_count - 1, 0, -1):
                levels[k - 1] = merge_to_parent(levels[k], k + 1, schema)
            consistent = ProbField(tuple(levels))
            v_hier, _, _ = hierarchical_consistency(
                consistent, consistent, schema, corr)
            ok &= v_hier == 0.0
    notes.append("identical copies: L_point=L_part=0, "
                 "hierarchy-consistent L_h=0, all exact")

    # Uniform predictions: cross-entropy ln L per labeled point-level.
    worst_ce = 0.0
    for _ in range(20):
        schema = random_schema(rng)
        n = int(rng.integers(1, 10))
        p = ProbField(tuple(
            np.full((n, c), 1.0 / c) for c in schema.labels_per_level
        ))
        q = random_labels(rng, schema, n, unlabeled_fraction=0.0)
        v, _, _ = seg_loss(q, p, p, Correspondence.identity(n))
        expected = sum(np.log(c) for c in schema.labels_per_level)
        worst_ce = max(worst_ce, abs(v - expected))
    ok &= worst_ce <= 1e-12
    notes.append(f"uniform CE vs sum(ln L): {worst_ce:.1e} (tol 1e-12)")

    # Merge conservation.
    worst_mass = 0.0
    for _ in range(20):
        schema = random_schema(rng)
        if schema.level_count < 2:
            continue
        p = random_prob_field(rng, schema, 10)
        for k in range(2, schema.level_count + 1):
            merged = merge_to_parent(p, k, schema)
            worst_mass = max(worst_mass,
                             float(np.abs(merged.sum(axis=1) - 1.0).max()))
    ok &= worst_mass <= 1e-12
    notes.append(f"merge row-mass drift: {worst_mass:.1e} (tol 1e-12)")

    announce(ok, 3, "analytic anchors", "; ".join(notes))


# ---------------------------------------------------------------------------
# 4. Part-substitution validity

def test_acceptance_4_part_substitution_validity(announce):
    t0 = time.time()
    pool = [generate_shape(chair_spec(200), substream(4, "pool", i))
            for i in range(3)]
    params = SubstitutionParams(seed=4)
    shapes = augment_pool(pool, 1000, params)

    pool_fine = set()
    for s in pool:
        pool_fine.update(np.unique(s.labels.at(2)).tolist())

    ok = len(shapes) == 1000
    oracle_checked = 0
    for shape in shapes:
        shape.validate()  # raises on any invariant violation
        ok &= bool(np.all(np.abs(shape.cloud.points) <= 1.0 + 1e-9))
        got = set(np.unique(shape.labels.at(2)).tolist())
        ok &= got <= pool_fine | {-1}
        mask = mark_overlaps(shape, params)
        expected = _numpy_overlap_oracle(
            shape.cloud.points, shape.labels.at(2), params.overlap_epsilon)
        ok &= mask.tolist() == expected.tolist()
        oracle_checked += 1
    elapsed = time.time() - t0
    announce(ok, 4, "part-substitution validity",
             f"1000 shapes valid/contained/semantics-coherent; overlap "
             f"oracle exact on all {oracle_checked}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. Desk-scale ablation

ABLATE_POINTS = 128
ABLATE_ITERS = 5000
ABLATE_SEEDS = (0, 1, 2)
ABLATE_LAMBDA = 0.1
ABLATE_AUG = 50
ABLATE_PERTURB = PerturbParams(scale_range=(0.95, 1.05),
                               max_rotation_deg=10.0,
                               translation_range=(-0.05, 0.05))


def _ablation_seed(seed):
    from mlcseg.partsub import augment_pool as _augment

    spec = chair_spec(ABLATE_POINTS)
    train_shapes = [generate_shape(spec, substream(seed, "synth", "train", i))
                    for i in range(200)]
    test_shapes = [generate_shape(spec, substream(seed, "synth", "test", i))
                   for i in range(50)]
    labeled_idx = substream(seed, "split").choice(200, size=4, replace=False)
    picked = set(labeled_idx.tolist())
    labeled = [train_shapes[i] for i in labeled_idx]
    unlabeled = [s for i, s in enumerate(train_shapes) if i not in picked]
    synthetic = _augment(labeled, ABLATE_AUG, SubstitutionParams(seed=seed))

    lam = LossWeights(1.0, ABLATE_LAMBDA, ABLATE_LAMBDA, ABLATE_LAMBDA)
    sup = LossWeights(1.0, 0.0, 0.0, 0.0)
    configs = {
        "baseline": (sup, False, False),
        "consistency": (lam, True, False),
        "augment": (sup, False, True),
        "full": (lam, True, True),
    }
    scores = {}
    for name, (weights, use_unlab, use_synth) in configs.items():
        config = TrainConfig(batch_size=4, max_iters=ABLATE_ITERS, lr=0.2,
                             weights=weights, perturb=ABLATE_PERTURB,
                             knn=16, seed=seed)
        data = TrainData(labeled=labeled,
                         unlabeled=unlabeled if use_unlab else [],
                         test=test_shapes,
                         synthetic=synthetic if use_synth else [])
        model = train(config, data)
        scores[name] = evaluate(model, test_shapes, config)[-1]
    return scores


def test_acceptance_5_desk_scale_ablation(announce):
    t0 = time.time()
    per_seed = [_ablation_seed(s) for s in ABLATE_SEEDS]
    mean = {name: float(np.mean([s[name] for s in per_seed]))
            for name in per_seed[0]}
    elapsed = time.time() - t0

    d_cons = mean["consistency"] - mean["baseline"]
    d_aug = mean["augment"] - mean["baseline"]
    d_fc = mean["full"] - mean["consistency"]
    d_fa = mean["full"] - mean["augment"]
    ok_a = d_cons >= 2.0
    ok_b = d_aug >= 2.0
    ok_c = d_fc >= 0.0 and d_fa >= 0.0
    ok_t = elapsed <= 1800.0
    ok = ok_a and ok_b and ok_c and ok_t
    announce(ok, 5, "desk-scale ablation",
             "mean fine s-mIoU over 3 seeds: baseline {b:.2f}, "
             "consistency {c:.2f} ({dc:+.2f}, need >= +2.0), augment "
             "{a:.2f} ({da:+.2f}, need >= +2.0), full {f:.2f} "
             "(vs partials {fc:+.2f}/{fa:+.2f}, need >= 0); {t:.0f}s "
             "(budget 1800s)".format(
                 b=mean["baseline"], c=mean["consistency"], dc=d_cons,
                 a=mean["augment"], da=d_aug, f=mean["full"], fc=d_fc,
                 fa=d_fa, t=elapsed))


# ---------------------------------------------------------------------------
# 6. Determinism

def test_acceptance_6_determinism(announce, tmp_path):
    from mlcseg.cli import run_cli

    # Bit-identical checkpoints from two identical train runs.
    pool = [generate_shape(chair_spec(64), substream(6, "pool", i))
            for i in range(6)]
    data = TrainData(labeled=pool[:2], unlabeled=pool[2:5], test=pool[5:])
    config = TrainConfig(batch_size=4, max_iters=5, lr=0.1,
                         weights=LossWeights(1.0, 0.01, 0.01, 0.01),
                         perturb=PerturbParams(), knn=8, seed=6)
    for tag in ("a", "b"):
        save_checkpoint(tmp_path / f"ckpt_{tag}.txt", train(config, data))
    ckpt_ok = (tmp_path / "ckpt_a.txt").read_bytes() == \
        (tmp_path / "ckpt_b.txt").read_bytes()

    # Byte-identical gen-data and augment outputs.
    gen_args = ["--seed", "6", "gen-data", "--category", "chair",
                "--points", "48", "--train", "4", "--test", "1",
                "--labeled-fraction", "0.5", "--out"]
    assert run_cli(gen_args + [str(tmp_path / "g1")]) == 0
    assert run_cli(gen_args + [str(tmp_path / "g2")]) == 0
    gen_ok = all(
        (tmp_path / "g1" / f.name).read_bytes() == f.read_bytes()
        for f in (tmp_path / "g2").iterdir()
    )

    aug_args = ["--seed", "6", "augment", "--manifest",
                str(tmp_path / "g1" / "manifest.txt"), "--count", "4",
                "--out"]
    assert run_cli(aug_args + [str(tmp_path / "a1")]) == 0
    assert run_cli(aug_args + [str(tmp_path / "a2")]) == 0
    aug_ok = all(
        (tmp_path / "a1" / f.name).read_bytes() == f.read_bytes()
        for f in (tmp_path / "a2").iterdir()
    )

    ok = ckpt_ok and gen_ok and aug_ok
    announce(ok, 6, "determinism",
             f"checkpoint bit-identical={ckpt_ok}, gen-data "
             f"byte-identical={gen_ok}, augment byte-identical={aug_ok}")


# ---------------------------------------------------------------------------
# 7. Perturbation contract

def test_acceptance_7_perturbation_contract(announce):
    t0 = time.time()
    params = PerturbParams()
    rng = substream(7, "contract")
    bound = np.deg2rad(10.0)
    ok = True
    for _ in range(100000):
        t = sample_transform(params, rng)
        ok &= 0.75 <= t.scale <= 1.25
        ok &= bool(np.all(np.abs(t.translation) <= 0.25))
        if not ok:
            break
    # Rotation bound: per-axis angles are drawn in [-bound, bound], so the
    # rotation angle about any single axis never exceeds it; verify via the
    # factored draws on a fresh stream.
    rng2 = substream(7, "contract")
    draws_ok = True
    for _ in range(1000):
        rng2.uniform(*params.scale_range)
        for _ in range(3):
            angle = rng2.uniform(-bound, bound)
            draws_ok &= abs(angle) <= bound
        rng2.uniform(params.translation_range[0],
                     params.translation_range[1], size=3)
    ok &= draws_ok

    # Clip soundness over full pairs.
    cloud_rng = np.random.default_rng(7)
    clip_ok = True
    for i in range(200):
        pts = cloud_rng.uniform(-1, 1, size=(100, 3))
        pts /= np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1.0)
        pair = make_pair(PointCloud(pts), params, substream(7, "pair", i))
        for copy in (pair.copy_a, pair.copy_b):
            clip_ok &= bool(np.all(copy.points >= -1.0)
                            and np.all(copy.points <= 1.0))
    ok &= clip_ok
    elapsed = time.time() - t0
    announce(ok, 7, "perturbation contract",
             f"1e5 transforms in range, angle draws bounded, clip sound on "
             f"200 pairs; {elapsed:.1f}s")
