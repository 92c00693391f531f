"""Command-line surface tying the modules together.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure (gradcheck over tolerance).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

import mlcseg
from mlcseg import fileio, gradcheck, metrics, partsub, synth, trainer
from mlcseg.core import Correspondence, UNLABELED
from mlcseg.errors import MlcsegError
from mlcseg.losses import LossWeights, total_loss
from mlcseg.perturb import PerturbParams, make_pair
from mlcseg.streams import substream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config plumbing

def _cfg_float(cfg, key, default):
    return float(cfg.get(key, default))


def _cfg_int(cfg, key, default):
    return int(cfg.get(key, default))


def perturb_from_config(cfg: dict, seed: int) -> PerturbParams:
    return PerturbParams(
        scale_range=(_cfg_float(cfg, "perturb.scale_min", 0.75),
                     _cfg_float(cfg, "perturb.scale_max", 1.25)),
        max_rotation_deg=_cfg_float(cfg, "perturb.rotation_deg", 10.0),
        translation_range=(_cfg_float(cfg, "perturb.translate_min", -0.25),
                           _cfg_float(cfg, "perturb.translate_max", 0.25)),
        seed=seed,
    )


def subst_from_config(cfg: dict, seed: int) -> partsub.SubstitutionParams:
    return partsub.SubstitutionParams(
        theta_default=_cfg_float(cfg, "subst.theta", 0.5),
        overlap_epsilon=_cfg_float(cfg, "subst.overlap_epsilon", 0.02),
        seed=seed,
    )


def weights_from_config(cfg: dict) -> LossWeights:
    return LossWeights(
        gamma=_cfg_float(cfg, "loss.gamma", 1.0),
        lambda_point=_cfg_float(cfg, "loss.lambda_point", 0.01),
        lambda_part=_cfg_float(cfg, "loss.lambda_part", 0.01),
        lambda_hier=_cfg_float(cfg, "loss.lambda_h", 0.01),
    )


def train_config_from_config(cfg: dict, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        batch_size=_cfg_int(cfg, "train.batch_size", 16),
        max_iters=_cfg_int(cfg, "train.max_iters", 80000),
        lr=_cfg_float(cfg, "train.lr", 0.1),
        weights=weights_from_config(cfg),
        perturb=perturb_from_config(cfg, seed),
        aug_count=_cfg_int(cfg, "train.aug_count", 0),
        knn=_cfg_int(cfg, "train.knn", 16),
        use_normals=cfg.get("train.use_normals", "0") in ("1", "true", "yes"),
        eval_every=_cfg_int(cfg, "train.eval_every", 0),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Subcommands

def cmd_version(args, cfg, seed):
    print(f"mlcseg {mlcseg.__version__}")
    return EXIT_OK


def cmd_gen_data(args, cfg, seed):
    if args.spec_file:
        spec = synth.parse_category_spec(args.spec_file)
        if args.points:
            spec = synth.CategorySpec(
                spec.name, spec.coarse_parts, spec.parts, spec.choices,
                args.points,
            )
    else:
        spec = synth.BUILTIN_SPECS[args.category](args.points or 2048)
    synth.generate_dataset(
        spec, args.train, args.test, args.labeled_fraction, seed, args.out
    )
    print(f"wrote {args.train + args.test} shapes to {args.out}")
    return EXIT_OK


def cmd_augment(args, cfg, seed):
    manifest_path = Path(args.manifest)
    manifest = fileio.parse_manifest(manifest_path)
    base = manifest_path.parent
    pool = [
        fileio.parse_labeled_cloud(base / p)
        for p in manifest.paths(split="train", labeled=True)
    ]
    params = subst_from_config(cfg, seed)
    shapes = partsub.augment_pool(pool, args.count, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_schema(out / "augmented.schema", pool[0].schema)
    for i, shape in enumerate(shapes):
        fileio.write_labeled_cloud(
            out / f"synth_{i:04d}.cloud", shape, "augmented.schema"
        )
    print(f"wrote {len(shapes)} synthesized shapes to {out}")
    return EXIT_OK


def cmd_perturb(args, cfg, seed):
    shape = fileio.parse_labeled_cloud(args.input)
    params = perturb_from_config(cfg, seed)
    pair = make_pair(shape.cloud, params, substream(seed, "perturb"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_schema(out / "pair.schema", shape.schema)
    for name, copy, keep in (("a", pair.copy_a, pair.keep_a),
                             ("b", pair.copy_b, pair.keep_b)):
        labels = mlcseg.HierLabels(tuple(
            arr[keep] for arr in shape.labels.levels
        ))
        fileio.write_labeled_cloud(
            out / f"copy_{name}.cloud",
            mlcseg.LabeledCloud(copy, labels, shape.schema),
            "pair.schema",
        )
    rows = [
        f"{o} {a} {b}"
        for o, a, b in zip(pair.corr.orig, pair.corr.rows_a, pair.corr.rows_b)
    ]
    (out / "correspondence.txt").write_text("\n".join(rows) + "\n")
    print(f"kept {pair.copy_a.n}/{shape.n} and {pair.copy_b.n}/{shape.n} "
          f"points; correspondence size {len(pair.corr)}")
    return EXIT_OK


def cmd_loss(args, cfg, seed):
    shape = fileio.parse_labeled_cloud(args.cloud)
    logits_a = fileio.parse_logits(args.logits_a)
    logits_b = fileio.parse_logits(args.logits_b)
    if logits_a.n != shape.n or logits_b.n != shape.n:
        raise MlcsegError("logits row count does not match cloud size")
    weights = weights_from_config(cfg)
    fine = shape.labels.at(shape.labels.level_count)
    labeled = bool(np.any(fine != UNLABELED)) and weights.gamma > 0
    report = total_loss(
        logits_a, logits_b,
        shape.labels if labeled else None,
        shape.schema, Correspondence.identity(shape.n),
        weights if labeled else LossWeights(
            0.0, weights.lambda_point, weights.lambda_part, weights.lambda_hier
        ),
    )
    print(f"L_seg {report.seg:.9g}")
    print(f"L_point {report.point:.9g}")
    print(f"L_part {report.part:.9g}")
    print(f"L_h {report.hier:.9g}")
    print(f"L_tc {report.total:.9g}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, seed):
    results = gradcheck.run_suite(args.trials, seed, args.tolerance)
    failed = False
    for term, worst in results.items():
        status = "ok" if worst <= args.tolerance else "FAIL"
        print(f"{term}: max relative error {worst:.3e} [{status}]")
        failed |= worst > args.tolerance
    return EXIT_NUMERIC if failed else EXIT_OK


def _load_dataset(manifest_path) -> trainer.TrainData:
    manifest_path = Path(manifest_path)
    manifest = fileio.parse_manifest(manifest_path)
    base = manifest_path.parent
    load = lambda p: fileio.parse_labeled_cloud(base / p)
    return trainer.TrainData(
        labeled=[load(p) for p in manifest.paths("train", labeled=True)],
        unlabeled=[load(p) for p in manifest.paths("train", labeled=False)],
        test=[load(p) for p in manifest.paths("test")],
    )


def cmd_train(args, cfg, seed):
    config = train_config_from_config(cfg, seed)
    if args.iters is not None:
        config.max_iters = args.iters
    data = _load_dataset(args.manifest)
    if config.aug_count > 0:
        params = subst_from_config(cfg, seed)
        data.synthetic = partsub.augment_pool(
            data.labeled, config.aug_count, params
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_lines = []
    model = trainer.train(config, data, log_lines)
    if data.test:
        mious = trainer.evaluate(model, data.test, config)
        log_lines.append(
            "final s-mIoU " + " ".join(f"{m:.2f}" for m in mious)
        )
        print("final s-mIoU per level: "
              + " ".join(f"{m:.1f}" for m in mious))
    trainer.save_checkpoint(out / "checkpoint.txt", model)
    (out / "train.log").write_text("\n".join(log_lines) + "\n")
    return EXIT_OK


def cmd_eval(args, cfg, seed):
    manifest_path = Path(args.manifest)
    manifest = fileio.parse_manifest(manifest_path)
    base = manifest_path.parent
    pred_dir = Path(args.pred_dir)
    gts = []
    preds = []
    schema = None
    for p in manifest.paths("test"):
        gt = fileio.parse_labeled_cloud(base / p)
        pred = fileio.parse_labeled_cloud(pred_dir / Path(p).name,
                                          schema=gt.schema)
        schema = gt.schema
        gts.append(gt)
        preds.append(pred)
    if schema is None:
        raise MlcsegError("manifest has no test shapes")
    per_level = []
    for k in range(1, schema.level_count + 1):
        pred_k = [s.labels.at(k) for s in preds]
        gt_k = [s.labels.at(k) for s in gts]
        per_level.append((
            metrics.p_miou(pred_k, gt_k, schema.labels_per_level[k - 1]),
            metrics.s_miou(pred_k, gt_k, schema.labels_per_level[k - 1]),
        ))
    report = metrics.format_report(per_level)
    sys.stdout.write(report)
    if args.out:
        Path(args.out).write_text(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="mlcseg")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (1 = strict deterministic mode)")
    parser.add_argument("--config", type=str, default=None,
                        help="flat key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--category", choices=sorted(synth.BUILTIN_SPECS),
                   default="chair")
    p.add_argument("--spec-file", type=str, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--labeled-fraction", type=float, default=0.02)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("augment", help="synthesize shapes by part substitution")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("perturb", help="dump a perturbation pair")
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("loss", help="evaluate the total loss on given logits")
    p.add_argument("--cloud", type=str, required=True)
    p.add_argument("--logits-a", type=str, required=True)
    p.add_argument("--logits-b", type=str, required=True)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics on prediction files")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--pred-dir", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=cmd_version)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfg = {}
    if args.config:
        try:
            cfg = fileio.parse_config(args.config)
        except MlcsegError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    seed = args.seed if args.seed is not None else _cfg_int(cfg, "seed", 0)
    try:
        return args.func(args, cfg, seed)
    except MlcsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run_cli())
