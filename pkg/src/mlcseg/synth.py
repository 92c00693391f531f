"""Procedural generator of labeled synthetic shapes with a 2-level part
hierarchy (chair-like, table-like, lamp-like, or user-supplied specs).

Each fine part is an axis-aligned box sampled on its surface; structural
variation comes from per-shape part existence, count choices (e.g. 2-4
legs), and dimension ranges.  Shapes are unit-sphere normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mlcseg.core import (
    HierLabels,
    LabelSchema,
    LabeledCloud,
    PointCloud,
    coarsen_labels,
    normalize_to_unit_sphere,
)
from mlcseg.errors import InvalidFraction, InvalidSpec
from mlcseg.streams import substream


@dataclass(frozen=True)
class PartSpec:
    """One box-shaped fine part: center/size ranges per axis (x, y, z;
    y is up), its coarse parent, and an independent existence probability
    (ignored for parts governed by a ChoiceSpec)."""

    name: str
    coarse: str
    center: tuple  # 3 (lo, hi) pairs
    size: tuple  # 3 (lo, hi) pairs
    presence: float = 1.0


@dataclass(frozen=True)
class ChoiceSpec:
    """Pick how many of ``members`` exist: counts drawn from
    ``count_probs``; the first ``count`` members (declaration order) are
    kept."""

    name: str
    members: tuple
    count_probs: dict


@dataclass(frozen=True)
class CategorySpec:
    name: str
    coarse_parts: tuple
    parts: tuple
    choices: tuple = ()
    points_per_shape: int = 2048


def validate_spec(spec: CategorySpec) -> None:
    if spec.points_per_shape < 1:
        raise InvalidSpec("points_per_shape must be >= 1")
    if not spec.coarse_parts or not spec.parts:
        raise InvalidSpec("spec needs at least one coarse and one fine part")
    names = [p.name for p in spec.parts]
    if len(set(names)) != len(names):
        raise InvalidSpec("duplicate fine part names")
    for p in spec.parts:
        if p.coarse not in spec.coarse_parts:
            raise InvalidSpec(f"part {p.name!r} references unknown coarse "
                              f"part {p.coarse!r}")
        if not 0.0 <= p.presence <= 1.0:
            raise InvalidSpec(f"part {p.name!r} has presence outside [0, 1]")
        for lo, hi in p.size:
            if lo < 0 or hi < lo:
                raise InvalidSpec(f"part {p.name!r} has a bad size range")
    choice_members = set()
    for c in spec.choices:
        probs = list(c.count_probs.values())
        if abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
            raise InvalidSpec(f"choice {c.name!r} probabilities must sum to 1")
        for m in c.members:
            if m not in names:
                raise InvalidSpec(f"choice {c.name!r} references unknown "
                                  f"part {m!r}")
            if m in choice_members:
                raise InvalidSpec(f"part {m!r} appears in two choices")
            choice_members.add(m)
        if max(c.count_probs) > len(c.members):
            raise InvalidSpec(f"choice {c.name!r} count exceeds member count")


def schema_from_spec(spec: CategorySpec) -> LabelSchema:
    coarse_ids = {name: i for i, name in enumerate(spec.coarse_parts)}
    parent = {i: coarse_ids[p.coarse] for i, p in enumerate(spec.parts)}
    return LabelSchema.from_parent_dicts(
        (len(spec.coarse_parts), len(spec.parts)),
        [parent],
        (tuple(spec.coarse_parts), tuple(p.name for p in spec.parts)),
    )


def _sample_box_surface(lo, hi, count, rng):
    """Uniform-by-area points on the surface of an axis-aligned box."""
    size = hi - lo
    # Face-pair areas for axes x, y, z.
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    face_w = np.repeat(areas, 2)
    if face_w.sum() == 0:
        face_w = np.ones(6)
    face_w = face_w / face_w.sum()
    faces = rng.choice(6, size=count, p=face_w)
    u = rng.uniform(size=(count, 3))
    pts = lo + u * size
    for f in range(6):
        axis, side = divmod(f, 2)
        mask = faces == f
        pts[mask, axis] = lo[axis] if side == 0 else hi[axis]
    return pts


def generate_shape(spec: CategorySpec, rng: np.random.Generator) -> LabeledCloud:
    """Sample one labeled shape from the category spec."""
    validate_spec(spec)
    schema = schema_from_spec(spec)

    present = {p.name: None for p in spec.parts}
    chosen = set()
    for choice in spec.choices:
        counts = sorted(choice.count_probs)
        probs = [choice.count_probs[c] for c in counts]
        count = int(rng.choice(counts, p=probs))
        for i, member in enumerate(choice.members):
            present[member] = i < count
            chosen.add(member)
    for p in spec.parts:
        if p.name in chosen:
            continue
        present[p.name] = p.presence >= 1.0 or rng.uniform() < p.presence

    boxes = []
    for fine_id, p in enumerate(spec.parts):
        if not present[p.name]:
            continue
        center = np.array([rng.uniform(lo, hi) for lo, hi in p.center])
        size = np.array([rng.uniform(lo, hi) for lo, hi in p.size])
        boxes.append((fine_id, center - size / 2, center + size / 2))
    if not boxes:
        raise InvalidSpec(f"spec {spec.name!r} produced a shape with no parts")

    areas = []
    for _, lo, hi in boxes:
        s = hi - lo
        areas.append(2 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2]))
    areas = np.asarray(areas)
    if areas.sum() == 0:
        areas = np.ones_like(areas)
    counts = np.maximum(1, np.floor(spec.points_per_shape * areas / areas.sum()))
    counts = counts.astype(int)
    # Fix rounding so counts sum exactly to the requested total.
    counts[int(np.argmax(counts))] += spec.points_per_shape - counts.sum()

    points = []
    fine_labels = []
    for (fine_id, lo, hi), count in zip(boxes, counts):
        points.append(_sample_box_surface(lo, hi, count, rng))
        fine_labels.append(np.full(count, fine_id, dtype=np.int64))
    pts = normalize_to_unit_sphere(np.vstack(points))
    labels = coarsen_labels(np.concatenate(fine_labels), schema)
    return LabeledCloud(PointCloud(pts), labels, schema)


@dataclass
class DatasetManifest:
    """Per-shape records: file path (relative to the manifest), split, and
    whether its labels may be used for supervision."""

    records: list = field(default_factory=list)  # (path, split, labeled)

    def paths(self, split=None, labeled=None):
        out = []
        for path, s, l in self.records:
            if split is not None and s != split:
                continue
            if labeled is not None and l != labeled:
                continue
            out.append(path)
        return out


def generate_dataset(spec: CategorySpec, n_train: int, n_test: int,
                     labeled_fraction: float, seed: int,
                     out_dir) -> DatasetManifest:
    """Generate train/test splits on disk and return the manifest.

    ceil(labeled_fraction * n_train) train shapes are flagged labeled; the
    rest keep their labels on disk but are flagged unlabeled so training
    must not consume them.
    """
    from pathlib import Path

    from mlcseg import fileio

    if not 0.0 < labeled_fraction <= 1.0:
        raise InvalidFraction("labeled_fraction must lie in (0, 1]")
    if n_train < 2:
        raise InvalidSpec("need at least 2 training shapes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = schema_from_spec(spec)
    schema_name = f"{spec.name}.schema"
    fileio.write_schema(out_dir / schema_name, schema)

    n_labeled = int(np.ceil(labeled_fraction * n_train))
    labeled_idx = set(
        substream(seed, "split").choice(n_train, size=n_labeled, replace=False)
    )

    manifest = DatasetManifest()
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            shape = generate_shape(spec, substream(seed, "synth", split, i))
            name = f"{spec.name}_{split}_{i:04d}.cloud"
            fileio.write_labeled_cloud(out_dir / name, shape, schema_name)
            labeled = split == "test" or i in labeled_idx
            manifest.records.append((name, split, labeled))
    fileio.write_manifest(out_dir / "manifest.txt", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Built-in category specs

def chair_spec(points_per_shape: int = 2048) -> CategorySpec:
    r = lambda lo, hi: (lo, hi)
    return CategorySpec(
        name="chair",
        coarse_parts=("back", "seat", "support"),
        parts=(
            PartSpec("back_panel", "back",
                     (r(-0.05, 0.05), r(0.30, 0.85), r(-0.62, -0.33)),
                     (r(0.55, 1.25), r(0.45, 1.25), r(0.04, 0.16))),
            PartSpec("seat_panel", "seat",
                     (r(-0.05, 0.05), r(-0.12, 0.12), r(-0.05, 0.05)),
                     (r(0.55, 1.25), r(0.06, 0.22), r(0.55, 1.25))),
            PartSpec("leg_fl", "support",
                     (r(-0.55, -0.28), r(-0.55, -0.28), r(0.28, 0.55)),
                     (r(0.04, 0.16), r(0.45, 1.05), r(0.04, 0.16))),
            PartSpec("leg_fr", "support",
                     (r(0.28, 0.55), r(-0.55, -0.28), r(0.28, 0.55)),
                     (r(0.04, 0.16), r(0.45, 1.05), r(0.04, 0.16))),
            PartSpec("leg_bl", "support",
                     (r(-0.55, -0.28), r(-0.55, -0.28), r(-0.55, -0.28)),
                     (r(0.04, 0.16), r(0.45, 1.05), r(0.04, 0.16))),
            PartSpec("leg_br", "support",
                     (r(0.28, 0.55), r(-0.55, -0.28), r(-0.55, -0.28)),
                     (r(0.04, 0.16), r(0.45, 1.05), r(0.04, 0.16))),
            PartSpec("stretcher_left", "support",
                     (r(-0.48, -0.32), r(-0.70, -0.40), r(-0.05, 0.05)),
                     (r(0.03, 0.10), r(0.03, 0.10), r(0.55, 1.05)),
                     presence=0.5),
            PartSpec("stretcher_right", "support",
                     (r(0.32, 0.48), r(-0.70, -0.40), r(-0.05, 0.05)),
                     (r(0.03, 0.10), r(0.03, 0.10), r(0.55, 1.05)),
                     presence=0.5),
        ),
        choices=(
            ChoiceSpec("legs", ("leg_fl", "leg_fr", "leg_bl", "leg_br"),
                       {2: 0.2, 3: 0.2, 4: 0.6}),
        ),
        points_per_shape=points_per_shape,
    )


def table_spec(points_per_shape: int = 2048) -> CategorySpec:
    r = lambda lo, hi: (lo, hi)
    return CategorySpec(
        name="table",
        coarse_parts=("top", "support"),
        parts=(
            PartSpec("top_panel", "top",
                     (r(-0.02, 0.02), r(0.38, 0.45), r(-0.02, 0.02)),
                     (r(1.00, 1.40), r(0.06, 0.12), r(0.70, 1.10))),
            PartSpec("leg_fl", "support",
                     (r(-0.55, -0.45), r(-0.05, 0.05), r(0.30, 0.40)),
                     (r(0.06, 0.12), r(0.75, 0.90), r(0.06, 0.12))),
            PartSpec("leg_fr", "support",
                     (r(0.45, 0.55), r(-0.05, 0.05), r(0.30, 0.40)),
                     (r(0.06, 0.12), r(0.75, 0.90), r(0.06, 0.12))),
            PartSpec("leg_bl", "support",
                     (r(-0.55, -0.45), r(-0.05, 0.05), r(-0.40, -0.30)),
                     (r(0.06, 0.12), r(0.75, 0.90), r(0.06, 0.12))),
            PartSpec("leg_br", "support",
                     (r(0.45, 0.55), r(-0.05, 0.05), r(-0.40, -0.30)),
                     (r(0.06, 0.12), r(0.75, 0.90), r(0.06, 0.12))),
            PartSpec("stretcher", "support",
                     (r(-0.02, 0.02), r(-0.30, -0.20), r(-0.02, 0.02)),
                     (r(0.90, 1.10), r(0.05, 0.08), r(0.05, 0.08)),
                     presence=0.4),
        ),
        choices=(
            ChoiceSpec("legs", ("leg_fl", "leg_fr", "leg_bl", "leg_br"),
                       {2: 0.1, 3: 0.1, 4: 0.8}),
        ),
        points_per_shape=points_per_shape,
    )


def lamp_spec(points_per_shape: int = 2048) -> CategorySpec:
    r = lambda lo, hi: (lo, hi)
    return CategorySpec(
        name="lamp",
        coarse_parts=("base", "pole", "shade"),
        parts=(
            PartSpec("base_slab", "base",
                     (r(-0.02, 0.02), r(-0.62, -0.55), r(-0.02, 0.02)),
                     (r(0.35, 0.60), r(0.04, 0.10), r(0.35, 0.60))),
            PartSpec("pole_lower", "pole",
                     (r(-0.02, 0.02), r(-0.30, -0.20), r(-0.02, 0.02)),
                     (r(0.04, 0.08), r(0.50, 0.70), r(0.04, 0.08))),
            PartSpec("pole_upper", "pole",
                     (r(-0.02, 0.02), r(0.15, 0.25), r(-0.02, 0.02)),
                     (r(0.04, 0.08), r(0.30, 0.50), r(0.04, 0.08)),
                     presence=0.6),
            PartSpec("shade_body", "shade",
                     (r(-0.02, 0.02), r(0.50, 0.62), r(-0.02, 0.02)),
                     (r(0.30, 0.55), r(0.20, 0.35), r(0.30, 0.55))),
        ),
        points_per_shape=points_per_shape,
    )


BUILTIN_SPECS = {
    "chair": chair_spec,
    "table": table_spec,
    "lamp": lamp_spec,
}


# ---------------------------------------------------------------------------
# User-supplied category spec files

def parse_category_spec(path) -> CategorySpec:
    """Parse a text category spec.

    Lines: ``category <name>``, ``points <n>``, ``coarse <names...>``,
    ``part <name> <coarse> [presence=p] cx=lo,hi cy=... cz=... sx=... sy=...
    sz=...``, and ``choice <name> counts=c:p,... members=a,b,...``.
    """
    from mlcseg.errors import FormatError

    name = None
    points = 2048
    coarse = ()
    parts = []
    choices = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                head = tokens[0]
                if head == "category":
                    name = tokens[1]
                elif head == "points":
                    points = int(tokens[1])
                elif head == "coarse":
                    coarse = tuple(tokens[1:])
                elif head == "part":
                    kv = dict(t.split("=", 1) for t in tokens[3:])
                    presence = float(kv.pop("presence", "1.0"))
                    rng_of = lambda key: tuple(float(v) for v in kv[key].split(","))
                    parts.append(PartSpec(
                        tokens[1], tokens[2],
                        (rng_of("cx"), rng_of("cy"), rng_of("cz")),
                        (rng_of("sx"), rng_of("sy"), rng_of("sz")),
                        presence,
                    ))
                elif head == "choice":
                    kv = dict(t.split("=", 1) for t in tokens[2:])
                    count_probs = {}
                    for item in kv["counts"].split(","):
                        c, p = item.split(":")
                        count_probs[int(c)] = float(p)
                    choices.append(ChoiceSpec(
                        tokens[1], tuple(kv["members"].split(",")), count_probs
                    ))
                else:
                    raise ValueError(f"unknown directive {head!r}")
            except (IndexError, KeyError, ValueError) as exc:
                raise FormatError(path, lineno, str(exc)) from exc
    if name is None:
        raise InvalidSpec(f"{path}: missing 'category' line")
    spec = CategorySpec(name, coarse, tuple(parts), tuple(choices), points)
    validate_spec(spec)
    return spec
