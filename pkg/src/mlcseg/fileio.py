"""Text file formats: labeled clouds, schemas, manifests, logits, named
parameter dumps, and flat key=value configs.

All files are UTF-8 with LF line endings.  Floats in cloud files are
serialized with 9 significant digits so regenerated files are
byte-stable; parameter dumps use 17 significant digits so checkpoints
round-trip bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from mlcseg.core import (
    HierLabels,
    LabelSchema,
    LabeledCloud,
    PointCloud,
    validate_hier_labels,
    validate_schema,
)
from mlcseg.errors import FormatError, SchemaMismatch


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def _data_lines(path):
    """Yield (lineno, stripped-line) for content lines; '#' starts a
    comment except in the recognized header directives."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            yield lineno, line


# ---------------------------------------------------------------------------
# Schema files

def write_schema(path, schema: LabelSchema) -> None:
    validate_schema(schema)
    lines = [f"levels {schema.level_count}"]
    for k in range(1, schema.level_count + 1):
        count = schema.labels_per_level[k - 1]
        names = ""
        if schema.level_names is not None:
            names = " " + " ".join(schema.level_names[k - 1])
        lines.append(f"level {k} {count}{names}")
        if k >= 2:
            for child, parent in enumerate(schema.parent_map(k)):
                lines.append(f"parent {child} {int(parent)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_schema(path) -> LabelSchema:
    level_count = None
    counts = {}
    names = {}
    parents = {}
    current_level = None
    for lineno, line in _data_lines(path):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            if tokens[0] == "levels":
                level_count = int(tokens[1])
            elif tokens[0] == "level":
                current_level = int(tokens[1])
                counts[current_level] = int(tokens[2])
                if len(tokens) > 3:
                    names[current_level] = tuple(tokens[3:])
                parents.setdefault(current_level, {})
            elif tokens[0] == "parent":
                if current_level is None or current_level < 2:
                    raise ValueError("parent line outside a level >= 2 block")
                parents[current_level][int(tokens[1])] = int(tokens[2])
            else:
                raise ValueError(f"unknown directive {tokens[0]!r}")
        except (IndexError, ValueError) as exc:
            raise FormatError(path, lineno, str(exc)) from exc
    if level_count is None or set(counts) != set(range(1, level_count + 1)):
        raise FormatError(path, 0, "incomplete level declarations")
    labels_per_level = tuple(counts[k] for k in range(1, level_count + 1))
    level_names = None
    if len(names) == level_count:
        level_names = tuple(names[k] for k in range(1, level_count + 1))
    schema = LabelSchema.from_parent_dicts(
        labels_per_level,
        [parents.get(k, {}) for k in range(2, level_count + 1)],
        level_names,
    )
    validate_schema(schema)
    return schema


# ---------------------------------------------------------------------------
# Labeled cloud files

def write_labeled_cloud(path, shape: LabeledCloud, schema_ref: str) -> None:
    """Write ``x y z [nx ny nz] l1 .. lK`` rows after the two header lines.

    ``schema_ref`` is recorded verbatim in the ``#schema`` header and is
    interpreted relative to the cloud file on read.
    """
    cloud = shape.cloud
    rows = []
    for i in range(cloud.n):
        cols = [_fmt(v) for v in cloud.points[i]]
        if cloud.normals is not None:
            cols += [_fmt(v) for v in cloud.normals[i]]
        cols += [str(int(shape.labels.at(k)[i]))
                 for k in range(1, shape.labels.level_count + 1)]
        rows.append(" ".join(cols))
    header = f"#schema {schema_ref}\n#points {cloud.n}\n"
    Path(path).write_text(header + "\n".join(rows) + "\n", encoding="utf-8")


def parse_labeled_cloud(path, schema: LabelSchema = None) -> LabeledCloud:
    """Parse a labeled cloud file.

    When ``schema`` is omitted it is loaded from the ``#schema`` header,
    resolved relative to the cloud file's directory.
    """
    path = Path(path)
    schema_ref = None
    declared_points = None
    points = []
    normals = []
    labels = []
    has_normals = None
    k_levels = None
    for lineno, raw in enumerate(
        path.read_text(encoding="utf-8").splitlines(), start=1
    ):
        if raw.startswith("#schema"):
            schema_ref = raw[len("#schema"):].strip()
            continue
        if raw.startswith("#points"):
            try:
                declared_points = int(raw.split()[1])
            except (IndexError, ValueError) as exc:
                raise FormatError(path, lineno, "bad #points header") from exc
            continue
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if schema is None:
            if schema_ref is None:
                raise FormatError(path, lineno,
                                  "data before a #schema header")
            schema = parse_schema(path.parent / schema_ref)
        if k_levels is None:
            k_levels = schema.level_count
        tokens = line.split()
        if has_normals is None:
            if len(tokens) == 3 + k_levels:
                has_normals = False
            elif len(tokens) == 6 + k_levels:
                has_normals = True
            else:
                raise FormatError(path, lineno,
                                  f"expected {3 + k_levels} or "
                                  f"{6 + k_levels} columns, got {len(tokens)}")
        expected = (6 if has_normals else 3) + k_levels
        if len(tokens) != expected:
            raise FormatError(path, lineno,
                              f"expected {expected} columns, got {len(tokens)}")
        try:
            values = [float(t) for t in tokens[: expected - k_levels]]
            lab = [int(t) for t in tokens[expected - k_levels:]]
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from exc
        for k, l in enumerate(lab, start=1):
            if l != -1 and not 0 <= l < schema.labels_per_level[k - 1]:
                raise SchemaMismatch(
                    f"{path}:{lineno}: label {l} out of range for level {k} "
                    f"(L={schema.labels_per_level[k - 1]})"
                )
        points.append(values[:3])
        if has_normals:
            normals.append(values[3:6])
        labels.append(lab)
    if not points:
        raise FormatError(path, 0, "no data rows")
    if declared_points is not None and declared_points != len(points):
        raise FormatError(path, 0,
                          f"#points says {declared_points}, file has "
                          f"{len(points)} rows")
    label_arr = np.asarray(labels, dtype=np.int64)
    hier = HierLabels(tuple(label_arr[:, k] for k in range(k_levels)))
    try:
        validate_hier_labels(hier, schema)
    except Exception as exc:
        raise SchemaMismatch(f"{path}: {exc}") from exc
    cloud = PointCloud(
        np.asarray(points), np.asarray(normals) if has_normals else None
    )
    return LabeledCloud(cloud, hier, schema)


# ---------------------------------------------------------------------------
# Manifests

def write_manifest(path, manifest) -> None:
    lines = [
        f"{p} {split} {'labeled' if labeled else 'unlabeled'}"
        for p, split, labeled in manifest.records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_manifest(path):
    from mlcseg.synth import DatasetManifest

    manifest = DatasetManifest()
    for lineno, line in _data_lines(path):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3 or tokens[1] not in ("train", "test") \
                or tokens[2] not in ("labeled", "unlabeled"):
            raise FormatError(path, lineno, "expected '<path> train|test "
                              "labeled|unlabeled'")
        manifest.records.append((tokens[0], tokens[1], tokens[2] == "labeled"))
    return manifest


# ---------------------------------------------------------------------------
# Logits files (debug surface for the `loss` subcommand)

def write_logits(path, logits) -> None:
    lines = [f"#levels {logits.level_count}", f"#points {logits.n}"]
    for k in range(1, logits.level_count + 1):
        lines.append(f"level {k}")
        for row in logits.at(k):
            lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_logits(path):
    from mlcseg.losses import LogitsField

    levels = []
    current = None
    for lineno, line in _data_lines(path):
        if line.startswith("#"):
            continue
        line = line.strip()
        if not line:
            continue
        if line.startswith("level"):
            current = []
            levels.append(current)
            continue
        if current is None:
            raise FormatError(path, lineno, "row before a 'level' line")
        try:
            current.append([float(t) for t in line.split()])
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from exc
    if not levels:
        raise FormatError(path, 0, "no logits data")
    return LogitsField(tuple(np.asarray(l) for l in levels))


# ---------------------------------------------------------------------------
# Named parameter dumps (checkpoints)

def write_arrays(path, arrays: dict) -> None:
    lines = ["#mlcseg-arrays 1"]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = " ".join(str(d) for d in arr.shape)
        lines.append(f"array {name} {shape}")
        for v in arr.reshape(-1):
            lines.append(f"{v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_arrays(path) -> dict:
    arrays = {}
    name = None
    shape = None
    values = []

    def flush():
        if name is not None:
            arr = np.asarray(values, dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise FormatError(path, 0, f"array {name} has wrong size")
            arrays[name] = arr.reshape(shape)

    for lineno, line in _data_lines(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("array "):
            flush()
            tokens = line.split()
            name = tokens[1]
            shape = tuple(int(t) for t in tokens[2:])
            values = []
        else:
            try:
                values.append(float(line))
            except ValueError as exc:
                raise FormatError(path, lineno, str(exc)) from exc
    flush()
    return arrays


# ---------------------------------------------------------------------------
# Flat key=value configs

def parse_config(path) -> dict:
    """Flat ``key=value`` text; '#' starts a comment."""
    out = {}
    for lineno, line in _data_lines(path):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(path, lineno, "expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
