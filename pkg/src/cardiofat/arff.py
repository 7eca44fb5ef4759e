"""Minimal ARFF interchange for feature datasets.

Supported subset: ``%`` comments, ``@relation``, numeric attributes, one
nominal class attribute (last), and ``@data`` CSV rows. Numbers are written
in shortest round-trip form (Python ``repr``), which makes write -> read ->
write byte-stable. Dataset provenance travels in a single
``% provenance: <json>`` comment.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import MalformedArff
from .features import Dataset

_PROVENANCE_PREFIX = "% provenance: "


def format_number(v: float) -> str:
    return repr(float(v))


def write_arff(dataset: Dataset, path: Path | str) -> None:
    Path(path).write_text(dumps(dataset))


def dumps(dataset: Dataset) -> str:
    lines = []
    if dataset.provenance:
        lines.append(_PROVENANCE_PREFIX + json.dumps(dataset.provenance))
    lines.append(f"@relation {dataset.relation}")
    for name in dataset.attribute_names:
        lines.append(f"@attribute {name} numeric")
    lines.append(f"@attribute class {{{','.join(dataset.class_values)}}}")
    lines.append("@data")
    for row, cls in zip(dataset.X, dataset.y):
        lines.append(",".join(format_number(v) for v in row) + "," + dataset.class_values[cls])
    return "\n".join(lines) + "\n"


def read_arff(path: Path | str) -> Dataset:
    return loads(Path(path).read_text())


def loads(text: str) -> Dataset:
    relation = None
    attribute_names: list[str] = []
    class_values: tuple[str, ...] | None = None
    provenance: dict = {}
    rows: list[list[float]] = []
    labels: list[int] = []
    in_data = False
    class_index: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("%"):
            if raw.startswith(_PROVENANCE_PREFIX):
                try:
                    provenance = json.loads(raw[len(_PROVENANCE_PREFIX):])
                except json.JSONDecodeError as exc:
                    raise MalformedArff(f"bad provenance JSON: {exc}", lineno) from exc
            continue
        lower = line.lower()
        if not in_data:
            if lower.startswith("@relation"):
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise MalformedArff("@relation needs a name", lineno)
                relation = parts[1].strip()
            elif lower.startswith("@attribute"):
                if class_values is not None:
                    raise MalformedArff("the nominal class attribute must be last", lineno)
                parts = line.split(None, 2)
                if len(parts) != 3:
                    raise MalformedArff("@attribute needs a name and a type", lineno)
                _, name, typespec = parts
                typespec = typespec.strip()
                if typespec.lower() == "numeric":
                    attribute_names.append(name)
                elif typespec.startswith("{") and typespec.endswith("}"):
                    values = tuple(v.strip() for v in typespec[1:-1].split(","))
                    if any(not v for v in values):
                        raise MalformedArff("empty nominal value", lineno)
                    class_values = values
                    class_index = {v: i for i, v in enumerate(values)}
                else:
                    raise MalformedArff(f"unsupported attribute type {typespec!r}", lineno)
            elif lower.startswith("@data"):
                if relation is None:
                    raise MalformedArff("@data before @relation", lineno)
                if class_values is None:
                    raise MalformedArff("no nominal class attribute declared", lineno)
                in_data = True
            else:
                raise MalformedArff(f"unexpected header line {line!r}", lineno)
            continue

        fields = line.split(",")
        if len(fields) != len(attribute_names) + 1:
            raise MalformedArff(
                f"expected {len(attribute_names) + 1} fields, got {len(fields)}", lineno
            )
        try:
            rows.append([float(v) for v in fields[:-1]])
        except ValueError as exc:
            raise MalformedArff(str(exc), lineno) from exc
        cls = fields[-1].strip()
        if cls not in class_index:
            raise MalformedArff(f"unknown class value {cls!r}", lineno)
        labels.append(class_index[cls])

    if not in_data:
        raise MalformedArff("no @data section", len(text.splitlines()) or 1)

    X = np.array(rows, dtype=np.float64) if rows else np.empty((0, len(attribute_names)))
    y = np.array(labels, dtype=np.intp)
    return Dataset(X=X, y=y, attribute_names=tuple(attribute_names),
                   class_values=class_values, relation=relation, provenance=provenance)
