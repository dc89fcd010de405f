"""Feature schemas, datasets and CSV ingestion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """A numerical feature with a static border, or a categorical feature
    with a fixed value list.  Categories are encoded as their list index."""

    name: str
    kind: str
    v_min: float = 0.0
    v_max: float = 1.0
    values: tuple = ()

    def __post_init__(self):
        if self.kind == "numerical":
            if not self.v_min < self.v_max:
                raise SchemaError(f"{self.name}: need v_min < v_max")
        elif self.kind == "categorical":
            if not self.values:
                raise SchemaError(f"{self.name}: empty category list")
            if len(set(self.values)) != len(self.values):
                raise SchemaError(f"{self.name}: duplicate categories")
            object.__setattr__(self, "values", tuple(self.values))
        else:
            raise SchemaError(f"{self.name}: unknown feature kind {self.kind!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @classmethod
    def numerical(cls, name: str, v_min: float, v_max: float) -> "FeatureSpec":
        return cls(name, "numerical", float(v_min), float(v_max))

    @classmethod
    def categorical(cls, name: str, values: Sequence[str]) -> "FeatureSpec":
        return cls(name, "categorical", values=tuple(values))

    def encode(self, raw: str) -> float:
        if self.is_categorical:
            try:
                return float(self.values.index(raw))
            except ValueError:
                raise SchemaError(f"{self.name}: unknown category {raw!r}") from None
        return clamp(float(raw), self.v_min, self.v_max)

    def decode(self, code: float):
        return self.values[int(code)] if self.is_categorical else float(code)

    def to_dict(self) -> dict:
        if self.is_categorical:
            return {"name": self.name, "kind": self.kind, "values": list(self.values)}
        return {"name": self.name, "kind": self.kind, "range": [self.v_min, self.v_max]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        if d["kind"] == "categorical":
            return cls.categorical(d["name"], d["values"])
        lo, hi = d["range"]
        return cls.numerical(d["name"], lo, hi)


def clamp(v, lo, hi):
    return min(max(v, lo), hi)


@dataclass(frozen=True)
class Dataset:
    """Encoded feature matrix ``X`` (categoricals as codes) and labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    schema: tuple
    task: str = "regression"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, len(self.schema))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different row counts")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "schema", tuple(self.schema))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return len(self.schema)

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.schema, self.task)

    @property
    def rows(self):
        return list(zip(self.X, self.y))


@dataclass
class DatasetConfig:
    """Schema plus label handling, as declared in a dataset config file."""

    schema: list
    label_column: str
    task: str = "regression"
    positive_label: Optional[str] = None
    csv_path: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        path = Path(path)
        d = json.loads(path.read_text())
        csv_path = d.get("csv")
        if csv_path is not None and not Path(csv_path).is_absolute():
            csv_path = str((path.parent / csv_path).resolve())
        return cls(
            schema=[FeatureSpec.from_dict(f) for f in d["features"]],
            label_column=d["label"],
            task=d.get("task", "regression"),
            positive_label=d.get("positive_label"),
            csv_path=csv_path,
            extra={k: v for k, v in d.items()
                   if k not in {"features", "label", "task", "positive_label", "csv"}},
        )

    def load_dataset(self, csv_path=None) -> Dataset:
        return load_dataset(csv_path or self.csv_path, self.schema, self.label_column,
                            task=self.task, positive_label=self.positive_label)


def load_dataset(csv_path, schema: Sequence[FeatureSpec], label_column: str,
                 task: str = "regression", positive_label: Optional[str] = None) -> Dataset:
    """Read a comma-separated file with a header row.

    Features are matched to the header by name.  Numerical values outside the
    declared border are clamped; unknown categories raise `SchemaError`.
    For classification the label is 1.0 iff it equals ``positive_label``.
    """
    schema = list(schema)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise SchemaError(f"label column {label_column!r} not in header")
        if len(header) - 1 != len(schema):
            raise SchemaError(f"schema has {len(schema)} features, header has {len(header) - 1}")
        try:
            cols = [header.index(f.name) for f in schema]
        except ValueError as e:
            raise SchemaError(f"feature missing from header: {e}") from None
        label_idx = header.index(label_column)

        X, y = [], []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {i}: expected {len(header)} fields, got {len(row)}")
            try:
                X.append([f.encode(row[c].strip()) for f, c in zip(schema, cols)])
                raw = row[label_idx].strip()
                if positive_label is not None:
                    y.append(1.0 if raw == positive_label else 0.0)
                else:
                    y.append(float(raw))
            except SchemaError as e:
                raise SchemaError(f"row {i}: {e}") from None
            except ValueError as e:
                raise ParseError(f"row {i}: {e}") from None
    X = np.asarray(X, dtype=float).reshape(-1, len(schema))
    return Dataset(X, np.asarray(y, dtype=float), tuple(schema), task)
