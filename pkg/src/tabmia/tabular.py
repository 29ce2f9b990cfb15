"""Table schemas, row encoding, CSV I/O, a mixture-model population generator
and balanced member/holdout splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ID_COLUMN = "record_id"


class SchemaError(ValueError):
    pass


class InsufficientPopulation(ValueError):
    pass


@dataclass
class ColumnSpec:
    name: str
    kind: str
    categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("numerical", "categorical"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.categories) < 2:
                raise SchemaError(f"column {self.name!r}: need at least 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column {self.name!r}: duplicate categories")
        elif self.categories:
            raise SchemaError(f"numerical column {self.name!r} cannot list categories")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1


@dataclass
class TableSchema:
    columns: list[ColumnSpec]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        if ID_COLUMN in names:
            raise SchemaError(f"{ID_COLUMN!r} is reserved")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def numerical(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == "numerical"]

    @property
    def encoded_dim(self) -> int:
        return sum(c.width for c in self.columns)

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            entry = {"name": c.name, "kind": c.kind}
            if c.kind == "categorical":
                entry["categories"] = list(c.categories)
            cols.append(entry)
        return {"columns": cols}

    @classmethod
    def from_dict(cls, obj: dict) -> "TableSchema":
        try:
            cols = [ColumnSpec(c["name"], c["kind"], list(c.get("categories", []))) for c in obj["columns"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(cols)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TableSchema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EncoderStats:
    """Per numerical column (population) mean and standard deviation."""

    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, obj) -> "EncoderStats":
        return cls({k: float(v) for k, v in obj["mean"].items()}, {k: float(v) for k, v in obj["std"].items()})


@dataclass
class EncodedRecord:
    vector: np.ndarray
    source_row_id: str | None = None


def _check_row(schema: TableSchema, row) -> None:
    if len(row) != len(schema.columns):
        raise SchemaError(f"row has {len(row)} values, schema has {len(schema.columns)} columns")
    for col, v in zip(schema.columns, row):
        if col.kind == "categorical":
            if v not in col.categories:
                raise SchemaError(f"column {col.name!r}: unknown category {v!r}")
        elif not math.isfinite(float(v)):
            raise SchemaError(f"column {col.name!r}: non-finite value {v!r}")


def fit_encoder(schema: TableSchema, rows) -> EncoderStats:
    if len(rows) < 2:
        raise SchemaError("need at least 2 rows to fit the encoder")
    for row in rows:
        _check_row(schema, row)
    mean, std = {}, {}
    for j, col in enumerate(schema.columns):
        if col.kind != "numerical":
            continue
        vals = np.array([float(r[j]) for r in rows])
        s = float(vals.std())  # population convention (ddof=0)
        if s == 0.0:
            raise SchemaError(f"column {col.name!r} has zero variance")
        mean[col.name] = float(vals.mean())
        std[col.name] = s
    return EncoderStats(mean, std)


def encode(schema: TableSchema, stats: EncoderStats, row, row_id=None) -> EncodedRecord:
    _check_row(schema, row)
    out = np.zeros(schema.encoded_dim)
    pos = 0
    for col, v in zip(schema.columns, row):
        if col.kind == "numerical":
            out[pos] = (float(v) - stats.mean[col.name]) / stats.std[col.name]
        else:
            out[pos + col.categories.index(v)] = 1.0
        pos += col.width
    return EncodedRecord(out, row_id)


def encode_rows(schema: TableSchema, stats: EncoderStats, rows) -> np.ndarray:
    """Encode many rows into an ``(n, d)`` matrix."""
    if len(rows) == 0:
        return np.zeros((0, schema.encoded_dim))
    return np.stack([encode(schema, stats, r).vector for r in rows])


def decode(schema: TableSchema, stats: EncoderStats, vector) -> list:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (schema.encoded_dim,):
        raise SchemaError(f"vector length {vector.shape} != encoded dim {schema.encoded_dim}")
    row = []
    pos = 0
    for col in schema.columns:
        if col.kind == "numerical":
            row.append(float(vector[pos] * stats.std[col.name] + stats.mean[col.name]))
        else:
            # np.argmax returns the first maximum, i.e. lowest category index on ties
            row.append(col.categories[int(np.argmax(vector[pos:pos + col.width]))])
        pos += col.width
    return row


def decode_rows(schema, stats, matrix) -> list[list]:
    return [decode(schema, stats, v) for v in np.asarray(matrix)]


# -- CSV --------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, schema: TableSchema, rows, ids=None) -> None:
    """Write rows under a header of schema column names.

    When ``ids`` is given a leading ``record_id`` column is added.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(([ID_COLUMN] if ids is not None else []) + schema.names)
        for i, row in enumerate(rows):
            vals = [_fmt(v) for v in row]
            w.writerow(([str(ids[i])] if ids is not None else []) + vals)


def read_csv(path, schema: TableSchema) -> tuple[list[str] | None, list[list]]:
    """Read a CSV written by :func:`write_csv`; returns ``(ids or None, rows)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        has_ids = bool(header) and header[0] == ID_COLUMN
        cols = header[1:] if has_ids else header
        if cols != schema.names:
            raise SchemaError(f"{path}: header {cols} does not match schema {schema.names}")
        ids, rows = [], []
        for line in reader:
            if has_ids:
                ids.append(line[0])
                line = line[1:]
            row = [float(v) if c.kind == "numerical" else v for c, v in zip(schema.columns, line)]
            _check_row(schema, row)
            rows.append(row)
    return (ids if has_ids else None), rows


# -- population generator ---------------------------------------------------


@dataclass
class MixtureComponent:
    weight: float
    mean: list[float]
    std: list[float]
    categorical_probs: list[list[float]] = field(default_factory=list)


@dataclass
class GeneratorConfig:
    """Gaussian mixture over numerical columns with per-component categoricals."""

    numerical: list[str]
    categorical: list[dict]
    components: list[MixtureComponent]
    n_rows: int | None = None

    def __post_init__(self):
        self.components = [c if isinstance(c, MixtureComponent) else MixtureComponent(**c) for c in self.components]

    @property
    def schema(self) -> TableSchema:
        cols = [ColumnSpec(n, "numerical") for n in self.numerical]
        cols += [ColumnSpec(c["name"], "categorical", list(c["categories"])) for c in self.categorical]
        return TableSchema(cols)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj) -> "GeneratorConfig":
        return cls(
            list(obj["numerical"]),
            [dict(c) for c in obj["categorical"]],
            [MixtureComponent(**c) for c in obj["components"]],
            obj.get("n_rows"),
        )

    @classmethod
    def default(cls) -> "GeneratorConfig":
        return cls(
            numerical=["age", "income", "hours", "score"],
            categorical=[
                {"name": "region", "categories": ["north", "south", "west"]},
                {"name": "plan", "categories": ["basic", "plus", "pro", "team"]},
            ],
            components=[
                MixtureComponent(0.45, [34.0, 42000.0, 38.0, 0.2], [6.0, 9000.0, 5.0, 0.6],
                                 [[0.6, 0.3, 0.1], [0.5, 0.3, 0.15, 0.05]]),
                MixtureComponent(0.35, [51.0, 68000.0, 44.0, -0.5], [8.0, 15000.0, 6.0, 0.8],
                                 [[0.2, 0.5, 0.3], [0.1, 0.3, 0.4, 0.2]]),
                MixtureComponent(0.20, [26.0, 30000.0, 25.0, 1.1], [4.0, 6000.0, 9.0, 0.5],
                                 [[0.3, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]]),
            ],
        )


def generate_synthetic_population(cfg: GeneratorConfig, seed: int, n_rows: int | None = None) -> list[list]:
    n = n_rows if n_rows is not None else cfg.n_rows
    if n is None or n < 0:
        raise ValueError("row count required")
    weights = np.array([c.weight for c in cfg.components], dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture weights must be non-negative and sum to 1, got {weights.sum()!r}")
    n_num, n_cat = len(cfg.numerical), len(cfg.categorical)
    for k, c in enumerate(cfg.components):
        if len(c.mean) != n_num or len(c.std) != n_num:
            raise ValueError(f"component {k}: mean/std length must equal {n_num}")
        if len(c.categorical_probs) != n_cat:
            raise ValueError(f"component {k}: expected {n_cat} categorical distributions")
        for j, p in enumerate(c.categorical_probs):
            if len(p) != len(cfg.categorical[j]["categories"]) or abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"component {k}: bad probabilities for column {j}")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(weights), size=n, p=weights)
    means = np.array([c.mean for c in cfg.components]).reshape(len(weights), n_num)
    stds = np.array([c.std for c in cfg.components]).reshape(len(weights), n_num)
    num = means[comp] + stds[comp] * rng.standard_normal((n, n_num))
    cats = []
    for j, col in enumerate(cfg.categorical):
        u = rng.random(n)
        probs = np.array([c.categorical_probs[j] for c in cfg.components])
        cdf = np.cumsum(probs, axis=1)[comp]
        idx = np.minimum((u[:, None] >= cdf).sum(axis=1), len(col["categories"]) - 1)
        cats.append([col["categories"][i] for i in idx])
    return [[float(v) for v in num[i]] + [cats[j][i] for j in range(n_cat)] for i in range(n)]


def component_assignments(cfg: GeneratorConfig, seed: int, n_rows: int) -> np.ndarray:
    """Mixture component of each generated row (replays the generator's first draw)."""
    weights = np.array([c.weight for c in cfg.components], dtype=np.float64)
    return np.random.default_rng(seed).choice(len(weights), size=n_rows, p=weights)


# -- splits -----------------------------------------------------------------


@dataclass
class SplitManifest:
    model_id: str
    members: list[str]
    holdout: list[str]

    def __post_init__(self):
        if set(self.members) & set(self.holdout):
            raise ValueError(f"{self.model_id}: members and holdout overlap")
        if len(self.members) != len(self.holdout):
            raise ValueError(f"{self.model_id}: member/holdout sets must be balanced")

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "members": list(self.members), "holdout": list(self.holdout)}

    @classmethod
    def from_dict(cls, obj) -> "SplitManifest":
        return cls(obj["model_id"], list(obj["members"]), list(obj["holdout"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_splits(row_ids, spec, seed: int) -> list[SplitManifest]:
    """Give every model a private block of rows, half members and half holdout.

    Blocks are disjoint across models, so no record is ever a member or
    holdout of two models. ``spec`` supplies ``model_ids()`` and
    ``members_per_model``.
    """
    ids = list(row_ids)
    model_ids = spec.model_ids()
    m = spec.members_per_model
    need = len(model_ids) * 2 * m
    if len(ids) < need:
        raise InsufficientPopulation(f"need {need} rows for {len(model_ids)} models, have {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    out = []
    for k, mid in enumerate(model_ids):
        block = [ids[i] for i in order[k * 2 * m:(k + 1) * 2 * m]]
        out.append(SplitManifest(mid, block[:m], block[m:]))
    return out
