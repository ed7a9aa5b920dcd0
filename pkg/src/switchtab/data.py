"""Schema-typed CSV loading, preprocessing, feature corruption and batch pairing.

Preprocessing pipeline (fitted on training rows only):

1. drop columns that are missing in every row;
2. impute numerical columns with their mean, categorical columns with their mode;
3. expand categoricals with backward-difference contrasts (k levels -> k-1 columns);
4. min-max scale every derived column to [0, 1] (constant columns map to 0.5).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_MISSING_TOKENS = ("", "NA", "NaN", "null")
KINDS = ("numerical", "categorical", "label")
TASKS = ("binary", "multiclass", "regression")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    task: str | None = None
    classes: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "label":
            if self.task not in TASKS:
                raise SchemaError(f"label column {self.name!r} needs a task in {TASKS}")
        elif self.task is not None:
            raise SchemaError(f"column {self.name!r}: only label columns carry a task")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.task is not None:
            d["task"] = self.task
        if self.classes is not None:
            d["classes"] = list(self.classes)
        return d


def validate_schema(schema: Sequence[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate column names in schema: {names}")
    if sum(c.kind == "label" for c in schema) > 1:
        raise SchemaError("at most one label column is allowed")


def schema_from_dict(doc: dict) -> list[ColumnSchema]:
    if not isinstance(doc, dict) or not isinstance(doc.get("columns"), list):
        raise SchemaError('schema document must be {"columns": [...]}')
    cols = []
    for entry in doc["columns"]:
        unknown = set(entry) - {"name", "kind", "task", "classes"}
        if unknown:
            raise SchemaError(f"unknown schema keys {sorted(unknown)}")
        classes = entry.get("classes")
        cols.append(ColumnSchema(
            name=entry["name"],
            kind=entry["kind"],
            task=entry.get("task"),
            classes=tuple(str(c) for c in classes) if classes is not None else None,
        ))
    validate_schema(cols)
    return cols


def load_schema(path: str | Path) -> list[ColumnSchema]:
    with open(path, encoding="utf-8") as fh:
        return schema_from_dict(json.load(fh))


def save_schema(schema: Sequence[ColumnSchema], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"columns": [c.to_dict() for c in schema]}, fh, indent=2)
        fh.write("\n")


def schema_hash(schema: Sequence[ColumnSchema]) -> str:
    """Order-sensitive digest of column names and kinds."""
    payload = json.dumps([[c.name, c.kind] for c in schema], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class TabularDataset:
    """Raw cells per column; ``None`` marks a missing cell.

    Numerical cells are floats, categorical cells strings.  Label cells are
    floats for regression and strings otherwise.
    """

    schema: list[ColumnSchema]
    columns: dict[str, list]

    def __post_init__(self):
        validate_schema(self.schema)
        lengths = {len(self.columns[c.name]) for c in self.schema}
        if len(lengths) != 1:
            raise SchemaError("columns have different lengths")
        if lengths.pop() < 1:
            raise SchemaError("dataset has no rows")

    @property
    def n(self) -> int:
        return len(self.columns[self.schema[0].name])

    @property
    def label_column(self) -> ColumnSchema | None:
        return next((c for c in self.schema if c.kind == "label"), None)

    def subset(self, rows: Sequence[int]) -> "TabularDataset":
        return TabularDataset(self.schema, {k: [v[i] for i in rows] for k, v in self.columns.items()})


def _parse_cell(raw: str, col: ColumnSchema, missing: set[str], line: int):
    if raw in missing:
        return None
    if col.kind == "numerical" or (col.kind == "label" and col.task == "regression"):
        try:
            value = float(raw)
        except ValueError:
            raise ValueError(f"line {line}, column {col.name!r}: unparseable numeric cell {raw!r}") from None
        if not math.isfinite(value):
            raise ValueError(f"line {line}, column {col.name!r}: non-finite numeric cell {raw!r}")
        return value
    return raw


def load_csv(path: str | Path, schema: Sequence[ColumnSchema],
             missing_tokens: Sequence[str] = DEFAULT_MISSING_TOKENS) -> TabularDataset:
    """Read a headed UTF-8 CSV; columns not named in ``schema`` are ignored."""
    schema = list(schema)
    validate_schema(schema)
    missing = set(missing_tokens)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        index = {name: i for i, name in enumerate(header)}
        for col in schema:
            if col.name not in index:
                raise SchemaError(f"{path}: column not found: {col.name!r}")
        columns: dict[str, list] = {c.name: [] for c in schema}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}, line {line}: expected {len(header)} cells, got {len(row)}")
            for col in schema:
                columns[col.name].append(_parse_cell(row[index[col.name]], col, missing, line))
    if not columns[schema[0].name]:
        raise ValueError(f"{path}: no data rows")
    return TabularDataset(schema, columns)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def backward_difference_contrasts(k: int) -> np.ndarray:
    """k x (k-1) backward-difference coding matrix.

    Column j contrasts level j+1 with level j: rows 0..j hold -(k-1-j)/k and
    rows j+1..k-1 hold (j+1)/k.
    """
    if k < 2:
        raise ValueError("backward difference coding needs at least two levels")
    c = np.empty((k, k - 1))
    for j in range(k - 1):
        c[: j + 1, j] = -(k - 1 - j) / k
        c[j + 1:, j] = (j + 1) / k
    return c


@dataclass
class NumericStats:
    mean: float
    min: float
    max: float


@dataclass
class CategoricalStats:
    mode: str
    levels: list[str]
    contrasts: np.ndarray


@dataclass
class Preprocessor:
    schema: list[ColumnSchema]
    numeric: dict[str, NumericStats]
    categorical: dict[str, CategoricalStats]
    dropped: list[str]
    output_columns: list[str]
    col_min: np.ndarray
    col_max: np.ndarray
    label_classes: list[str] | None = None
    pools: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return len(self.output_columns)

    @property
    def label_column(self) -> ColumnSchema | None:
        return next((c for c in self.schema if c.kind == "label"), None)

    @property
    def n_classes(self) -> int | None:
        return len(self.label_classes) if self.label_classes is not None else None

    def to_dict(self) -> dict:
        return {
            "schema": [c.to_dict() for c in self.schema],
            "numeric": {k: [v.mean, v.min, v.max] for k, v in self.numeric.items()},
            "categorical": {k: {"mode": v.mode, "levels": v.levels} for k, v in self.categorical.items()},
            "dropped": list(self.dropped),
            "output_columns": list(self.output_columns),
            "col_min": self.col_min.tolist(),
            "col_max": self.col_max.tolist(),
            "label_classes": self.label_classes,
            "pools": None if self.pools is None else self.pools.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        schema = schema_from_dict({"columns": d["schema"]})
        cats = {
            k: CategoricalStats(v["mode"], list(v["levels"]), backward_difference_contrasts(len(v["levels"])))
            for k, v in d["categorical"].items()
        }
        return cls(
            schema=schema,
            numeric={k: NumericStats(*v) for k, v in d["numeric"].items()},
            categorical=cats,
            dropped=list(d["dropped"]),
            output_columns=list(d["output_columns"]),
            col_min=np.array(d["col_min"], dtype=np.float64),
            col_max=np.array(d["col_max"], dtype=np.float64),
            label_classes=d.get("label_classes"),
            pools=None if d.get("pools") is None else np.array(d["pools"], dtype=np.float64),
        )


@dataclass
class FeatureMatrix:
    values: np.ndarray
    labels: np.ndarray | None = None
    pools: np.ndarray | None = None
    columns: list[str] = field(default_factory=list)
    task: str | None = None
    n_classes: int | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def rows(self, idx) -> "FeatureMatrix":
        labels = None if self.labels is None else self.labels[idx]
        return FeatureMatrix(self.values[idx], labels, self.pools, self.columns, self.task, self.n_classes)


def _mode(values: list[str]) -> str:
    counts = Counter(values)
    best = max(counts.values())
    # ties resolved by first appearance
    return next(v for v in values if counts[v] == best)


def _encode_raw(prep: Preprocessor, data: TabularDataset) -> np.ndarray:
    blocks = []
    for col in prep.schema:
        if col.kind == "label" or col.name in prep.dropped:
            continue
        cells = data.columns[col.name]
        if col.kind == "numerical":
            st = prep.numeric[col.name]
            blocks.append(np.array([[st.mean if v is None else v] for v in cells], dtype=np.float64))
        else:
            st = prep.categorical[col.name]
            lookup = {lvl: i for i, lvl in enumerate(st.levels)}
            fallback = lookup[st.mode]
            idx = [fallback if v is None else lookup.get(v, fallback) for v in cells]
            blocks.append(st.contrasts[idx])
    return np.hstack(blocks)


def _scale(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    degenerate = span <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = (raw - lo) / np.where(degenerate, 1.0, span)
    scaled[:, degenerate] = 0.5
    return np.clip(scaled, 0.0, 1.0)


def _label_classes(col: ColumnSchema, cells: list) -> list[str] | None:
    if col.task == "regression":
        return None
    if col.classes is not None:
        return list(col.classes)
    seen = sorted({v for v in cells if v is not None})
    try:
        seen.sort(key=float)
    except ValueError:
        pass
    return seen


def fit_preprocessor(train: TabularDataset) -> Preprocessor:
    if train.n < 1:
        raise ValueError("cannot fit on an empty dataset")
    numeric: dict[str, NumericStats] = {}
    categorical: dict[str, CategoricalStats] = {}
    dropped: list[str] = []
    output_columns: list[str] = []
    label_classes = None
    for col in train.schema:
        cells = train.columns[col.name]
        present = [v for v in cells if v is not None]
        if col.kind == "label":
            label_classes = _label_classes(col, cells)
            continue
        if not present:
            dropped.append(col.name)
            continue
        if col.kind == "numerical":
            arr = np.array(present, dtype=np.float64)
            numeric[col.name] = NumericStats(float(arr.mean()), float(arr.min()), float(arr.max()))
            output_columns.append(col.name)
        else:
            levels = list(dict.fromkeys(present))
            if len(levels) < 2:
                dropped.append(col.name)
                continue
            categorical[col.name] = CategoricalStats(_mode(present), levels, backward_difference_contrasts(len(levels)))
            output_columns.extend(f"{col.name}__bd{i}" for i in range(len(levels) - 1))
    if not output_columns:
        raise ValueError("all feature columns were dropped")
    prep = Preprocessor(
        schema=list(train.schema), numeric=numeric, categorical=categorical, dropped=dropped,
        output_columns=output_columns, col_min=np.zeros(0), col_max=np.zeros(0),
        label_classes=label_classes,
    )
    raw = _encode_raw(prep, train)
    prep.col_min = raw.min(axis=0)
    prep.col_max = raw.max(axis=0)
    prep.pools = _scale(raw, prep.col_min, prep.col_max)
    return prep


def _encode_labels(prep: Preprocessor, data: TabularDataset) -> tuple[np.ndarray | None, str | None]:
    col = prep.label_column
    if col is None or col.name not in data.columns:
        return None, None
    cells = data.columns[col.name]
    if any(v is None for v in cells):
        raise ValueError(f"label column {col.name!r} has missing cells")
    if col.task == "regression":
        return np.array(cells, dtype=np.float64), col.task
    lookup = {c: i for i, c in enumerate(prep.label_classes)}
    try:
        return np.array([lookup[v] for v in cells], dtype=np.int64), col.task
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not among classes {prep.label_classes}") from None


def transform(prep: Preprocessor, data: TabularDataset) -> FeatureMatrix:
    if [(c.name, c.kind) for c in data.schema] != [(c.name, c.kind) for c in prep.schema]:
        raise SchemaError("dataset schema does not match the fitted preprocessor")
    values = _scale(_encode_raw(prep, data), prep.col_min, prep.col_max)
    labels, task = _encode_labels(prep, data)
    return FeatureMatrix(values, labels, prep.pools, list(prep.output_columns), task, prep.n_classes)


def export_matrix_csv(matrix: FeatureMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(matrix.columns)
        for row in matrix.values:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# corruption and batch pairing
# ---------------------------------------------------------------------------

@dataclass
class CorruptionResult:
    values: np.ndarray
    indices: np.ndarray  # (n, t) corrupted column indices per row
    t: int

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.values.shape, dtype=bool)
        np.put_along_axis(m, self.indices, True, axis=1)
        return m


def corrupted_count(ratio: float, M: int) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"corruption ratio must lie in [0, 1], got {ratio}")
    return int(math.floor(ratio * M + 1e-12))


def corrupt(batch: np.ndarray, pools: np.ndarray, ratio: float, rng: np.random.Generator) -> CorruptionResult:
    """Replace t = floor(ratio*M) random features per row by draws from the column's pool.

    ``pools`` is the (P, M) transformed training matrix; a replacement for
    column j is ``pools[r, j]`` for a uniformly drawn row r.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n, M = batch.shape
    if pools.ndim != 2 or pools.shape[1] != M or pools.shape[0] < 1:
        raise ValueError(f"pools must have shape (P, {M}), got {pools.shape}")
    t = corrupted_count(ratio, M)
    out = batch.copy()
    if t == 0:
        return CorruptionResult(out, np.zeros((n, 0), dtype=np.int64), 0)
    # t distinct columns per row: the first t of a random permutation
    cols = np.argsort(rng.random((n, M)), axis=1, kind="stable")[:, :t]
    src = rng.integers(0, pools.shape[0], size=(n, t))
    rows = np.repeat(np.arange(n)[:, None], t, axis=1)
    out[rows, cols] = pools[src, cols]
    return CorruptionResult(out, cols, t)


def sample_batch_pairs(n: int, B: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch of paired index batches from two independent permutations."""
    if n < 2:
        raise ValueError("need at least two rows to form pairs")
    if B < 1:
        raise ValueError("batch size must be positive")
    first = rng.permutation(n)
    second = rng.permutation(n)
    pairs = []
    for start in range(0, n, B):
        a, b = first[start:start + B], second[start:start + B]
        k = min(len(a), len(b))
        pairs.append((a[:k], b[:k]))
    return pairs


def iter_batches(n: int, B: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, B):
        yield order[start:start + B]
