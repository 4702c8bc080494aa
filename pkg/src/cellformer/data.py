"""Tabular records with mixed modalities: schema, parsing, imputation,
label binning, splitting, corruption and synthetic data generation.

A dataset is a list of rows, each holding one cell per schema feature plus a
non-negative duration. Cells are tagged with their modality and may be
Missing; only free-text cells stay Missing after imputation (the model masks
them at pooling time).
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SchemaError

MODALITIES = ("continuous", "categorical", "binary", "free_text")

BOOL_LEXICON = {
    "yes": True, "true": True, "1": True,
    "no": False, "false": False, "0": False,
}


# ---------------------------------------------------------------------------
# Cell values


@dataclass(frozen=True)
class CellValue:
    """One table cell: a modality tag plus its payload.

    kind is one of MODALITIES or "missing". Use the module-level
    constructors; they validate payloads.
    """

    kind: str
    value: float | str | bool | None = None

    @property
    def is_missing(self) -> bool:
        return self.kind == "missing"


MISSING = CellValue("missing")


def continuous(value: float) -> CellValue:
    value = float(value)
    if not math.isfinite(value):
        raise DataError(f"continuous cell must be finite, got {value!r}")
    return CellValue("continuous", value)


def categorical(label: str) -> CellValue:
    if not label:
        raise DataError("categorical cell label must be non-empty")
    return CellValue("categorical", str(label))


def binary(flag: bool) -> CellValue:
    return CellValue("binary", bool(flag))


def free_text(body: str) -> CellValue:
    if not body:
        raise DataError("free-text cell body must be non-empty")
    return CellValue("free_text", str(body))


def format_number(value: float) -> str:
    """Canonical text of a continuous value: shortest round-trip decimal.

    Integral floats render without a trailing ".0" (70.0 -> "70"); repr
    already yields the shortest form for everything else.
    """
    value = float(value)
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def format_cell(cell: CellValue) -> str:
    """CSV text of a cell; Missing becomes the empty field."""
    if cell.is_missing:
        return ""
    if cell.kind == "continuous":
        return format_number(cell.value)
    if cell.kind == "binary":
        return "yes" if cell.value else "no"
    return str(cell.value)


def parse_cell(text: str, modality: str) -> CellValue:
    """Parse one CSV field per its declared modality; empty fields are Missing."""
    if text == "":
        return MISSING
    if modality == "continuous":
        try:
            value = float(text)
        except ValueError:
            raise DataError(f"cannot parse {text!r} as continuous") from None
        return continuous(value)
    if modality == "binary":
        flag = BOOL_LEXICON.get(text.strip().lower())
        if flag is None:
            raise DataError(
                f"cannot parse {text!r} as binary (expected one of "
                f"{sorted(BOOL_LEXICON)})"
            )
        return binary(flag)
    if modality == "categorical":
        return categorical(text)
    if modality == "free_text":
        return free_text(text)
    raise SchemaError(f"unknown modality {modality!r}")


# ---------------------------------------------------------------------------
# Schema

DEFAULT_IMPUTATION = {
    "continuous": "mean",
    "categorical": "mode",
    "binary": "mode",
    "free_text": "none",
}


@dataclass(frozen=True)
class FeatureSpec:
    """Per-column declaration: modality, prompt template source, imputation.

    template is the raw template source (exactly one "{value}" placeholder)
    or None to use the default sentence built from the feature name.
    """

    name: str
    modality: str
    template: str | None = None
    imputation: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise SchemaError(
                f"feature {self.name!r}: unknown modality {self.modality!r}"
            )
        expected = DEFAULT_IMPUTATION[self.modality]
        if self.imputation is None:
            object.__setattr__(self, "imputation", expected)
        elif self.imputation != expected:
            raise SchemaError(
                f"feature {self.name!r}: {self.modality} features use "
                f"imputation {expected!r}, got {self.imputation!r}"
            )
        if self.template is not None and self.template.count("{value}") != 1:
            raise SchemaError(
                f"feature {self.name!r}: template must contain exactly one "
                "{value} placeholder"
            )


@dataclass(frozen=True)
class LabelSpec:
    column: str
    edges: tuple[float, ...]
    units: str = ""

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(edges) < 1:
            raise SchemaError("label needs at least one bin edge (K >= 2)")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise SchemaError(f"bin edges must be strictly increasing: {edges}")

    @property
    def num_ranks(self) -> int:
        return len(self.edges) + 1


@dataclass(frozen=True)
class TableSchema:
    features: tuple[FeatureSpec, ...]
    label: LabelSpec

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate feature names in schema: {names}")
        if self.label.column in names:
            raise SchemaError(
                f"label column {self.label.column!r} collides with a feature"
            )

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def num_ranks(self) -> int:
        return self.label.num_ranks


def load_schema(path) -> TableSchema:
    """Read a JSON schema descriptor (features[] + label)."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read schema {path}: {exc}") from None
    try:
        features = [
            FeatureSpec(
                name=f["name"],
                modality=f["modality"],
                template=f.get("template"),
                imputation=f.get("imputation"),
            )
            for f in raw["features"]
        ]
        label = raw["label"]
        spec = LabelSpec(
            column=label["column"],
            edges=tuple(label["edges"]),
            units=label.get("units", ""),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"schema {path} missing key: {exc}") from None
    return TableSchema(features=tuple(features), label=spec)


def save_schema(schema: TableSchema, path) -> None:
    doc = {
        "features": [
            {
                "name": f.name,
                "modality": f.modality,
                **({"template": f.template} if f.template is not None else {}),
                "imputation": f.imputation,
            }
            for f in schema.features
        ],
        "label": {
            "column": schema.label.column,
            "edges": list(schema.label.edges),
            "units": schema.label.units,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True)
class Row:
    cells: tuple[CellValue, ...]
    duration: float


@dataclass(frozen=True)
class Dataset:
    schema: TableSchema
    rows: tuple[Row, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        m = self.schema.num_features
        for i, row in enumerate(self.rows):
            if len(row.cells) != m:
                raise DataError(
                    f"row {i}: expected {m} cells, got {len(row.cells)}"
                )
            if row.duration < 0:
                raise DataError(f"row {i}: negative duration {row.duration}")

    def __len__(self) -> int:
        return len(self.rows)

    def ranks(self) -> list[int]:
        edges = self.schema.label.edges
        return [bin_label(r.duration, edges) for r in self.rows]


def load_dataset(csv_path, schema_path) -> Dataset:
    """Load a CSV against its schema descriptor.

    The header must contain exactly the schema's feature names plus the
    label column, in any order. Parse failures report 1-based data row and
    column name.
    """
    schema = schema_path if isinstance(schema_path, TableSchema) else load_schema(schema_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file, expected a header row") from None
        names = {f.name for f in schema.features}
        for col in header:
            if col not in names and col != schema.label.column:
                raise DataError(f"{csv_path}: unknown column {col!r}")
        missing = (names | {schema.label.column}) - set(header)
        if missing:
            kind = "label column" if schema.label.column in missing else "column(s)"
            raise DataError(f"{csv_path}: missing {kind} {sorted(missing)}")
        col_index = {col: i for i, col in enumerate(header)}
        label_idx = col_index[schema.label.column]

        rows = []
        for r, record in enumerate(reader, start=1):
            if len(record) != len(header):
                raise DataError(
                    f"{csv_path}: row {r}: expected {len(header)} fields, "
                    f"got {len(record)}"
                )
            cells = []
            for spec in schema.features:
                text = record[col_index[spec.name]]
                try:
                    cells.append(parse_cell(text, spec.modality))
                except DataError as exc:
                    raise DataError(
                        f"{csv_path}: row {r}, column {spec.name!r}: {exc}"
                    ) from None
            raw = record[label_idx]
            try:
                duration = float(raw)
            except ValueError:
                raise DataError(
                    f"{csv_path}: row {r}, column {schema.label.column!r}: "
                    f"cannot parse duration {raw!r}"
                ) from None
            if not math.isfinite(duration) or duration < 0:
                raise DataError(
                    f"{csv_path}: row {r}, column {schema.label.column!r}: "
                    f"duration must be a non-negative real, got {raw!r}"
                )
            rows.append(Row(cells=tuple(cells), duration=duration))
    return Dataset(schema=schema, rows=tuple(rows))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to CSV (schema feature order, label last)."""
    schema = dataset.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in schema.features] + [schema.label.column])
        for row in dataset.rows:
            writer.writerow(
                [format_cell(c) for c in row.cells] + [format_number(row.duration)]
            )


# ---------------------------------------------------------------------------
# Imputation


@dataclass(frozen=True)
class ImputationStats:
    """Per-feature fill values; compute these from the training split only."""

    fills: dict[str, CellValue] = field(default_factory=dict)


def compute_imputation_stats(dataset: Dataset) -> ImputationStats:
    """Column means (continuous) and modes (categorical/binary).

    Mode ties break to the smallest value so the result is deterministic.
    Raises if an imputable column has no observed values at all.
    """
    fills: dict[str, CellValue] = {}
    for j, spec in enumerate(dataset.schema.features):
        if spec.imputation == "none":
            continue
        observed = [r.cells[j].value for r in dataset.rows if not r.cells[j].is_missing]
        if not observed:
            raise DataError(
                f"column {spec.name!r} is entirely missing; cannot compute "
                f"{spec.imputation} imputation statistic"
            )
        if spec.imputation == "mean":
            fills[spec.name] = continuous(sum(observed) / len(observed))
        else:
            counts = Counter(observed)
            # highest count wins; ties break to the smallest value
            best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            fills[spec.name] = (
                binary(best) if spec.modality == "binary" else categorical(best)
            )
    return ImputationStats(fills=fills)


def impute(dataset: Dataset, stats: ImputationStats | None = None) -> Dataset:
    """Fill Missing cells from stats (defaults to the dataset's own).

    Free-text cells are never imputed; the pooling mask handles them.
    Pass the training split's stats when imputing val/test.
    """
    if len(dataset) == 0:
        raise DataError("cannot impute an empty dataset")
    if stats is None:
        stats = compute_imputation_stats(dataset)
    rows = []
    for row in dataset.rows:
        cells = list(row.cells)
        for j, spec in enumerate(dataset.schema.features):
            if cells[j].is_missing and spec.imputation != "none":
                cells[j] = stats.fills[spec.name]
        rows.append(Row(cells=tuple(cells), duration=row.duration))
    return Dataset(schema=dataset.schema, rows=tuple(rows))


# ---------------------------------------------------------------------------
# Label binning


def bin_label(duration: float, edges) -> int:
    """Rank of a duration under left-closed/right-open bins [e_{k-1}, e_k).

    Durations at or beyond the last edge land in the top rank.
    """
    if duration < 0:
        raise DataError(f"duration must be non-negative, got {duration}")
    return bisect_right(list(edges), duration)


# ---------------------------------------------------------------------------
# Splitting


def split_indices(n: int, seed: int) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle then 60/20/20 cut; remainders go to train."""
    if n < 5:
        raise DataError(f"need at least 5 rows to split, got {n}")
    n_val = n // 5
    n_test = n // 5
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n).tolist()
    return (
        perm[:n_train],
        perm[n_train:n_train + n_val],
        perm[n_train + n_val:],
    )


def split(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    train_idx, val_idx, test_idx = split_indices(len(dataset), seed)

    def take(idx):
        return Dataset(schema=dataset.schema, rows=tuple(dataset.rows[i] for i in idx))

    return take(train_idx), take(val_idx), take(test_idx)


# ---------------------------------------------------------------------------
# Random feature corruption


@dataclass(frozen=True)
class CorruptionResult:
    dataset: Dataset
    flags: tuple[tuple[bool, ...], ...]  # N x m, True where a cell was replaced


def corrupt(dataset: Dataset, rate: float, seed: int) -> CorruptionResult:
    """Independently replace each cell, with probability `rate`, by a uniform
    draw from its column's empirical marginal (the multiset of non-Missing
    values observed in that column).

    Missing cells are eligible and may be corrupted into present values.
    Labels are never touched. A column with no observed values cannot be
    corrupted; its flags stay False.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"corruption rate must be in [0, 1], got {rate}")
    if len(dataset) == 0:
        raise DataError("cannot corrupt an empty dataset")
    marginals = [
        [r.cells[j] for r in dataset.rows if not r.cells[j].is_missing]
        for j in range(dataset.schema.num_features)
    ]
    rng = np.random.default_rng(seed)
    rows = []
    flags = []
    for row in dataset.rows:
        cells = list(row.cells)
        row_flags = []
        for j in range(len(cells)):
            hit = rng.random() < rate and bool(marginals[j])
            if hit:
                cells[j] = marginals[j][int(rng.integers(len(marginals[j])))]
            row_flags.append(hit)
        rows.append(Row(cells=tuple(cells), duration=row.duration))
        flags.append(tuple(row_flags))
    return CorruptionResult(
        dataset=Dataset(schema=dataset.schema, rows=tuple(rows)),
        flags=tuple(flags),
    )


def save_corruption_flags(result: CorruptionResult, schema: TableSchema, path) -> None:
    """Sidecar CSV: one line per (row, column) with a 0/1 corruption flag."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "column", "was_corrupted"])
        for i, row_flags in enumerate(result.flags):
            for spec, flag in zip(schema.features, row_flags):
                writer.writerow([i, spec.name, int(flag)])


# ---------------------------------------------------------------------------
# Synthetic data

SEVERITY_PHRASES = (
    ("routine minor procedure with excellent prognosis",
     "straightforward elective case and the patient is stable"),
    ("mild condition requiring a standard intervention",
     "uncomplicated presentation with low operative risk"),
    ("moderate condition with some complicating factors",
     "intermediate case with relevant comorbidities to monitor"),
    ("severe condition requiring a complex intervention",
     "extensive disease and a technically demanding procedure"),
    ("critical condition with multiple high risk complications",
     "emergency presentation with major organ involvement"),
)

DEPARTMENTS = ("cardiology", "orthopedics", "neurology", "general surgery")

SYNTH_EDGES = (1.0, 2.0, 3.0, 4.0)


def synthetic_schema() -> TableSchema:
    return TableSchema(
        features=(
            FeatureSpec(
                "age", "continuous",
                template="The age of the patient is {value} years",
            ),
            FeatureSpec(
                "department", "categorical",
                template="The patient was admitted to the {value} department",
            ),
            FeatureSpec(
                "prior_surgery", "binary",
                template="The patient has a history of prior surgery: {value}",
            ),
            FeatureSpec(
                "clinical_note", "free_text",
                template="Preoperative note: {value}",
            ),
        ),
        label=LabelSpec(column="duration_hours", edges=SYNTH_EDGES, units="hours"),
    )


def synthesize(
    n: int,
    seed: int,
    variant: str = "text",
    text_missing: float = 0.0,
) -> Dataset:
    """Generate a desk-scale dataset with every modality and a known label.

    Each row draws a rank uniformly, picks a severity phrase of that rank
    for the free-text note, and samples a duration inside the rank's bin, so
    the rank is a deterministic function of the note. In the "text" variant
    the numeric features are independent of the rank (a numeric-only model
    cannot recover it); in the "mixed" variant age and prior_surgery carry
    rank signal too. `text_missing` is the probability a note is Missing.
    """
    if n < 10:
        raise DataError(f"synthesize needs n >= 10, got {n}")
    if variant not in ("text", "mixed"):
        raise DataError(f"unknown synthesize variant {variant!r}")
    schema = synthetic_schema()
    edges = (0.0,) + SYNTH_EDGES + (5.0,)
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        rank = int(rng.integers(5))
        lo, hi = edges[rank], edges[rank + 1]
        duration = float(lo + rng.random() * (hi - lo))
        if variant == "mixed":
            age = round(25.0 + 12.0 * rank + rng.random() * 10.0, 1)
            surgery = bool(rng.random() < 0.2 + 0.15 * rank)
        else:
            age = round(20.0 + rng.random() * 70.0, 1)
            surgery = bool(rng.random() < 0.5)
        dept = DEPARTMENTS[int(rng.integers(len(DEPARTMENTS)))]
        phrases = SEVERITY_PHRASES[rank]
        phrase = phrases[int(rng.integers(len(phrases)))]
        note = MISSING if rng.random() < text_missing else free_text(phrase)
        rows.append(Row(
            cells=(continuous(age), categorical(dept), binary(surgery), note),
            duration=duration,
        ))
    return Dataset(schema=schema, rows=tuple(rows))


def severity_rank_of(note: CellValue) -> int | None:
    """Recover the planted rank from a synthetic note (None if Missing)."""
    if note.is_missing:
        return None
    for rank, phrases in enumerate(SEVERITY_PHRASES):
        if note.value in phrases:
            return rank
    raise DataError(f"note {note.value!r} is not a synthetic severity phrase")
