"""Measurement records, the dataset container, and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ContractError

AGE_MIN = 18.0
AGE_MAX = 120.0
SEX_LEVELS = ("F", "M")


@dataclass(frozen=True)
class MeasurementRecord:
    """One structure measured on one scan, with the scan-level covariates."""

    scan_id: str
    subject_id: str
    study: str
    age: float
    sex: str
    manufacturer: str
    kvp: float
    contrast: bool
    structure_id: str
    volume_ml: float
    mean_hu: float
    acquired: str | None = None  # ISO date, used to order longitudinal scans

    def __post_init__(self):
        if self.sex not in SEX_LEVELS:
            raise ContractError(f"sex must be one of {SEX_LEVELS}, got {self.sex!r}")
        if not AGE_MIN <= self.age <= AGE_MAX:
            raise ContractError(
                f"age {self.age} outside the supported range [{AGE_MIN}, {AGE_MAX}]"
                f" for scan {self.scan_id!r}")
        if not self.volume_ml > 0:
            raise ContractError(
                f"volume must be positive, got {self.volume_ml} for scan "
                f"{self.scan_id!r} structure {self.structure_id!r}")
        for name in ("scan_id", "subject_id", "study", "manufacturer", "structure_id"):
            if not getattr(self, name):
                raise ContractError(f"{name} must be non-empty")


class Dataset:
    """Immutable collection of measurements, unique per (scan, structure)."""

    def __init__(self, records: Iterable[MeasurementRecord]):
        self.records: tuple[MeasurementRecord, ...] = tuple(records)
        seen = set()
        for r in self.records:
            key = (r.scan_id, r.structure_id)
            if key in seen:
                raise ContractError(
                    f"duplicate measurement for scan {key[0]!r} structure {key[1]!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MeasurementRecord]:
        return iter(self.records)

    def structures(self) -> tuple[str, ...]:
        return tuple(sorted({r.structure_id for r in self.records}))

    def studies(self) -> tuple[str, ...]:
        return tuple(sorted({r.study for r in self.records}))

    def for_structure(self, structure_id: str) -> "Dataset":
        return Dataset(r for r in self.records if r.structure_id == structure_id)

    def filter(self, pred: Callable[[MeasurementRecord], bool]) -> "Dataset":
        return Dataset(r for r in self.records if pred(r))

    def column(self, name: str) -> np.ndarray:
        if name in ("age", "kvp", "volume_ml", "mean_hu"):
            return np.asarray([getattr(r, name) for r in self.records], dtype=float)
        if name == "contrast":
            return np.asarray([r.contrast for r in self.records], dtype=bool)
        return np.asarray([getattr(r, name) for r in self.records], dtype=object)

    def response(self, which: str) -> np.ndarray:
        if which not in ("volume_ml", "mean_hu"):
            raise ContractError(f"unknown response {which!r}")
        return self.column(which)


DEFAULT_COLUMNS = {
    "scan_id": "scan_id",
    "subject_id": "subject_id",
    "study": "study",
    "age": "age",
    "sex": "sex",
    "manufacturer": "manufacturer",
    "kvp": "kvp",
    "contrast": "contrast",
    "structure_id": "structure_id",
    "volume_ml": "volume_ml",
    "mean_hu": "mean_hu",
    "acquired": "acquired",
}

DEFAULT_SEX_SYNONYMS = {
    "F": ("f", "female", "w"),
    "M": ("m", "male"),
}

_TRUE_TOKENS = {"1", "true", "yes", "y", "t"}
_FALSE_TOKENS = {"0", "false", "no", "n", "f"}


@dataclass(frozen=True)
class IngestSchema:
    """Column mapping and value conventions for measurement CSVs."""

    columns: dict = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    sex_synonyms: dict = field(default_factory=lambda: dict(DEFAULT_SEX_SYNONYMS))
    optional: tuple[str, ...] = ("acquired",)

    def sex_from(self, raw: str) -> str | None:
        token = raw.strip()
        if token in SEX_LEVELS:
            return token
        low = token.lower()
        for level, synonyms in self.sex_synonyms.items():
            if low in synonyms:
                return level
        return None


@dataclass
class IngestReport:
    """Row accounting from one CSV ingestion."""

    n_rows: int = 0
    n_kept: int = 0
    missing_by_column: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)  # (row_number, reason)

    def note_missing(self, column: str):
        self.missing_by_column[column] = self.missing_by_column.get(column, 0) + 1

    @property
    def n_excluded(self) -> int:
        return self.n_rows - self.n_kept


def _parse_bool(raw: str) -> bool | None:
    token = raw.strip().lower()
    if token in _TRUE_TOKENS:
        return True
    if token in _FALSE_TOKENS:
        return False
    return None


def ingest_csv(path, schema: IngestSchema | None = None) -> tuple[Dataset, IngestReport]:
    """Read a measurements CSV into a validated Dataset.

    Rows missing a required covariate are excluded and counted per column;
    rows with unparseable values are excluded with a recorded reason. A
    duplicated (scan_id, structure_id) pair is a hard error naming the pair.
    """
    schema = schema or IngestSchema()
    report = IngestReport()
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ContractError(f"{path}: empty file, no header row")
        header = set(reader.fieldnames)
        required = {k: v for k, v in schema.columns.items() if k not in schema.optional}
        missing_cols = [v for v in required.values() if v not in header]
        if missing_cols:
            raise ContractError(f"{path}: missing required columns {sorted(missing_cols)}")

        for lineno, row in enumerate(reader, start=2):
            raw = {}
            skip = False
            for fld, col in schema.columns.items():
                value = (row.get(col) or "").strip()
                if not value:
                    if fld in schema.optional:
                        raw[fld] = None
                        continue
                    report.note_missing(col)
                    skip = True
                    break
                raw[fld] = value
            report.n_rows += 1
            if skip:
                continue

            sex = schema.sex_from(raw["sex"])
            if sex is None:
                report.rejected.append((lineno, f"unrecognized sex {raw['sex']!r}"))
                continue
            contrast = _parse_bool(raw["contrast"])
            if contrast is None:
                report.rejected.append((lineno, f"unrecognized contrast {raw['contrast']!r}"))
                continue
            try:
                age = float(raw["age"])
                kvp = float(raw["kvp"])
                volume = float(raw["volume_ml"])
                hu = float(raw["mean_hu"])
            except ValueError as exc:
                report.rejected.append((lineno, f"bad numeric value: {exc}"))
                continue
            try:
                rec = MeasurementRecord(
                    scan_id=raw["scan_id"], subject_id=raw["subject_id"],
                    study=raw["study"], age=age, sex=sex,
                    manufacturer=raw["manufacturer"], kvp=kvp, contrast=contrast,
                    structure_id=raw["structure_id"], volume_ml=volume,
                    mean_hu=hu, acquired=raw.get("acquired"))
            except ContractError as exc:
                report.rejected.append((lineno, str(exc)))
                continue
            records.append(rec)
            report.n_kept += 1

    return Dataset(records), report


def write_measurements_csv(path, records: Iterable[MeasurementRecord]):
    """Write records back out in the default column order."""
    fields = list(DEFAULT_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in records:
            writer.writerow([
                r.scan_id, r.subject_id, r.study, repr(r.age), r.sex,
                r.manufacturer, repr(r.kvp), int(r.contrast), r.structure_id,
                repr(r.volume_ml), repr(r.mean_hu), r.acquired or "",
            ])
