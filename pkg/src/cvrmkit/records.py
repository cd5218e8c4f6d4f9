"""Patient record schema, JSONL corpus IO and the stratified train/test split.

Corpus wire format: one JSON object per line (UTF-8), fields exactly
``patient_id, age, gender ("M"/"F"), consults [{date, text}], medications
[ATC code strings], label (0/1)``.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atc import is_valid_atc

GENDERS = ("M", "F")

MIN_AGE = 18
MAX_AGE = 110


class SchemaError(ValueError):
    """A record violates the corpus schema (carries field name and reason)."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name
        self.reason = reason


class CorpusFormatError(ValueError):
    """A corpus file is malformed (carries the offending line number)."""

    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class ConsultNote:
    date: dt.date
    text: str


@dataclass(frozen=True)
class MedicationEntry:
    atc_code: str
    description: str | None = None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: int
    gender: str  # "M" or "F"
    consults: tuple[ConsultNote, ...]
    medications: tuple[MedicationEntry, ...]
    label: int

    def consult_texts(self) -> list[str]:
        """Consult texts in chronological order (oldest first)."""
        return [c.text for c in self.consults]


@dataclass(frozen=True)
class DatasetManifest:
    record_count: int
    positive_count: int
    generator_seed: int
    schema_version: str = "1"

    def __post_init__(self):
        if self.positive_count > self.record_count:
            raise ValueError("positive_count exceeds record_count")


def validate_record(raw: dict) -> PatientRecord:
    """Validate one decoded JSON object and build a PatientRecord.

    Raises SchemaError naming the offending field.
    """
    if not isinstance(raw.get("patient_id"), str) or not raw["patient_id"]:
        raise SchemaError("patient_id", "must be a non-empty string")
    age = raw.get("age")
    if not isinstance(age, int) or isinstance(age, bool):
        raise SchemaError("age", "must be an integer")
    if not MIN_AGE <= age <= MAX_AGE:
        raise SchemaError("age", f"must be within [{MIN_AGE}, {MAX_AGE}], got {age}")
    gender = raw.get("gender")
    if gender not in GENDERS:
        raise SchemaError("gender", f"must be one of {GENDERS}, got {gender!r}")
    label = raw.get("label")
    if label not in (0, 1) or isinstance(label, bool):
        raise SchemaError("label", f"must be 0 or 1, got {label!r}")

    consults_raw = raw.get("consults")
    if not isinstance(consults_raw, list) or not consults_raw:
        raise SchemaError("consults", "at least one consult is required")
    consults = []
    for i, c in enumerate(consults_raw):
        try:
            date = dt.date.fromisoformat(c["date"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError("consults", f"entry {i}: bad or missing ISO date") from None
        text = c.get("text")
        if not isinstance(text, str) or not text.strip():
            raise SchemaError("consults", f"entry {i}: text empty after trimming")
        consults.append(ConsultNote(date=date, text=text))
    dates = [c.date for c in consults]
    if dates != sorted(dates):
        raise SchemaError("consults", "must be sorted ascending by date")

    meds_raw = raw.get("medications", [])
    if not isinstance(meds_raw, list):
        raise SchemaError("medications", "must be a list of ATC codes")
    medications = []
    for i, code in enumerate(meds_raw):
        if not isinstance(code, str) or code != code.upper() or not is_valid_atc(code):
            raise SchemaError("medications", f"entry {i}: invalid ATC code {code!r}")
        medications.append(MedicationEntry(atc_code=code))

    return PatientRecord(
        patient_id=raw["patient_id"],
        age=age,
        gender=gender,
        consults=tuple(consults),
        medications=tuple(medications),
        label=label,
    )


def record_to_json(record: PatientRecord) -> str:
    """Canonical single-line JSON form (stable key order, no extra whitespace)."""
    obj = {
        "patient_id": record.patient_id,
        "age": record.age,
        "gender": record.gender,
        "consults": [{"date": c.date.isoformat(), "text": c.text} for c in record.consults],
        "medications": [m.atc_code for m in record.medications],
        "label": record.label,
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def load_corpus(path: str | Path) -> list[PatientRecord]:
    """Load and validate a JSONL corpus, preserving line order.

    Raises CorpusFormatError with the line number for malformed JSON,
    schema violations, or duplicate patient ids.
    """
    records: list[PatientRecord] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(lineno, f"malformed JSON ({exc.msg})") from None
            try:
                record = validate_record(raw)
            except SchemaError as exc:
                raise CorpusFormatError(lineno, str(exc)) from None
            if record.patient_id in seen_ids:
                raise CorpusFormatError(lineno, f"duplicate patient_id {record.patient_id!r}")
            seen_ids.add(record.patient_id)
            records.append(record)
    return records


def save_corpus(records: list[PatientRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record) + "\n")


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    obj = {
        "record_count": manifest.record_count,
        "positive_count": manifest.positive_count,
        "generator_seed": manifest.generator_seed,
        "schema_version": manifest.schema_version,
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetManifest(**obj)


def split_train_test(
    records: list[PatientRecord], test_fraction: float, seed: int
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Stratified train/test split.

    Per class, round(class_count * test_fraction) records go to the test set
    (so per-class test counts are within +-1 of the ideal); selection is a
    seeded shuffle within each class; original corpus order is preserved
    inside each output.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = np.array([r.label for r in records])
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for cls in (0, 1):
        cls_idx = np.flatnonzero(labels == cls)
        if len(cls_idx) < 2:
            raise ValueError(f"class {cls} has fewer than 2 members ({len(cls_idx)})")
        n_test = int(round(len(cls_idx) * test_fraction))
        picked = rng.permutation(cls_idx)[:n_test]
        test_idx.update(int(i) for i in picked)
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test
