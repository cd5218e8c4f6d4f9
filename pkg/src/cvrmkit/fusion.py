"""Structured-feature construction and late fusion.

Per patient: medication ATC codes are decompressed to descriptions and
embedded (precomputed 768-dim vectors when available, otherwise a
deterministic signed-feature-hashing fallback), mean-aggregated into one
vector; age/gender become a 3-dim anthropometric vector. Fusion is a plain
concatenation [text 512 | medications 768 | anthropometrics 3] recorded with
modality spans, applied strictly after text pooling.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .atc import AtcTable, UnknownAtcCodeError, bundled_table
from .baselines import tfidf_tokenize
from .records import MedicationEntry, PatientRecord
from .synth import AGE_MEAN, AGE_STD

log = logging.getLogger(__name__)

MED_EMBED_DIM = 768
ANTHRO_DIM = 3  # standardized age + one-hot gender
TEXT_DIM = 512

MODALITY_ORDER = ("text", "medications", "anthropometrics")


@dataclass(frozen=True)
class MedicationEmbedding:
    vector: np.ndarray
    source: str  # "precomputed_file" | "hashed_fallback"


def load_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    """Read a TSV of ``code \\t v1 ... v768`` rows into a code -> vector map."""
    mapping: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            code = parts[0]
            if len(parts) - 1 != MED_EMBED_DIM:
                raise ValueError(
                    f"line {lineno}: expected {MED_EMBED_DIM} values, got {len(parts) - 1}"
                )
            if code in mapping:
                raise ValueError(f"line {lineno}: duplicate code {code!r}")
            try:
                mapping[code] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric embedding value") from None
    return mapping


def save_embedding_file(mapping: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for code in sorted(mapping):
            vec = mapping[code]
            if vec.shape != (MED_EMBED_DIM,):
                raise ValueError(f"{code}: vector must have shape ({MED_EMBED_DIM},)")
            fh.write(code + "\t" + "\t".join(repr(float(x)) for x in vec) + "\n")


def hashed_fallback_embed(description: str) -> np.ndarray:
    """Signed feature hashing of lowercase word tokens into 768 dims.

    Deterministic and seedless (md5-based); the result is L2-normalized, or
    exactly zero for empty text.
    """
    vec = np.zeros(MED_EMBED_DIM, dtype=np.float64)
    for token in tfidf_tokenize(description):
        digest = hashlib.md5(token.encode("utf-8")).digest()
        index = int.from_bytes(digest[:4], "little") % MED_EMBED_DIM
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[index] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


class HashedDescriptionEmbedder:
    """Decompress the ATC code to its description chain, then feature-hash it."""

    source = "hashed_fallback"

    def __init__(self, table: AtcTable | None = None):
        self.table = table or bundled_table()

    def __call__(self, entry: MedicationEntry) -> np.ndarray:
        description = entry.description or self.table.decompress(entry.atc_code)
        return hashed_fallback_embed(description)


class PrecomputedEmbedder:
    """Serve 768-dim vectors from a precomputed embedding file."""

    source = "precomputed_file"

    def __init__(self, mapping: dict[str, np.ndarray]):
        self.mapping = mapping

    def __call__(self, entry: MedicationEntry) -> np.ndarray:
        try:
            return self.mapping[entry.atc_code]
        except KeyError:
            raise UnknownAtcCodeError(
                f"ATC code {entry.atc_code!r} not in precomputed embedding file"
            ) from None


def aggregate_patient_meds(
    entries, embedder, skip_unknown: bool = False
) -> MedicationEmbedding:
    """Arithmetic mean of per-medication vectors; empty list gives zeros."""
    vectors = []
    for entry in entries:
        try:
            vectors.append(embedder(entry))
        except UnknownAtcCodeError:
            if not skip_unknown:
                raise
            warnings.warn(f"skipping unknown medication code {entry.atc_code!r}")
    if vectors:
        vector = np.mean(vectors, axis=0)
    else:
        vector = np.zeros(MED_EMBED_DIM, dtype=np.float64)
    return MedicationEmbedding(vector=vector, source=embedder.source)


def anthro_vector(age: int, gender: str) -> np.ndarray:
    """[standardized age, is_male, is_female] with fixed population constants."""
    if gender not in ("M", "F"):
        raise ValueError(f"gender must be 'M' or 'F', got {gender!r}")
    return np.array(
        [(age - AGE_MEAN) / AGE_STD, 1.0 if gender == "M" else 0.0, 1.0 if gender == "F" else 0.0]
    )


@dataclass(frozen=True)
class FusedFeature:
    """Concatenated [text | medications | anthropometrics] with recorded spans."""

    vector: np.ndarray
    spans: dict[str, tuple[int, int]]

    def modality(self, name: str) -> np.ndarray:
        start, stop = self.spans[name]
        return self.vector[start:stop]


def late_fuse(
    text_feature: np.ndarray, med_embedding: np.ndarray, anthro: np.ndarray
) -> FusedFeature:
    """Concatenate modality vectors in the fixed MODALITY_ORDER."""
    text_feature = np.asarray(text_feature, dtype=np.float64)
    med_embedding = np.asarray(med_embedding, dtype=np.float64)
    anthro = np.asarray(anthro, dtype=np.float64)
    expected = {
        "text": (text_feature, TEXT_DIM),
        "medications": (med_embedding, MED_EMBED_DIM),
        "anthropometrics": (anthro, ANTHRO_DIM),
    }
    spans: dict[str, tuple[int, int]] = {}
    parts = []
    offset = 0
    for name in MODALITY_ORDER:
        vec, dim = expected[name]
        if vec.shape != (dim,):
            raise ValueError(f"{name}: expected shape ({dim},), got {vec.shape}")
        spans[name] = (offset, offset + dim)
        parts.append(vec)
        offset += dim
    return FusedFeature(vector=np.concatenate(parts), spans=spans)


def structured_vector(
    record: PatientRecord, embedder, skip_unknown: bool = False
) -> np.ndarray:
    """The 771-dim structured block [medications 768 | anthropometrics 3]."""
    meds = aggregate_patient_meds(record.medications, embedder, skip_unknown=skip_unknown)
    return np.concatenate([meds.vector, anthro_vector(record.age, record.gender)])
