"""Synthetic geriatric EHR corpus with a planted, learnable label signal.

The label of every generated record is a deterministic function of its
consult texts: a record is positive iff at least POSITIVE_RULE_MIN distinct
phrases from RISK_PHRASES occur in the concatenated consults (word-boundary
matching, case-insensitive). Positives are planted with >= 3 risk phrases,
negatives with <= 1; both classes share the distractor lexicon so that
bag-of-words models face non-trivial overlap. Re-running the rule over the
generated texts must reproduce every label exactly (oracle property).
"""

from __future__ import annotations

import datetime as dt
import re

import numpy as np

from .atc import bundled_table
from .records import DatasetManifest, PatientRecord, validate_record

RISK_PHRASES = (
    "hypertensie",
    "diabetes mellitus",
    "myocardinfarct",
    "atriumfibrilleren",
    "hartfalen",
    "hypercholesterolemie",
    "angina pectoris",
    "perifeer arterieel vaatlijden",
    "doorgemaakt cva",
    "chronische nierschade",
)

DISTRACTOR_PHRASES = (
    "artrose",
    "osteoporose",
    "valneiging",
    "geheugenklachten",
    "slaapproblemen",
    "obstipatie",
    "duizeligheid",
    "onbedoeld gewichtsverlies",
    "urineweginfectie",
    "polyfarmacie",
)

# A record is positive iff this many distinct risk phrases occur in its text.
POSITIVE_RULE_MIN = 3

# Table 1 aggregates the generator targets.
AGE_MEAN = 74.5
AGE_STD = 9.3
AGE_CLIP = (65, 100)
MALE_FRACTION = 0.537

_WORD_BOUNDARY = r"[a-zà-öø-ÿ]"

_phrase_patterns = {
    p: re.compile(rf"(?<!{_WORD_BOUNDARY}){re.escape(p)}(?!{_WORD_BOUNDARY})")
    for p in RISK_PHRASES
}

_OPENERS = (
    "Patiënt bezoekt de polikliniek geriatrie voor periodieke controle.",
    "Patiënt komt op het spreekuur in verband met een herbeoordeling.",
    "Reden van komst: jaarlijkse evaluatie op de geheugenpolikliniek.",
    "Patiënt wordt gezien voor een geplande vervolgafspraak.",
)

_HISTORY_TEMPLATES = (
    "Voorgeschiedenis vermeldt {p}.",
    "Patiënt is bekend met {p}.",
    "In de medische voorgeschiedenis staat {p} beschreven.",
    "Er is sprake van {p}.",
    "Tijdens de anamnese komt {p} ter sprake.",
)

_FILLERS = (
    "Mobiliteit is stabiel ten opzichte van het vorige bezoek.",
    "Patiënt woont zelfstandig met ondersteuning van thuiszorg.",
    "Voeding en vochtinname zijn volgens mantelzorger voldoende.",
    "De mmse werd afgenomen en toont een stabiel beeld.",
    "Lichamelijk onderzoek laat geen nieuwe bijzonderheden zien.",
    "Beleid wordt ongewijzigd voortgezet, controle over drie maanden.",
    "Patiënt geeft aan zich over het algemeen redelijk te voelen.",
    "Bij het looppatroon worden geen nieuwe afwijkingen gezien.",
)

_FIRST_NAMES = ("Jan", "Anna", "Pieter", "Els", "Willem", "Maria", "Hendrik", "Johanna", "Kees", "Greet")
_PARTICLES = ("", "de", "van", "van der", "den")
_LAST_NAMES = ("Vries", "Berg", "Bakker", "Visser", "Smit", "Meijer", "Mulder", "Bos", "Dekker", "Jansen")

_MONTH_NAMES = (
    "januari", "februari", "maart", "april", "mei", "juni",
    "juli", "augustus", "september", "oktober", "november", "december",
)

_SYNTH_YEAR = 2021


def count_risk_phrases(text: str) -> int:
    """Distinct RISK_PHRASES occurring in ``text`` (word-boundary, lowercased)."""
    lowered = text.lower()
    return sum(1 for pat in _phrase_patterns.values() if pat.search(lowered))


def planted_label(consult_texts: list[str]) -> int:
    """The planted rule: 1 iff >= POSITIVE_RULE_MIN distinct risk phrases occur."""
    return int(count_risk_phrases(" ".join(consult_texts)) >= POSITIVE_RULE_MIN)


def _format_date(date: dt.date, style: int) -> str:
    if style == 0:
        return f"{date.day:02d}-{date.month:02d}-{date.year}"
    return f"{date.day} {_MONTH_NAMES[date.month - 1]} {date.year}"


def _person_name(rng: np.random.Generator) -> str:
    first = _FIRST_NAMES[rng.integers(len(_FIRST_NAMES))]
    particle = _PARTICLES[rng.integers(len(_PARTICLES))]
    last = _LAST_NAMES[rng.integers(len(_LAST_NAMES))]
    return " ".join(x for x in (first, particle, last) if x)


def _phrase_sentence(phrase: str, rng: np.random.Generator) -> str:
    template = _HISTORY_TEMPLATES[rng.integers(len(_HISTORY_TEMPLATES))]
    return template.format(p=phrase)


def _consult_dates(n: int, rng: np.random.Generator) -> list[dt.date]:
    days = np.sort(rng.choice(365, size=n, replace=False))
    base = dt.date(_SYNTH_YEAR, 1, 1)
    return [base + dt.timedelta(days=int(d)) for d in days]


def _build_consults(
    planted: list[str], distractors: list[str], rng: np.random.Generator
) -> list[dict]:
    n_consults = int(rng.integers(2, 5))
    dates = _consult_dates(n_consults, rng)
    sentence_pool = [_phrase_sentence(p, rng) for p in planted + distractors]
    rng.shuffle(sentence_pool)
    # deal phrase sentences round-robin so every consult carries some history
    per_consult: list[list[str]] = [[] for _ in range(n_consults)]
    for i, sentence in enumerate(sentence_pool):
        per_consult[i % n_consults].append(sentence)
    consults = []
    for i, date in enumerate(dates):
        parts = [_OPENERS[rng.integers(len(_OPENERS))]]
        parts.extend(per_consult[i])
        n_fill = int(rng.integers(2, 5))
        fillers = rng.choice(len(_FILLERS), size=min(n_fill, len(_FILLERS)), replace=False)
        parts.extend(_FILLERS[j] for j in fillers)
        if rng.random() < 0.6:
            parts.append(f"Besproken met collega {_person_name(rng)}.")
        if rng.random() < 0.5:
            follow_up = date + dt.timedelta(days=int(rng.integers(30, 120)))
            parts.append(f"Controle afgesproken op {_format_date(follow_up, int(rng.integers(2)))}.")
        if rng.random() < 0.3:
            parts.append(f"Patiëntnummer {rng.integers(10**7, 10**9)}.")
        consults.append({"date": dates[i].isoformat(), "text": " ".join(parts)})
    return consults


def _sample_medications(label: int, rng: np.random.Generator) -> list[str]:
    codes = bundled_table().full_codes()
    cardio = [c for c in codes if c.startswith("C") or c.startswith("B01")]
    other = [c for c in codes if c not in set(cardio)]
    if label == 1:
        n_cardio, n_other = int(rng.integers(2, 5)), int(rng.integers(0, 3))
    else:
        n_cardio, n_other = int(rng.integers(0, 2)), int(rng.integers(1, 5))
    picked = list(rng.choice(cardio, size=n_cardio, replace=False)) + list(
        rng.choice(other, size=n_other, replace=False)
    )
    return sorted(str(c) for c in picked)


def synthesize_corpus(
    n: int, positive_ratio: float, seed: int
) -> tuple[list[PatientRecord], DatasetManifest]:
    """Generate ``n`` patient records with round(n * positive_ratio) positives.

    Deterministic for a fixed seed; every record passes schema validation and
    its label is reproduced by :func:`planted_label` over its consult texts.
    """
    if not 0 < positive_ratio < 1:
        raise ValueError(f"positive_ratio must be in (0, 1), got {positive_ratio}")
    if n < 10:
        raise ValueError(f"need n >= 10, got {n}")
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_ratio))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)

    records = []
    for i in range(n):
        label = int(labels[i])
        age = int(np.clip(round(rng.normal(AGE_MEAN, AGE_STD)), *AGE_CLIP))
        gender = "M" if rng.random() < MALE_FRACTION else "F"
        if label == 1:
            k_risk = int(rng.integers(POSITIVE_RULE_MIN, 6))
        else:
            k_risk = int(rng.integers(0, 2))
        risk = list(rng.choice(RISK_PHRASES, size=k_risk, replace=False))
        distract = list(rng.choice(DISTRACTOR_PHRASES, size=int(rng.integers(2, 5)), replace=False))
        consults = _build_consults(risk, distract, rng)
        raw = {
            "patient_id": f"P{i:06d}",
            "age": age,
            "gender": gender,
            "consults": consults,
            "medications": _sample_medications(label, rng),
            "label": label,
        }
        record = validate_record(raw)
        assert planted_label(record.consult_texts()) == label, "planted rule violated"
        records.append(record)

    manifest = DatasetManifest(record_count=n, positive_count=n_pos, generator_seed=seed)
    return records, manifest
