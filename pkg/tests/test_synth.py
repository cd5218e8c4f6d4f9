import numpy as np
import pytest

from cvrmkit.records import record_to_json, validate_record
from cvrmkit.synth import (
    DISTRACTOR_PHRASES,
    POSITIVE_RULE_MIN,
    RISK_PHRASES,
    count_risk_phrases,
    planted_label,
    synthesize_corpus,
)


class TestPlantedRule:
    def test_counts_distinct_phrases_only(self):
        text = "hypertensie en nogmaals hypertensie"
        assert count_risk_phrases(text) == 1

    def test_word_boundaries(self):
        assert count_risk_phrases("pseudohypertensieachtig") == 0
        assert count_risk_phrases("Hypertensie.") == 1

    def test_rule_threshold(self):
        texts = [" ".join(RISK_PHRASES[:POSITIVE_RULE_MIN])]
        assert planted_label(texts) == 1
        texts = [" ".join(RISK_PHRASES[:POSITIVE_RULE_MIN - 1])]
        assert planted_label(texts) == 0

    def test_lexicons_do_not_overlap(self):
        for a in RISK_PHRASES:
            for b in RISK_PHRASES + DISTRACTOR_PHRASES:
                if a != b:
                    assert a not in b


class TestSynthesizeCorpus:
    def test_exact_positive_count_at_table_scale(self):
        records, manifest = synthesize_corpus(3482, 0.1939, seed=42)
        assert manifest.record_count == 3482
        assert manifest.positive_count == 675
        assert sum(r.label for r in records) == 675

    def test_exact_split_small(self):
        records, manifest = synthesize_corpus(10, 0.5, seed=1)
        assert sum(r.label for r in records) == 5

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            synthesize_corpus(100, 1.5, seed=0)
        with pytest.raises(ValueError):
            synthesize_corpus(100, 0.0, seed=0)

    def test_determinism_is_byte_identical(self):
        a, _ = synthesize_corpus(60, 0.3, seed=9)
        b, _ = synthesize_corpus(60, 0.3, seed=9)
        assert [record_to_json(r) for r in a] == [record_to_json(r) for r in b]

    def test_different_seeds_differ(self):
        a, _ = synthesize_corpus(60, 0.3, seed=9)
        b, _ = synthesize_corpus(60, 0.3, seed=10)
        assert [record_to_json(r) for r in a] != [record_to_json(r) for r in b]

    def test_labels_reproducible_from_texts(self, small_corpus):
        records, _ = small_corpus
        for record in records:
            assert planted_label(record.consult_texts()) == record.label

    def test_planted_phrase_count_bounds(self, small_corpus):
        records, _ = small_corpus
        for record in records:
            n = count_risk_phrases(" ".join(record.consult_texts()))
            if record.label == 1:
                assert n >= POSITIVE_RULE_MIN
            else:
                assert n <= 1

    def test_records_pass_validation_and_age_bounds(self, small_corpus):
        records, _ = small_corpus
        for record in records:
            validate_record(
                {
                    "patient_id": record.patient_id,
                    "age": record.age,
                    "gender": record.gender,
                    "consults": [
                        {"date": c.date.isoformat(), "text": c.text} for c in record.consults
                    ],
                    "medications": [m.atc_code for m in record.medications],
                    "label": record.label,
                }
            )
            assert 65 <= record.age <= 100

    def test_demographics_near_targets(self):
        records, _ = synthesize_corpus(3000, 0.2, seed=3)
        ages = np.array([r.age for r in records])
        male = np.array([r.gender == "M" for r in records])
        assert abs(ages.mean() - 74.5) < 1.5  # clipping shifts the mean slightly
        assert abs(male.mean() - 0.537) < 0.03

    def test_consults_within_one_year_and_sorted(self, small_corpus):
        records, _ = small_corpus
        for record in records:
            dates = [c.date for c in record.consults]
            assert dates == sorted(dates)
            assert {d.year for d in dates} == {2021}
