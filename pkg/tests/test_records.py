import json

import numpy as np
import pytest

from cvrmkit.records import (
    CorpusFormatError,
    SchemaError,
    load_corpus,
    record_to_json,
    save_corpus,
    split_train_test,
    validate_record,
)


def make_raw(**overrides):
    raw = {
        "patient_id": "P1",
        "age": 80,
        "gender": "M",
        "consults": [
            {"date": "2021-02-01", "text": "eerste consult"},
            {"date": "2021-06-01", "text": "tweede consult"},
        ],
        "medications": ["C07AB02"],
        "label": 1,
    }
    raw.update(overrides)
    return raw


class TestValidation:
    def test_valid_record_round_trips_fields(self):
        record = validate_record(make_raw())
        assert record.patient_id == "P1"
        assert record.age == 80
        assert [c.text for c in record.consults] == ["eerste consult", "tweede consult"]
        assert record.medications[0].atc_code == "C07AB02"

    def test_label_out_of_range_names_field(self):
        with pytest.raises(SchemaError) as err:
            validate_record(make_raw(label=2))
        assert err.value.field_name == "label"

    @pytest.mark.parametrize(
        "overrides,field",
        [
            ({"age": 17}, "age"),
            ({"age": 111}, "age"),
            ({"age": "80"}, "age"),
            ({"gender": "X"}, "gender"),
            ({"consults": []}, "consults"),
            ({"consults": [{"date": "2021-01-01", "text": "   "}]}, "consults"),
            ({"medications": ["c07ab02"]}, "medications"),
            ({"medications": ["C7"]}, "medications"),
            ({"patient_id": ""}, "patient_id"),
        ],
    )
    def test_schema_violations(self, overrides, field):
        with pytest.raises(SchemaError) as err:
            validate_record(make_raw(**overrides))
        assert err.value.field_name == field

    def test_consults_must_be_sorted(self):
        consults = [
            {"date": "2021-06-01", "text": "tweede"},
            {"date": "2021-02-01", "text": "eerste"},
        ]
        with pytest.raises(SchemaError):
            validate_record(make_raw(consults=consults))


class TestCorpusIO:
    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_corpus(path) == []

    def test_save_load_round_trip_is_byte_identical(self, tmp_path):
        record = validate_record(make_raw())
        path = tmp_path / "one.jsonl"
        save_corpus([record], path)
        first = path.read_bytes()
        save_corpus(load_corpus(path), path)
        assert path.read_bytes() == first

    def test_malformed_json_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(record_to_json(validate_record(make_raw())) + "\n{oops\n")
        with pytest.raises(CorpusFormatError) as err:
            load_corpus(path)
        assert err.value.lineno == 2

    def test_schema_violation_reports_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(make_raw(label=2)) + "\n")
        with pytest.raises(CorpusFormatError) as err:
            load_corpus(path)
        assert "label" in str(err.value)

    def test_duplicate_patient_id_rejected(self, tmp_path):
        line = record_to_json(validate_record(make_raw()))
        path = tmp_path / "dup.jsonl"
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(CorpusFormatError) as err:
            load_corpus(path)
        assert "duplicate" in str(err.value)

    def test_order_preserved(self, tmp_path):
        records = [
            validate_record(make_raw(patient_id=f"P{i}", label=i % 2)) for i in range(10)
        ]
        path = tmp_path / "many.jsonl"
        save_corpus(records, path)
        assert [r.patient_id for r in load_corpus(path)] == [f"P{i}" for i in range(10)]


class TestSplit:
    def test_table_shaped_split_counts(self, table_corpus=None):
        # synthetic stand-in with the documented class sizes
        records = [
            validate_record(make_raw(patient_id=f"P{i}", label=1 if i < 675 else 0))
            for i in range(3482)
        ]
        train, test = split_train_test(records, 0.2, seed=42)
        test_pos = sum(r.label for r in test)
        test_neg = len(test) - test_pos
        assert test_pos == 135
        assert test_neg in (561, 562)
        assert len(train) + len(test) == 3482

    def test_small_balanced_split(self):
        records = [
            validate_record(make_raw(patient_id=f"P{i}", label=i % 2)) for i in range(10)
        ]
        train, test = split_train_test(records, 0.2, seed=0)
        assert sum(r.label for r in test) == 1
        assert len(test) == 2

    def test_single_member_class_is_an_error(self):
        records = [validate_record(make_raw(patient_id="P0", label=1))]
        records += [
            validate_record(make_raw(patient_id=f"P{i}", label=0)) for i in range(1, 6)
        ]
        with pytest.raises(ValueError):
            split_train_test(records, 0.2, seed=0)

    def test_disjoint_union_and_determinism(self):
        records = [
            validate_record(make_raw(patient_id=f"P{i}", label=int(i % 5 == 0)))
            for i in range(60)
        ]
        train1, test1 = split_train_test(records, 0.3, seed=5)
        train2, test2 = split_train_test(records, 0.3, seed=5)
        assert [r.patient_id for r in train1] == [r.patient_id for r in train2]
        assert [r.patient_id for r in test1] == [r.patient_id for r in test2]
        ids = {r.patient_id for r in train1} | {r.patient_id for r in test1}
        assert len(ids) == 60

    def test_stratification_bound_over_seeds_and_fractions(self):
        rng = np.random.default_rng(3)
        labels = (rng.random(173) < 0.23).astype(int)
        labels[:2] = 1  # ensure both classes have members
        records = [
            validate_record(make_raw(patient_id=f"P{i}", label=int(y)))
            for i, y in enumerate(labels)
        ]
        global_ratio = labels.mean()
        for seed in range(5):
            for fraction in (0.15, 0.2, 0.33, 0.5):
                _, test = split_train_test(records, fraction, seed=seed)
                test_ratio = sum(r.label for r in test) / len(test)
                assert abs(test_ratio - global_ratio) <= 1.0 / len(test) + 1e-12
