import pytest

from cvrmkit.atc import (
    AtcTable,
    InvalidAtcCodeError,
    UnknownAtcCodeError,
    atc_decompress,
    atc_prefixes,
    bundled_table,
    is_valid_atc,
)


class TestGrammar:
    @pytest.mark.parametrize("code", ["C", "C07", "C07A", "C07AB", "C07AB02", "A10BK01"])
    def test_valid_codes(self, code):
        assert is_valid_atc(code)

    @pytest.mark.parametrize("code", ["", "c07ab02", "C7", "C07AB0", "C07AB023", "7C", "C07ab02"])
    def test_invalid_codes(self, code):
        assert not is_valid_atc(code)

    def test_prefixes_of_full_code(self):
        assert atc_prefixes("C07AB02") == ["C", "C07", "C07A", "C07AB", "C07AB02"]

    def test_prefixes_of_partial_code(self):
        assert atc_prefixes("C07") == ["C", "C07"]

    def test_prefixes_reject_garbage(self):
        with pytest.raises(InvalidAtcCodeError):
            atc_prefixes("ZZZ")


class TestBundledTable:
    def test_substance_lookup_contains_name(self):
        text = atc_decompress("C07AB02")
        assert "metoprolol" in text
        assert text.startswith("cardiovascular system")

    def test_top_level_only(self):
        assert atc_decompress("C") == "cardiovascular system"

    def test_unknown_code_is_loud(self):
        with pytest.raises(UnknownAtcCodeError):
            atc_decompress("Z99XX99")

    def test_garbage_code_is_loud_not_silent(self):
        # grammar-invalid input: any loud error is fine, empty string is not
        with pytest.raises(ValueError):
            atc_decompress("ZZ99XX99")

    def test_lowercase_input_is_normalized(self):
        assert atc_decompress("c07ab02") == atc_decompress("C07AB02")

    def test_every_full_code_decompresses(self):
        table = bundled_table()
        for code in table.full_codes():
            text = table.decompress(code)
            assert text.count(";") == 4, code

    def test_table_size_and_shape(self):
        table = bundled_table()
        assert len(table) > 200
        assert len(table.full_codes()) > 80


class TestTableParsing:
    def test_duplicate_code_rejected(self, tmp_path):
        path = tmp_path / "dup.tsv"
        path.write_text("code\tlevel\tdescription\nC\t1\tx\nC\t1\ty\n")
        with pytest.raises(ValueError, match="duplicate"):
            AtcTable.from_tsv(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb\tc\n")
        with pytest.raises(ValueError, match="header"):
            AtcTable.from_tsv(path)

    def test_partial_table_misses_level(self, tmp_path):
        path = tmp_path / "partial.tsv"
        path.write_text("code\tlevel\tdescription\nC07AB02\t5\tmetoprolol\n")
        table = AtcTable.from_tsv(path)
        with pytest.raises(UnknownAtcCodeError, match="'C'"):
            table.decompress("C07AB02")
