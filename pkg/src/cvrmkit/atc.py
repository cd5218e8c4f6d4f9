"""ATC medication codes: grammar validation and description decompression.

The WHO Anatomical Therapeutic Chemical classification is a five-level
hierarchy. A full 7-character code like ``C07AB02`` decomposes into
``C`` (anatomical group), ``C07`` (therapeutic group), ``C07A``
(pharmacological group), ``C07AB`` (chemical subgroup) and ``C07AB02``
(substance). A bundled TSV subset covering cardiovascular-relevant groups
plus common geriatric co-medication ships with the package.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

# Valid code shapes: letter / letter+2 digits / ... / full 7-char substance code.
ATC_PATTERN = re.compile(r"^[A-Z](\d{2}([A-Z]([A-Z](\d{2})?)?)?)?$")

# Prefix lengths of the five hierarchy levels.
LEVEL_LENGTHS = (1, 3, 4, 5, 7)

DESCRIPTION_SEPARATOR = "; "

_BUNDLED_TABLE = "atc_subset.tsv"


class InvalidAtcCodeError(ValueError):
    """Raised for strings that do not match the ATC grammar."""


class UnknownAtcCodeError(KeyError):
    """Raised when a syntactically valid code is missing from the lookup table."""

    def __str__(self):  # KeyError quotes its payload by default
        return self.args[0]


def is_valid_atc(code: str) -> bool:
    return bool(ATC_PATTERN.match(code))


def atc_prefixes(code: str) -> list[str]:
    """All hierarchy prefixes of ``code``, shortest first, ending with the code."""
    if not is_valid_atc(code):
        raise InvalidAtcCodeError(f"not an ATC code: {code!r}")
    return [code[:n] for n in LEVEL_LENGTHS if n <= len(code)]


class AtcTable:
    """Lookup table mapping ATC codes to level descriptions.

    File format: TSV with header ``code\\tlevel\\tdescription``.
    """

    def __init__(self, descriptions: dict[str, str]):
        self.descriptions = dict(descriptions)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "AtcTable":
        descriptions: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header.split("\t") != ["code", "level", "description"]:
                raise ValueError(f"unexpected ATC table header: {header!r}")
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"line {lineno}: expected 3 columns, got {len(parts)}")
                code, _level, description = parts
                if not is_valid_atc(code):
                    raise ValueError(f"line {lineno}: invalid ATC code {code!r}")
                if code in descriptions:
                    raise ValueError(f"line {lineno}: duplicate code {code!r}")
                descriptions[code] = description
        return cls(descriptions)

    @classmethod
    def bundled(cls) -> "AtcTable":
        with resources.as_file(resources.files("cvrmkit.resources") / _BUNDLED_TABLE) as p:
            return cls.from_tsv(p)

    def __contains__(self, code: str) -> bool:
        return code in self.descriptions

    def __len__(self) -> int:
        return len(self.descriptions)

    def decompress(self, code: str) -> str:
        """Concatenated level descriptions from anatomical group down to ``code``.

        Raises UnknownAtcCodeError when the code (or any of its ancestors) is
        not in the table; never returns a silent empty string.
        """
        code = code.upper()
        parts = []
        for prefix in atc_prefixes(code):
            try:
                parts.append(self.descriptions[prefix])
            except KeyError:
                raise UnknownAtcCodeError(
                    f"ATC code {code!r}: level {prefix!r} not in lookup table"
                ) from None
        return DESCRIPTION_SEPARATOR.join(parts)

    def full_codes(self) -> list[str]:
        """All 7-character substance codes in the table, sorted."""
        return sorted(c for c in self.descriptions if len(c) == 7)


_bundled_cache: AtcTable | None = None


def bundled_table() -> AtcTable:
    """Shared instance of the bundled table (immutable after load)."""
    global _bundled_cache
    if _bundled_cache is None:
        _bundled_cache = AtcTable.bundled()
    return _bundled_cache


def atc_decompress(code: str, table: AtcTable | None = None) -> str:
    """Module-level convenience over :meth:`AtcTable.decompress`."""
    return (table or bundled_table()).decompress(code)
