"""GAP-format TSV parsing, 3-class labels, and stratified k-fold splits.

GAP rows carry a text snippet, a pronoun, and two candidate entity
mentions, each with a character offset and a gold coreference flag.
Offsets are Unicode scalar-value indices (Python string indices), never
bytes. Records that fail validation raise a RowError with the row locus
by default; callers may downgrade to skip-with-warning.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

from .errors import ConfigError, RowError
from .numkit import make_rng

log = logging.getLogger(__name__)

GAP_COLUMNS = (
    "ID",
    "Text",
    "Pronoun",
    "Pronoun-offset",
    "A",
    "A-offset",
    "A-coref",
    "B",
    "B-offset",
    "B-coref",
    "URL",
)

_STREAM_KFOLD = 0x6B666F6C  # "kfol"


class Label(enum.IntEnum):
    """Answer classes in their fixed serialization order."""

    A = 0
    B = 1
    NEITHER = 2


@dataclass(frozen=True)
class GapRecord:
    id: str
    text: str
    pronoun: str
    pronoun_offset: int
    a_text: str
    a_offset: int
    a_coref: bool
    b_text: str
    b_offset: int
    b_coref: bool
    url: str


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of record ids into k folds."""

    k: int
    assignment: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [rid for rid, f in self.assignment.items() if f == fold]


def _parse_offset(value: str, column: str, row: int, record_id: str) -> int:
    try:
        offset = int(value)
    except ValueError:
        raise RowError(f"{column} is not an integer: {value!r}", row=row, record_id=record_id)
    if offset < 0:
        raise RowError(f"{column} must be non-negative, got {offset}", row=row, record_id=record_id)
    return offset


def _parse_bool(value: str, column: str, row: int, record_id: str) -> bool:
    lowered = value.strip().lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    raise RowError(f"{column} must be TRUE or FALSE, got {value!r}", row=row, record_id=record_id)


def _check_surface(text: str, offset: int, surface: str, what: str, row: int, record_id: str):
    if not surface:
        raise RowError(f"{what} surface string is empty", row=row, record_id=record_id)
    if text[offset : offset + len(surface)] != surface:
        raise RowError(
            f"{what} offset {offset} does not point at {surface!r} in the text",
            row=row,
            record_id=record_id,
        )


def validate_record(record: GapRecord, *, row: int = 0) -> GapRecord:
    """Check the offset/surface and coref-flag invariants of one record."""
    _check_surface(record.text, record.pronoun_offset, record.pronoun, "Pronoun", row, record.id)
    _check_surface(record.text, record.a_offset, record.a_text, "A", row, record.id)
    _check_surface(record.text, record.b_offset, record.b_text, "B", row, record.id)
    if record.a_coref and record.b_coref:
        raise RowError("A-coref and B-coref are both TRUE", row=row, record_id=record.id)
    return record


def parse_tsv(lines, *, on_invalid: str = "raise") -> list[GapRecord]:
    """Parse GAP TSV lines (header required) into validated records.

    `lines` is any iterable of strings (an open file works). `on_invalid`
    is "raise" (default) or "skip"; skipped rows are logged with their
    locus so silent data loss cannot corrupt downstream comparisons.
    """
    if on_invalid not in ("raise", "skip"):
        raise ConfigError(f"on_invalid must be 'raise' or 'skip', got {on_invalid!r}")
    it = iter(lines)
    try:
        header_line = next(it)
    except StopIteration:
        raise RowError("empty input: header row required", row=0)
    header = header_line.rstrip("\r\n").split("\t")
    missing = [c for c in GAP_COLUMNS if c not in header]
    if missing:
        raise RowError(f"header is missing columns: {', '.join(missing)}", row=1)
    col = {name: header.index(name) for name in GAP_COLUMNS}

    records = []
    for row_no, line in enumerate(it, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split("\t")
        try:
            if len(parts) != len(header):
                raise RowError(
                    f"expected {len(header)} columns, found {len(parts)}", row=row_no
                )
            rid = parts[col["ID"]]
            record = GapRecord(
                id=rid,
                text=parts[col["Text"]],
                pronoun=parts[col["Pronoun"]],
                pronoun_offset=_parse_offset(parts[col["Pronoun-offset"]], "Pronoun-offset", row_no, rid),
                a_text=parts[col["A"]],
                a_offset=_parse_offset(parts[col["A-offset"]], "A-offset", row_no, rid),
                a_coref=_parse_bool(parts[col["A-coref"]], "A-coref", row_no, rid),
                b_text=parts[col["B"]],
                b_offset=_parse_offset(parts[col["B-offset"]], "B-offset", row_no, rid),
                b_coref=_parse_bool(parts[col["B-coref"]], "B-coref", row_no, rid),
                url=parts[col["URL"]],
            )
            records.append(validate_record(record, row=row_no))
        except RowError as err:
            if on_invalid == "raise":
                raise
            log.warning("skipping invalid record: %s", err)
    return records


def write_tsv(records, out) -> None:
    """Serialize records back to GAP TSV (inverse of parse_tsv)."""
    out.write("\t".join(GAP_COLUMNS) + "\n")
    for r in records:
        row = (
            r.id,
            r.text,
            r.pronoun,
            str(r.pronoun_offset),
            r.a_text,
            str(r.a_offset),
            "TRUE" if r.a_coref else "FALSE",
            r.b_text,
            str(r.b_offset),
            "TRUE" if r.b_coref else "FALSE",
            r.url,
        )
        out.write("\t".join(row) + "\n")


def derive_label(record: GapRecord) -> Label:
    if record.a_coref:
        return Label.A
    if record.b_coref:
        return Label.B
    return Label.NEITHER


def _id_and_label(item) -> tuple[str, Label]:
    if isinstance(item, GapRecord):
        return item.id, derive_label(item)
    rid, label = item
    return rid, Label(label)


def kfold_split(records, k: int, seed: int) -> FoldAssignment:
    """Deterministic label-stratified k-fold assignment.

    Records are grouped by label, each group is shuffled by the seeded
    generator, and a single round-robin counter runs across groups so
    fold sizes differ by at most one overall and per class.
    """
    items = [_id_and_label(r) for r in records]
    if not 2 <= k <= len(items):
        raise ConfigError(f"k must lie in [2, {len(items)}], got {k}")
    ids = [rid for rid, _ in items]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate record ids in k-fold input")

    rng = make_rng(seed, _STREAM_KFOLD)
    assignment: dict[str, int] = {}
    counter = 0
    for label in Label:
        group = [rid for rid, lab in items if lab == label]
        order = rng.permutation(len(group))
        for idx in order:
            assignment[group[idx]] = counter % k
            counter += 1
    return FoldAssignment(k=k, assignment=assignment)


def fold_sizes(fa: FoldAssignment) -> list[int]:
    sizes = [0] * fa.k
    for fold in fa.assignment.values():
        sizes[fold] += 1
    return sizes
