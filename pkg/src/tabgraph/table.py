"""Tables, span resolution and retrieval datasets.

Tables are stored row-major with explicit spans, the way HTML lays them out::

    {"id": "t1",
     "rows": [[{"text": "a", "col_span": 2}], [{"text": "b"}, {"text": "c"}]],
     "context": {"caption": "", "page_title": "", "section_title": ""}}

Converting HTML is left to callers: each ``<tr>`` becomes a row, each
``<td>``/``<th>`` a cell, ``rowspan``/``colspan`` map to ``row_span``/``col_span``
and ``<th>`` sets ``is_header``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class TableError(ValueError):
    """Base class for malformed table data."""


class TableParseError(TableError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


class SchemaError(TableError):
    pass


class LayoutError(TableError):
    pass


class CorpusError(TableError):
    def __init__(self, errors):
        self.errors = list(errors)
        lines = "; ".join(f"line {n}: {m}" for n, m in self.errors)
        super().__init__(f"{len(self.errors)} bad line(s): {lines}")


@dataclass(frozen=True)
class Cell:
    text: str = ""
    row_span: int = 1
    col_span: int = 1
    is_header: bool = False

    @property
    def is_merged(self) -> bool:
        return self.row_span > 1 or self.col_span > 1


@dataclass(frozen=True)
class TableContext:
    caption: str = ""
    page_title: str = ""
    section_title: str = ""

    def fields(self) -> tuple[str, str, str]:
        return (self.caption, self.page_title, self.section_title)

    def text(self) -> str:
        return " ".join(f for f in self.fields() if f)

    def is_empty(self) -> bool:
        return not any(f.strip() for f in self.fields())


@dataclass(frozen=True)
class Table:
    id: str
    rows: tuple[tuple[Cell, ...], ...]
    context: TableContext = field(default_factory=TableContext)

    def __post_init__(self):
        if not self.rows:
            raise SchemaError(f"table {self.id!r} has no rows")
        for r, row in enumerate(self.rows):
            if not row:
                raise SchemaError(f"table {self.id!r}: row {r} is empty")

    @property
    def cells(self) -> list[Cell]:
        return [c for row in self.rows for c in row]

    @property
    def n_merged(self) -> int:
        return sum(c.is_merged for c in self.cells)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "rows": [
                [{"text": c.text, "row_span": c.row_span, "col_span": c.col_span,
                  "is_header": c.is_header} for c in row]
                for row in self.rows
            ],
            "context": {"caption": self.context.caption,
                        "page_title": self.context.page_title,
                        "section_title": self.context.section_title},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def _table_from_obj(obj) -> Table:
    if not isinstance(obj, dict):
        raise SchemaError("table must be a JSON object")
    tid = obj.get("id")
    if not isinstance(tid, str) or not tid:
        raise SchemaError("table id must be a non-empty string")
    raw_rows = obj.get("rows")
    if not isinstance(raw_rows, list):
        raise SchemaError(f"table {tid!r}: 'rows' must be a list")
    rows = []
    for r, raw_row in enumerate(raw_rows):
        if not isinstance(raw_row, list):
            raise SchemaError(f"table {tid!r}: row {r} must be a list")
        row = []
        for c, raw in enumerate(raw_row):
            if not isinstance(raw, dict):
                raise SchemaError(f"table {tid!r}: cell ({r}, {c}) must be an object")
            spans = []
            for key in ("row_span", "col_span"):
                span = raw.get(key, 1)
                if isinstance(span, bool) or not isinstance(span, int) or span < 1:
                    raise SchemaError(
                        f"table {tid!r}: cell ({r}, {c}) has invalid {key}={span!r}")
                spans.append(span)
            text = raw.get("text", "")
            if not isinstance(text, str):
                raise SchemaError(f"table {tid!r}: cell ({r}, {c}) text must be a string")
            row.append(Cell(text, spans[0], spans[1], bool(raw.get("is_header", False))))
        rows.append(tuple(row))
    ctx = obj.get("context") or {}
    if not isinstance(ctx, dict):
        raise SchemaError(f"table {tid!r}: 'context' must be an object")
    context = TableContext(*(str(ctx.get(k) or "") for k in
                             ("caption", "page_title", "section_title")))
    return Table(tid, tuple(rows), context)


def parse_table_json(data: bytes | str) -> Table:
    """Parse one table object from its canonical JSON form."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TableParseError("invalid UTF-8", e.start) from e
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise TableParseError(f"malformed JSON: {e.msg}",
                              len(text[:e.pos].encode("utf-8"))) from e
    return _table_from_obj(obj)


@dataclass(frozen=True)
class GridIndex:
    """Resolved layout: ``occupancy[r, c]`` is an index into ``cells``.

    ``cells`` holds the table's cells in row order followed by any synthetic
    empty cells used to pad ragged rows; ``origins[i]`` is the top-left slot
    of cell ``i``.
    """
    n_rows: int
    n_cols: int
    occupancy: np.ndarray
    cells: tuple[Cell, ...]
    origins: tuple[tuple[int, int], ...]
    n_padded: int = 0

    def rect(self, cell_id: int) -> tuple[int, int, int, int]:
        """Half-open rectangle (r0, c0, r1, c1) covered by a cell."""
        r0, c0 = self.origins[cell_id]
        cell = self.cells[cell_id]
        return r0, c0, r0 + cell.row_span, c0 + cell.col_span


def resolve_grid(table: Table) -> GridIndex:
    """Place cells first-fit, HTML style, and pad uncovered slots."""
    owner: dict[tuple[int, int], int] = {}
    origins = []
    cells = table.cells
    i = 0
    for r, row in enumerate(table.rows):
        c = 0
        for cell in row:
            while (r, c) in owner:
                c += 1
            for rr in range(r, r + cell.row_span):
                for cc in range(c, c + cell.col_span):
                    other = owner.get((rr, cc))
                    if other is not None:
                        raise LayoutError(
                            f"table {table.id!r}: cell {i} at ({r}, {c}) overlaps "
                            f"cell {other} at {origins[other]} in slot ({rr}, {cc})")
                    owner[(rr, cc)] = i
            origins.append((r, c))
            c += cell.col_span
            i += 1

    n_rows = max(rr for rr, _ in owner) + 1
    n_cols = max(cc for _, cc in owner) + 1
    occupancy = np.full((n_rows, n_cols), -1, dtype=np.int64)
    for (rr, cc), k in owner.items():
        occupancy[rr, cc] = k
    cells = list(cells)
    n_padded = 0
    for rr, cc in zip(*np.nonzero(occupancy < 0)):
        occupancy[rr, cc] = len(cells)
        cells.append(Cell(""))
        origins.append((int(rr), int(cc)))
        n_padded += 1
    if n_padded:
        log.warning("table %r: padded %d uncovered slot(s)", table.id, n_padded)
    occupancy.setflags(write=False)
    return GridIndex(n_rows, n_cols, occupancy, tuple(cells), tuple(origins), n_padded)


def iter_corpus(path):
    """Yield ``(lineno, table, error)`` for each non-blank line of a corpus."""
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, parse_table_json(line), None
            except TableError as e:
                yield lineno, None, str(e)


def load_corpus(path) -> dict[str, Table]:
    """Read a JSON-lines table corpus into a dict keyed by table id."""
    tables: dict[str, Table] = {}
    seen_at: dict[str, int] = {}
    errors = []
    for lineno, table, err in iter_corpus(path):
        if err is not None:
            errors.append((lineno, err))
        elif table.id in tables:
            errors.append((lineno, f"duplicate id {table.id!r} "
                                   f"(first seen on line {seen_at[table.id]})"))
        else:
            tables[table.id] = table
            seen_at[table.id] = lineno
    if errors:
        raise CorpusError(errors)
    log.info("loaded %d tables from %s", len(tables), path)
    return tables


def write_corpus(tables, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tables:
            f.write(t.to_json() + "\n")


@dataclass(frozen=True)
class RetrievalInstance:
    query_id: str
    query_text: str
    candidates: tuple[tuple[str, int], ...] = ()

    @property
    def table_ids(self) -> list[str]:
        return [t for t, _ in self.candidates]

    @property
    def grades(self) -> list[int]:
        return [g for _, g in self.candidates]

    @property
    def flagged(self) -> bool:
        """True when the query has no judged candidates."""
        return not self.candidates


def read_queries(path) -> dict[str, str]:
    queries = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            qid, sep, text = line.partition("\t")
            if not sep:
                raise TableError(f"{path}:{lineno}: expected query_id<TAB>text")
            queries[qid] = text
    return queries


def read_qrels(path) -> list[tuple[str, str, int, int]]:
    """Parse TREC qrels into (query_id, table_id, grade, lineno) tuples."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise TableError(f"{path}:{lineno}: expected 'query_id 0 table_id grade'")
            try:
                grade = int(parts[3])
            except ValueError:
                raise TableError(f"{path}:{lineno}: grade {parts[3]!r} is not an integer")
            if grade < 0:
                raise TableError(f"{path}:{lineno}: negative grade")
            out.append((parts[0], parts[2], grade, lineno))
    return out


def load_instances(query_path, qrel_path, corpus) -> list[RetrievalInstance]:
    queries = read_queries(query_path)
    grouped: dict[str, dict[str, int]] = {q: {} for q in queries}
    unknown_tables = 0
    for qid, tid, grade, lineno in read_qrels(qrel_path):
        if qid not in queries:
            raise TableError(f"{qrel_path}:{lineno}: unknown query id {qid!r}")
        if tid not in corpus:
            unknown_tables += 1
            continue
        if tid in grouped[qid]:
            raise TableError(f"{qrel_path}:{lineno}: table {tid!r} judged twice for {qid!r}")
        grouped[qid][tid] = grade
    if unknown_tables:
        log.warning("skipped %d qrel line(s) naming tables outside the corpus",
                    unknown_tables)
    instances = []
    for qid, text in queries.items():
        inst = RetrievalInstance(qid, text, tuple(grouped[qid].items()))
        if inst.flagged:
            log.warning("query %r has no judged candidates", qid)
        instances.append(inst)
    return instances


def write_queries(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(f"{inst.query_id}\t{inst.query_text}\n")


def write_qrels(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            for tid, grade in inst.candidates:
                f.write(f"{inst.query_id} 0 {tid} {grade}\n")
