"""Schema-bound cells, rows, and table serialization.

Cells are produced by one of three mechanisms: direct text/link extraction,
a regular expression over the element text, or a question-answering model
call over the element text. Missing data always yields an empty cell, never
a dropped row, and QA failures never abort a replay.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field

from . import dom
from .errors import NotALinkError
from .prompting import load_template

logger = logging.getLogger(__name__)

_DONT_KNOW = re.compile(r"^\s*i\s+don.?t\s+know\b", re.I)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "text"  # text | url


def column_specs(names: list[str], kinds: dict[str, str] | None = None) -> list[ColumnSpec]:
    """Columns from names; kind defaults to url when the name suggests one."""
    kinds = kinds or {}
    out = []
    for name in names:
        kind = kinds.get(name) or ("url" if "url" in name.lower() else "text")
        out.append(ColumnSpec(name, kind))
    return out


@dataclass
class Cell:
    value: str
    provenance: str = "direct"  # direct | regex:<pattern> | qa:<question>
    source_selector: str = ""

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "provenance": self.provenance,
            "source_selector": self.source_selector,
        }


Row = dict[str, Cell]


@dataclass
class DataTable:
    schema: list[ColumnSpec]
    rows: list[Row] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def add_row(self, row: Row) -> None:
        self.rows.append(self._conform(row))

    def _conform(self, row: Row) -> Row:
        """Exactly one cell per schema column; extras dropped."""
        return {
            col.name: row.get(col.name, Cell(value="")) for col in self.schema
        }

    def values(self) -> list[dict[str, str]]:
        return [{k: cell.value for k, cell in row.items()} for row in self.rows]

    def column(self, name: str) -> list[str]:
        return [row[name].value for row in self.rows]


def extract_cell(
    kind: str,
    node: dom.DomNode | None,
    snapshot: dom.DomSnapshot | None,
    column: str,
    param: str | None = None,
    qa_gateway=None,
    current_url: str = "",
    source_selector: str = "",
    warnings: list[str] | None = None,
) -> Cell:
    """One cell via direct text, link resolution, page URL, regex, or QA.

    kind: text | link | current_url | qa. ``param`` is the regex for text or
    the question for qa. Failures degrade to an empty cell plus a warning;
    replay control flow never depends on a cell's outcome.
    """
    warnings = warnings if warnings is not None else []
    if kind == "current_url":
        return Cell(value=current_url, provenance="direct", source_selector="")
    if node is None:
        warnings.append(f"column {column!r}: selector {source_selector!r} matched nothing")
        return Cell(value="", provenance="direct", source_selector=source_selector)
    if kind == "text":
        text = node.visible_text()
        if param:
            match = re.search(param, text)
            if not match:
                warnings.append(
                    f"column {column!r}: regex {param!r} found nothing in {text[:60]!r}"
                )
                return Cell("", provenance=f"regex:{param}", source_selector=source_selector)
            value = match.group(1) if match.groups() else match.group(0)
            return Cell(value, provenance=f"regex:{param}", source_selector=source_selector)
        return Cell(text, provenance="direct", source_selector=source_selector)
    if kind == "link":
        try:
            url = dom.resolve_link(snapshot, node.node_id)
        except NotALinkError:
            warnings.append(f"column {column!r}: node <{node.tag}> has no link")
            return Cell("", provenance="direct", source_selector=source_selector)
        return Cell(url, provenance="direct", source_selector=source_selector)
    if kind == "qa":
        question = param or ""
        prompt = load_template("qa").format(question=question, text=node.visible_text())
        try:
            answer, _usage = qa_gateway.complete([{"role": "user", "content": prompt}])
        except Exception as exc:  # QA must never break replay
            warnings.append(f"column {column!r}: QA call failed ({exc})")
            return Cell("", provenance=f"qa:{question}", source_selector=source_selector)
        answer = dom.normalize_ws(answer)
        if not answer or _DONT_KNOW.match(answer):
            warnings.append(f"column {column!r}: QA could not answer {question!r}")
            return Cell("", provenance=f"qa:{question}", source_selector=source_selector)
        return Cell(answer, provenance=f"qa:{question}", source_selector=source_selector)
    raise ValueError(f"unknown extraction kind {kind!r}")


# --- serialization -----------------------------------------------------------------


def serialize(table: DataTable, format: str = "csv") -> bytes:
    """CSV (header row, RFC quoting) or JSON (array of objects), UTF-8."""
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow([col.name for col in table.schema])
        for row in table.rows:
            writer.writerow([row[col.name].value for col in table.schema])
        return buffer.getvalue().encode("utf-8")
    if format == "json":
        payload = [
            {col.name: row[col.name].value for col in table.schema}
            for row in table.rows
        ]
        return (json.dumps(payload, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    raise ValueError(f"unknown format {format!r}")


def parse_table(data: bytes, format: str, kinds: dict[str, str] | None = None) -> DataTable:
    """Inverse of serialize; provenance is not round-tripped."""
    text = data.decode("utf-8")
    if format == "csv":
        reader = csv.reader(io.StringIO(text))
        rows = list(reader)
        if not rows:
            return DataTable(schema=[])
        schema = column_specs(rows[0], kinds)
        table = DataTable(schema=schema)
        for raw in rows[1:]:
            table.add_row(
                {col.name: Cell(raw[i] if i < len(raw) else "") for i, col in enumerate(schema)}
            )
        return table
    if format == "json":
        payload = json.loads(text)
        names: list[str] = []
        for obj in payload:
            for key in obj:
                if key not in names:
                    names.append(key)
        schema = column_specs(names, kinds)
        table = DataTable(schema=schema)
        for obj in payload:
            table.add_row({name: Cell(str(obj.get(name, ""))) for name in names})
        return table
    raise ValueError(f"unknown format {format!r}")
