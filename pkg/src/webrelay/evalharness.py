"""Scoring extractions against gold data.

Exact match on a key column (URLs normalized by dropping query/fragment),
per-task precision/recall, unweighted per-use-case averages, and cost
aggregation into a per-correct-row figure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from urllib.parse import urlsplit, urlunsplit

from .errors import EmptyEvalError, SchemaMismatchError
from .tables import DataTable

logger = logging.getLogger(__name__)


def normalize_url(url: str) -> str:
    """Drop query + fragment, lowercase scheme/host, trim trailing slashes.

    Idempotent; unparsable input comes back verbatim.
    """
    try:
        parts = urlsplit(url)
    except ValueError:
        logger.warning("could not parse URL %r; keeping verbatim", url)
        return url
    if not parts.scheme or not parts.netloc:
        logger.warning("URL %r is not absolute; keeping verbatim", url)
        return url
    path = parts.path.rstrip("/")
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), path, "", ""))


@dataclass
class GoldDataset:
    task_id: str
    table: DataTable
    key_column: str

    def keys(self) -> set[str]:
        return _key_set(self.table, self.key_column)


def _key_set(table: DataTable, key_column: str) -> set[str]:
    if not any(col.name == key_column for col in table.schema):
        raise SchemaMismatchError(f"missing key column {key_column!r}")
    kind = next(col.kind for col in table.schema if col.name == key_column)
    values = table.column(key_column)
    if kind == "url":
        values = [normalize_url(v) for v in values]
    return {v for v in values if v}


def score_task(gold: GoldDataset, extracted: DataTable) -> tuple[float, float]:
    """(precision, recall) over key-column identities.

    Duplicates in the extraction collapse before intersecting. An empty
    extraction scores precision 1.0 against an empty gold set and 0.0
    otherwise; recall over an empty gold set is 1.0.
    """
    gold_keys = gold.keys()
    extracted_keys = _key_set(extracted, gold.key_column)
    hits = len(gold_keys & extracted_keys)
    if extracted_keys:
        precision = hits / len(extracted_keys)
    else:
        precision = 1.0 if not gold_keys else 0.0
    recall = hits / len(gold_keys) if gold_keys else 1.0
    return precision, recall


@dataclass
class TaskReport:
    task_id: str
    use_case: str
    precision: float
    recall: float
    extracted_rows: int = 0
    gold_rows: int = 0
    correct_rows: float = 0.0
    input_tokens: int = 0
    output_tokens: int = 0
    cost_cents: float = 0.0
    error: str = ""

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class EvalReport:
    per_task: list[TaskReport]
    per_use_case: dict[str, dict[str, float]] = field(default_factory=dict)
    overall_precision: float = 0.0
    overall_recall: float = 0.0
    total_input_tokens: int = 0
    total_output_tokens: int = 0
    total_cost_cents: float = 0.0
    total_correct_rows: float = 0.0
    cost_per_correct_row_cents: float | None = None

    def to_json(self) -> dict:
        return {
            "per_task": [t.to_json() for t in self.per_task],
            "per_use_case": self.per_use_case,
            "overall": {
                "precision": self.overall_precision,
                "recall": self.overall_recall,
            },
            "totals": {
                "input_tokens": self.total_input_tokens,
                "output_tokens": self.total_output_tokens,
                "cost_cents": self.total_cost_cents,
                "correct_rows": self.total_correct_rows,
                "cost_per_correct_row_cents": self.cost_per_correct_row_cents,
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def aggregate(reports: list[TaskReport]) -> EvalReport:
    """Unweighted means per use-case, overall = mean of the use-case means.

    Cost fields are summed; the per-row figure divides total cost by total
    correct rows.
    """
    if not reports:
        raise EmptyEvalError("no task reports to aggregate")
    by_use_case: dict[str, list[TaskReport]] = {}
    for report in reports:
        by_use_case.setdefault(report.use_case, []).append(report)
    per_use_case = {
        uc: {
            "precision": _mean([r.precision for r in group]),
            "recall": _mean([r.recall for r in group]),
            "tasks": float(len(group)),
        }
        for uc, group in sorted(by_use_case.items())
    }
    overall_p = _mean([v["precision"] for v in per_use_case.values()])
    overall_r = _mean([v["recall"] for v in per_use_case.values()])
    total_cost = sum(r.cost_cents for r in reports)
    total_correct = sum(r.correct_rows for r in reports)
    return EvalReport(
        per_task=list(reports),
        per_use_case=per_use_case,
        overall_precision=overall_p,
        overall_recall=overall_r,
        total_input_tokens=sum(r.input_tokens for r in reports),
        total_output_tokens=sum(r.output_tokens for r in reports),
        total_cost_cents=total_cost,
        total_correct_rows=total_correct,
        cost_per_correct_row_cents=(total_cost / total_correct) if total_correct else None,
    )


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def render_text_table(report: EvalReport) -> str:
    """Fixed-width use-case table in the shape of the benchmark's results table."""
    lines = []
    header = f"{'Use-case':<18}{'Pre':>8}{'Rec':>8}{'Tasks':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for use_case, stats in report.per_use_case.items():
        lines.append(
            f"{use_case:<18}{stats['precision'] * 100:>8.1f}{stats['recall'] * 100:>8.1f}"
            f"{int(stats['tasks']):>8d}"
        )
    lines.append("-" * len(header))
    lines.append(
        f"{'Overall':<18}{report.overall_precision * 100:>8.1f}"
        f"{report.overall_recall * 100:>8.1f}{len(report.per_task):>8d}"
    )
    if report.cost_per_correct_row_cents is not None:
        lines.append(
            f"Cost: {report.total_cost_cents:.1f}c total, "
            f"{report.cost_per_correct_row_cents:.2f}c per correct row"
        )
    return "\n".join(lines) + "\n"
