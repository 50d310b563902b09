"""Compile recordings into programs and execute them without policy calls.

A program is straight-line navigation and extraction with at most one level
of loops: each recorded list block becomes a loop over CSS-matched items and
pages, with repeated-item filtering to survive pagination cycles; recorded
in-item navigation becomes a second pass over the collected URLs. The only
model the executor may touch is the question-answering one, and only when
the recording saved an AnswerQuestion op.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from . import dom
from .dsl import Recording
from .errors import PaginationDegenerateError, RecordingCompileError, WebRelayError
from .evalharness import normalize_url
from .selectorgen import GeneralizedSelector
from .session import NavigationSession
from .tables import Cell, ColumnSpec, DataTable, Row, extract_cell

logger = logging.getLogger(__name__)

# A page whose identities are at least this much already-seen ends the loop
# (tolerates pinned/sticky leading items without looping forever).
REPEAT_STOP_FRACTION = 0.9


@dataclass
class ExtractOp:
    kind: str  # save_text | save_link | answer_question | save_current_url
    column: str
    selector: GeneralizedSelector | None = None
    regex: str | None = None
    question: str = ""

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "column": self.column,
            "selector": self.selector.to_json() if self.selector else None,
            "regex": self.regex,
            "question": self.question,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExtractOp":
        return cls(
            kind=data["kind"],
            column=data["column"],
            selector=GeneralizedSelector.from_json(data["selector"])
            if data.get("selector")
            else None,
            regex=data.get("regex"),
            question=data.get("question", ""),
        )


@dataclass
class Step:
    """One program step; ``variant`` selects which fields apply."""

    variant: str  # navigate | interact | emit | loop | second_pass
    url: str = ""
    selector: GeneralizedSelector | None = None
    interact_kind: str = ""
    value: str | None = None
    op: ExtractOp | None = None
    container: GeneralizedSelector | None = None
    body_ops: list[ExtractOp] = field(default_factory=list)
    pagination: GeneralizedSelector | None = None
    max_pages: int = 5
    url_column: str = ""

    def to_json(self) -> dict:
        data: dict = {"variant": self.variant}
        if self.variant == "navigate":
            data["url"] = self.url
        elif self.variant == "interact":
            data["selector"] = self.selector.to_json() if self.selector else None
            data["kind"] = self.interact_kind
            data["value"] = self.value
        elif self.variant == "emit":
            data["op"] = self.op.to_json()
        elif self.variant == "loop":
            data["container"] = self.container.to_json()
            data["body_ops"] = [op.to_json() for op in self.body_ops]
            data["pagination"] = self.pagination.to_json() if self.pagination else None
            data["max_pages"] = self.max_pages
        elif self.variant == "second_pass":
            data["url_column"] = self.url_column
            data["body_ops"] = [op.to_json() for op in self.body_ops]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "Step":
        variant = data["variant"]
        if variant == "navigate":
            return cls(variant, url=data["url"])
        if variant == "interact":
            return cls(
                variant,
                selector=GeneralizedSelector.from_json(data["selector"])
                if data.get("selector")
                else None,
                interact_kind=data["kind"],
                value=data.get("value"),
            )
        if variant == "emit":
            return cls(variant, op=ExtractOp.from_json(data["op"]))
        if variant == "loop":
            return cls(
                variant,
                container=GeneralizedSelector.from_json(data["container"]),
                body_ops=[ExtractOp.from_json(o) for o in data["body_ops"]],
                pagination=GeneralizedSelector.from_json(data["pagination"])
                if data.get("pagination")
                else None,
                max_pages=data["max_pages"],
            )
        if variant == "second_pass":
            return cls(
                variant,
                url_column=data["url_column"],
                body_ops=[ExtractOp.from_json(o) for o in data["body_ops"]],
            )
        raise RecordingCompileError(f"unknown step variant {variant!r}")


@dataclass
class Program:
    start_url: str
    schema: list[ColumnSpec]
    key_column: str
    steps: list[Step] = field(default_factory=list)
    hidden_columns: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format": "webrelay-program/1",
            "start_url": self.start_url,
            "schema": [{"name": c.name, "kind": c.kind} for c in self.schema],
            "key_column": self.key_column,
            "hidden_columns": self.hidden_columns,
            "steps": [step.to_json() for step in self.steps],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Program":
        data = json.loads(text)
        return cls(
            start_url=data["start_url"],
            schema=[ColumnSpec(c["name"], c["kind"]) for c in data.get("schema", [])],
            key_column=data.get("key_column", ""),
            hidden_columns=data.get("hidden_columns", []),
            steps=[Step.from_json(s) for s in data.get("steps", [])],
        )


_SAVE_TO_OP = {
    "SaveText": "save_text",
    "SaveLink": "save_link",
    "AnswerQuestion": "answer_question",
    "SaveCurrentURL": "save_current_url",
}


def compile_recording(recording: Recording) -> Program:
    """Turn a well-formed recording into a replayable program."""
    try:
        recording.check_wellformed()
    except RecordingCompileError:
        raise
    except WebRelayError as exc:
        raise RecordingCompileError(str(exc)) from exc

    program = Program(
        start_url=recording.start_url,
        schema=list(recording.schema),
        key_column=recording.key_column,
    )
    program.steps.append(Step("navigate", url=recording.start_url))

    loop_fields: list[ExtractOp] = []
    detail_ops: list[ExtractOp] = []
    open_block = None

    for step in recording.steps:
        action = step.action
        kind = action.kind
        if kind == "EnterList":
            open_block = recording.list_blocks[int(step.scope.split(":", 1)[1])]
            loop_fields = []
            detail_ops = []
            continue
        if kind == "ExitList":
            assert open_block is not None
            program.steps.append(
                Step(
                    "loop",
                    container=open_block.list_selector.container,
                    body_ops=loop_fields,
                    pagination=open_block.pagination,
                    max_pages=recording.max_pages,
                )
            )
            if open_block.detail_url_column:
                program.hidden_columns.append(open_block.detail_url_column)
                program.steps.append(
                    Step(
                        "second_pass",
                        url_column=open_block.detail_url_column,
                        body_ops=detail_ops,
                    )
                )
            open_block = None
            continue
        if kind in ("Finish", "Fail"):
            continue
        if step.scope.startswith("list:"):
            if kind not in _SAVE_TO_OP:
                raise RecordingCompileError(f"{kind} inside a list is not replayable")
            loop_fields.append(_to_op(step))
            continue
        if step.scope.startswith("detail:"):
            if kind == "GoBack":
                continue
            if kind not in _SAVE_TO_OP:
                raise RecordingCompileError(f"{kind} inside a detail pass is not replayable")
            detail_ops.append(_to_op(step))
            continue
        # global scope
        if kind in _SAVE_TO_OP:
            program.steps.append(Step("emit", op=_to_op(step)))
        elif kind == "Click":
            program.steps.append(
                Step("interact", selector=step.selector, interact_kind="click")
            )
        elif kind == "TypeInput":
            program.steps.append(
                Step(
                    "interact",
                    selector=step.selector,
                    interact_kind="type",
                    value=action.value,
                )
            )
        elif kind == "GoBack":
            program.steps.append(Step("interact", interact_kind="back"))
        else:
            raise RecordingCompileError(f"cannot compile {kind} step")
    return program


def _to_op(step) -> ExtractOp:
    action = step.action
    return ExtractOp(
        kind=_SAVE_TO_OP[action.kind],
        column=action.column,
        selector=step.selector,
        regex=action.regex,
        question=action.question,
    )


# --- execution ---------------------------------------------------------------------


@dataclass
class ExecutionLog:
    pages_per_loop: list[int] = field(default_factory=list)
    rows_emitted: int = 0
    duplicates_dropped: int = 0
    second_pass_failures: int = 0
    warnings: list[str] = field(default_factory=list)


def first_match(snapshot: dom.DomSnapshot, selector: GeneralizedSelector,
                scope: int | None = None) -> dom.DomNode | None:
    """Replay matching rule: first alternative with any match wins."""
    for alternative in selector.alternatives:
        matches = dom.query(snapshot, alternative, scope=scope)
        if matches:
            return matches[0]
    return None


def all_matches(snapshot: dom.DomSnapshot, selector: GeneralizedSelector) -> list[dom.DomNode]:
    for alternative in selector.alternatives:
        matches = dom.query(snapshot, alternative)
        if matches:
            return matches
    return []


def execute(program: Program, session: NavigationSession, qa=None) -> tuple[DataTable, ExecutionLog]:
    """Run the program; returns the schema-bound table plus an execution log.

    No policy/chooser/verifier model is reachable from here by construction:
    the executor only receives the QA gateway.
    """
    log = ExecutionLog()
    globals_map: dict[str, Cell] = {}
    rows: list[Row] = []

    for step in program.steps:
        if step.variant == "navigate":
            if session.url != step.url or session.current is None:
                session.navigate(step.url)
        elif step.variant == "interact":
            _run_interact(step, session, log)
        elif step.variant == "emit":
            cell = _run_op(step.op, session, None, qa, log)
            globals_map[step.op.column] = cell
        elif step.variant == "loop":
            rows.extend(_run_loop(step, program, session, qa, log))
        elif step.variant == "second_pass":
            _run_second_pass(step, program, session, qa, rows, log)

    rows = attach_globals(rows, globals_map)
    table = DataTable(schema=list(program.schema), warnings=list(log.warnings))
    for row in rows:
        table.add_row(row)
    log.rows_emitted = len(table.rows)
    return table, log


def _run_interact(step: Step, session: NavigationSession, log: ExecutionLog) -> None:
    if step.interact_kind == "back":
        session.go_back()
        return
    assert step.selector is not None
    node = first_match(session.current, step.selector)
    if node is None:
        log.warnings.append(f"interact target {step.selector.text!r} not found; skipped")
        return
    for alternative in step.selector.alternatives:
        matches = dom.query(session.current, alternative)
        if matches:
            session.interact(alternative, step.interact_kind, step.value)
            return


def _run_op(op: ExtractOp, session: NavigationSession, scope: int | None,
            qa, log: ExecutionLog) -> Cell:
    snapshot = session.current
    if op.kind == "save_current_url":
        return Cell(value=session.url, provenance="direct")
    node = first_match(snapshot, op.selector, scope=scope) if op.selector else None
    kind = {"save_text": "text", "save_link": "link", "answer_question": "qa"}[op.kind]
    param = op.regex if op.kind == "save_text" else (op.question or None)
    return extract_cell(
        kind,
        node,
        snapshot,
        op.column,
        param=param,
        qa_gateway=qa,
        current_url=session.url,
        source_selector=op.selector.text if op.selector else "",
        warnings=log.warnings,
    )


def _identity(row: Row, program: Program) -> str:
    key_col = program.key_column
    kinds = {c.name: c.kind for c in program.schema}
    if key_col and key_col in row and row[key_col].value:
        value = row[key_col].value
        return normalize_url(value) if kinds.get(key_col) == "url" else value
    return json.dumps(
        [(k, cell.value) for k, cell in sorted(row.items())], ensure_ascii=False
    )


def _run_loop(step: Step, program: Program, session: NavigationSession,
              qa, log: ExecutionLog) -> list[Row]:
    rows: list[Row] = []
    seen: set[str] = set()
    pages = 0
    while True:
        snapshot = session.current
        items = all_matches(snapshot, step.container)
        pages += 1
        if not items:
            log.warnings.append(
                f"list selector {step.container.text!r} matched nothing on {session.url}"
            )
            break
        seen_before = set(seen)
        page_keys: list[str] = []
        for item in items:
            row: Row = {}
            for op in step.body_ops:
                row[op.column] = _run_op(op, session, item.node_id, qa, log)
            key = _identity(row, program)
            page_keys.append(key)
            if key in seen:
                log.duplicates_dropped += 1
                continue
            seen.add(key)
            rows.append(row)
        if pages >= step.max_pages:
            break
        repeat_fraction = sum(1 for k in page_keys if k in seen_before) / len(page_keys)
        if pages > 1 and repeat_fraction >= REPEAT_STOP_FRACTION:
            break
        if step.pagination is None:
            break
        target = first_match(snapshot, step.pagination)
        if target is None:
            break
        if any(target is item for item in items) or (items and target is items[0].parent):
            raise PaginationDegenerateError(
                f"pagination selector {step.pagination.text!r} targets the list itself"
            )
        _follow_pagination(step.pagination, target, session, log)
        if session.current is snapshot:
            break  # interaction had no effect; avoid spinning
    log.pages_per_loop.append(pages)
    return rows


def _follow_pagination(selector: GeneralizedSelector, target: dom.DomNode,
                       session: NavigationSession, log: ExecutionLog) -> None:
    if target.tag == "a" and "href" in target.attributes:
        session.navigate(dom.resolve_link(session.current, target.node_id))
        return
    for alternative in selector.alternatives:
        matches = dom.query(session.current, alternative)
        if matches:
            session.interact(alternative, "click")
            return


def _run_second_pass(step: Step, program: Program, session: NavigationSession,
                     qa, rows: list[Row], log: ExecutionLog) -> None:
    for row in rows:
        cell = row.get(step.url_column)
        if cell is None or not cell.value:
            log.second_pass_failures += 1
            log.warnings.append("second pass: row has no detail URL; skipped")
            continue
        try:
            session.navigate(cell.value)
        except WebRelayError as exc:
            log.second_pass_failures += 1
            log.warnings.append(f"second pass: {cell.value} failed ({exc}); row kept")
            continue
        for op in step.body_ops:
            row[op.column] = _run_op(op, session, None, qa, log)


def attach_globals(rows: list[Row], globals_map: dict[str, Cell]) -> list[Row]:
    """Broadcast globally saved values onto every row; row cells win."""
    if not globals_map:
        return rows
    out = []
    for row in rows:
        merged = dict(row)
        for column, cell in globals_map.items():
            if column not in merged:
                merged[column] = Cell(cell.value, cell.provenance, cell.source_selector)
        out.append(merged)
    return out
