"""The eleven-tool action language plus the recording it accumulates.

Actions arrive as plain-text tool calls (``EnterList([3, 6], "Blog posts",
8)``) and reference elements by the numeric IDs of the current observation.
Appending an action to a recording resolves those IDs into generalizable
CSS selectors, which is what makes a recording replayable on pages the
agent never saw.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field, replace

from . import dom, selectorgen
from .errors import (
    BadNestingError,
    MissingFieldError,
    RecordingCompileError,
    SelectorUngeneralizableError,
    UnknownElementError,
)
from .selectorgen import GeneralizedSelector, ListSelector
from .tables import ColumnSpec

KINDS = (
    "Click", "TypeInput", "GoBack", "EnterList", "ExitList", "SaveCurrentURL",
    "SaveText", "SaveLink", "AnswerQuestion", "Finish", "Fail",
)

SAVE_KINDS = ("SaveCurrentURL", "SaveText", "SaveLink", "AnswerQuestion")


@dataclass(frozen=True)
class Action:
    kind: str
    element: int | None = None
    value: str | None = None
    enter: bool = False
    elements: tuple[int, ...] = ()
    description: str = ""
    pagination: int | None = None
    column: str = ""
    regex: str | None = None
    question: str = ""
    error_code: str = ""
    error_message: str = ""

    def render(self) -> str:
        """Back to tool-call text (history digests, prompts, serialization)."""
        k = self.kind
        if k == "Click":
            return f"Click({self.element})"
        if k == "TypeInput":
            return f"TypeInput({self.element}, {self.value!r}, {self.enter})"
        if k == "GoBack":
            return "GoBack()"
        if k == "EnterList":
            pag = f", {self.pagination}" if self.pagination is not None else ""
            return f"EnterList({list(self.elements)}, {self.description!r}{pag})"
        if k == "ExitList":
            return "ExitList()"
        if k == "SaveCurrentURL":
            return f"SaveCurrentURL({self.column!r})"
        if k == "SaveText":
            rx = f", {self.regex!r}" if self.regex else ""
            return f"SaveText({self.element}, {self.column!r}{rx})"
        if k == "SaveLink":
            return f"SaveLink({self.element}, {self.column!r})"
        if k == "AnswerQuestion":
            return f"AnswerQuestion({self.element}, {self.column!r}, {self.question!r})"
        if k == "Finish":
            return "Finish()"
        return f"Fail({self.error_code!r}, {self.error_message!r})"


def parse_action(text: str) -> Action:
    """Parse one tool call; raises ValueError on anything else."""
    text = text.strip()
    if text.startswith("ACTION:"):
        text = text[len("ACTION:"):].strip()
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"not a tool call: {text!r}") from exc
    call = tree.body
    if not isinstance(call, ast.Call) or not isinstance(call.func, ast.Name):
        raise ValueError(f"not a tool call: {text!r}")
    name = call.func.id
    if name not in KINDS:
        raise ValueError(f"unknown tool {name!r}")
    try:
        args = [ast.literal_eval(a) for a in call.args]
        kwargs = {kw.arg: ast.literal_eval(kw.value) for kw in call.keywords if kw.arg}
    except (ValueError, SyntaxError) as exc:
        raise ValueError(f"non-literal arguments in {text!r}") from exc
    return _build_action(name, args, kwargs)


def _build_action(name: str, args: list, kwargs: dict) -> Action:
    def arg(pos: int, key: str, default=None):
        if key in kwargs:
            return kwargs[key]
        if pos < len(args):
            return args[pos]
        return default

    if name == "Click":
        return Action("Click", element=_as_int(arg(0, "element")))
    if name == "TypeInput":
        return Action(
            "TypeInput",
            element=_as_int(arg(0, "element")),
            value=str(arg(1, "value", "")),
            enter=bool(arg(2, "enter", False)),
        )
    if name == "GoBack":
        return Action("GoBack")
    if name == "EnterList":
        elements = arg(0, "elements", [])
        if not isinstance(elements, (list, tuple)):
            raise ValueError("EnterList elements must be a list")
        pagination = arg(2, "pagination")
        return Action(
            "EnterList",
            elements=tuple(_as_int(e) for e in elements),
            description=str(arg(1, "description", "")),
            pagination=_as_int(pagination) if pagination is not None else None,
        )
    if name == "ExitList":
        return Action("ExitList")
    if name == "SaveCurrentURL":
        return Action("SaveCurrentURL", column=str(arg(0, "column", "")))
    if name == "SaveText":
        regex = arg(2, "regex")
        return Action(
            "SaveText",
            element=_as_int(arg(0, "element")),
            column=str(arg(1, "column", "")),
            regex=str(regex) if regex is not None else None,
        )
    if name == "SaveLink":
        return Action(
            "SaveLink", element=_as_int(arg(0, "element")), column=str(arg(1, "column", ""))
        )
    if name == "AnswerQuestion":
        return Action(
            "AnswerQuestion",
            element=_as_int(arg(0, "element")),
            column=str(arg(1, "column", "")),
            question=str(arg(2, "question", "")),
        )
    if name == "Finish":
        return Action("Finish")
    return Action(
        "Fail",
        error_code=str(arg(0, "errorCode", "Unknown")),
        error_message=str(arg(1, "errorMessage", "")),
    )


def _as_int(value) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"expected a numeric element ID, got {value!r}")
    return value


# --- validation ----------------------------------------------------------------


def validate(action: Action, view: dom.SimplifiedDom, mode: str) -> None:
    """Structural and exposure checks against the current observation.

    mode is "regular" or "list". Raises MissingField / UnknownElement /
    BadNesting.
    """
    needs_element = action.kind in ("Click", "TypeInput", "SaveText", "SaveLink", "AnswerQuestion")
    if needs_element and action.element is None:
        raise MissingFieldError(f"{action.kind} requires an element")
    if action.kind in SAVE_KINDS and not action.column:
        raise MissingFieldError(f"{action.kind} requires a column")
    if action.kind == "AnswerQuestion" and not action.question:
        raise MissingFieldError("AnswerQuestion requires a question")
    if action.kind == "TypeInput" and action.value is None:
        raise MissingFieldError("TypeInput requires a value")
    if action.kind == "EnterList":
        if not action.elements:
            raise MissingFieldError("EnterList requires example elements")
        if not action.description:
            raise MissingFieldError("EnterList requires a description")
        if mode == "list":
            raise BadNestingError("EnterList while already capturing a list")
    if action.kind == "ExitList" and mode != "list":
        raise BadNestingError("ExitList outside a list")
    referenced = list(action.elements)
    if action.element is not None:
        referenced.append(action.element)
    if action.kind == "EnterList" and action.pagination is not None:
        referenced.append(action.pagination)
    for numeric in referenced:
        if numeric not in view.exposed_ids:
            raise UnknownElementError(f"element {numeric} is not in the observation")


# --- resolved recording -----------------------------------------------------------


@dataclass
class ResolvedAction:
    action: Action
    selector: GeneralizedSelector | None = None
    scope: str = "global"  # global | list:<block_id> | detail:<block_id>

    def to_json(self) -> dict:
        return {
            "action": self.action.render(),
            "selector": self.selector.to_json() if self.selector else None,
            "scope": self.scope,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ResolvedAction":
        return cls(
            action=parse_action(data["action"]),
            selector=GeneralizedSelector.from_json(data["selector"])
            if data.get("selector")
            else None,
            scope=data.get("scope", "global"),
        )


@dataclass
class ListBlock:
    block_id: int
    list_selector: ListSelector
    description: str
    pagination: GeneralizedSelector | None = None
    detail_url_column: str | None = None

    def to_json(self) -> dict:
        return {
            "block_id": self.block_id,
            "list_selector": self.list_selector.to_json(),
            "description": self.description,
            "pagination": self.pagination.to_json() if self.pagination else None,
            "detail_url_column": self.detail_url_column,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ListBlock":
        return cls(
            block_id=data["block_id"],
            list_selector=ListSelector.from_json(data["list_selector"]),
            description=data["description"],
            pagination=GeneralizedSelector.from_json(data["pagination"])
            if data.get("pagination")
            else None,
            detail_url_column=data.get("detail_url_column"),
        )


@dataclass
class Recording:
    """The ordered, selector-resolved trace of one record phase."""

    start_url: str
    goal: str = ""
    schema: list[ColumnSpec] = field(default_factory=list)
    key_column: str = ""
    max_pages: int = 5
    steps: list[ResolvedAction] = field(default_factory=list)
    list_blocks: dict[int, ListBlock] = field(default_factory=dict)

    def saved_columns(self) -> set[str]:
        return {
            step.action.column
            for step in self.steps
            if step.action.kind in SAVE_KINDS and step.action.column
        }

    def check_wellformed(self) -> None:
        """Single pass over steps: nesting, scope, selector presence."""
        open_block: int | None = None
        for step in self.steps:
            kind = step.action.kind
            if kind == "EnterList":
                if open_block is not None:
                    raise RecordingCompileError("nested EnterList")
                scope = step.scope
                if not scope.startswith("list:"):
                    raise RecordingCompileError("EnterList step lacks a list scope")
                open_block = int(scope.split(":", 1)[1])
                if open_block not in self.list_blocks:
                    raise RecordingCompileError(f"unknown list block {open_block}")
            elif kind == "ExitList":
                if open_block is None:
                    raise RecordingCompileError("ExitList without EnterList")
                open_block = None
            elif step.scope.startswith(("list:", "detail:")):
                block_id = int(step.scope.split(":", 1)[1])
                if block_id != open_block:
                    raise RecordingCompileError(
                        f"step scoped to block {block_id} outside its Enter/Exit"
                    )
            if kind in ("Click", "TypeInput", "SaveText", "SaveLink", "AnswerQuestion"):
                if step.selector is None:
                    raise RecordingCompileError(f"{kind} step lacks a selector")
                if step.scope.startswith("list:") and not any(
                    ":scope" in alt for alt in step.selector.alternatives
                ):
                    raise RecordingCompileError("list-scoped step without :scope selector")
        if open_block is not None:
            raise RecordingCompileError("EnterList never closed")

    def to_json(self) -> dict:
        return {
            "format": "webrelay-recording/1",
            "start_url": self.start_url,
            "goal": self.goal,
            "schema": [{"name": c.name, "kind": c.kind} for c in self.schema],
            "key_column": self.key_column,
            "max_pages": self.max_pages,
            "steps": [step.to_json() for step in self.steps],
            "list_blocks": {
                str(bid): block.to_json() for bid, block in self.list_blocks.items()
            },
        }

    def dumps(self) -> str:
        """Canonical JSON: stable key order, trailing newline."""
        return json.dumps(self.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, data: dict) -> "Recording":
        return cls(
            start_url=data["start_url"],
            goal=data.get("goal", ""),
            schema=[ColumnSpec(c["name"], c["kind"]) for c in data.get("schema", [])],
            key_column=data.get("key_column", ""),
            max_pages=data.get("max_pages", 5),
            steps=[ResolvedAction.from_json(s) for s in data.get("steps", [])],
            list_blocks={
                int(bid): ListBlock.from_json(block)
                for bid, block in data.get("list_blocks", {}).items()
            },
        )

    @classmethod
    def loads(cls, text: str) -> "Recording":
        return cls.from_json(json.loads(text))


def resolve_and_append(
    recording: Recording,
    action: Action,
    snapshot: dom.DomSnapshot,
    view: dom.SimplifiedDom,
    mode: str,
    current_item_root: int | None = None,
    block_id: int | None = None,
    list_selector: ListSelector | None = None,
    in_detail: bool = False,
) -> ResolvedAction:
    """Resolve numeric IDs to selectors and append the step.

    In regular mode element references go through the multi-strategy
    generator (absolute path as last resort); in list mode they become
    ``:scope``-relative to the current item. EnterList expects its list
    selector pre-resolved (the caller may have escalated to the selector
    model) and resolves pagination here.
    """
    if action.kind == "EnterList":
        assert list_selector is not None and block_id is not None
        pagination = None
        if action.pagination is not None:
            pag_node = view.node_id_for(action.pagination)
            pagination = _element_selector(snapshot, pag_node)
            pagination.target_kind = "pagination"
        recording.list_blocks[block_id] = ListBlock(
            block_id=block_id,
            list_selector=list_selector,
            description=action.description,
            pagination=pagination,
        )
        step = ResolvedAction(action=action, selector=None, scope=f"list:{block_id}")
        recording.steps.append(step)
        return step

    scope = "global"
    if mode == "list" and block_id is not None:
        scope = f"detail:{block_id}" if in_detail else f"list:{block_id}"

    selector: GeneralizedSelector | None = None
    if action.element is not None:
        node_id = view.node_id_for(action.element)
        if scope.startswith("list:"):
            assert current_item_root is not None
            selector = selectorgen.relativize(snapshot, current_item_root, node_id)
            block = recording.list_blocks[block_id]
            if action.kind in ("SaveText", "SaveLink", "AnswerQuestion") and action.column:
                block.list_selector.item_fields[action.column] = selector
        else:
            selector = _element_selector(snapshot, node_id)

    step = ResolvedAction(action=action, selector=selector, scope=scope)
    recording.steps.append(step)
    return step


def _element_selector(snapshot: dom.DomSnapshot, node_id: int) -> GeneralizedSelector:
    try:
        return selectorgen.generate_element_selector(snapshot, node_id)
    except SelectorUngeneralizableError:
        return selectorgen.absolute_css_path(snapshot, node_id)
