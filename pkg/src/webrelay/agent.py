"""The record phase: observe, propose, choose, execute, verify, backtrack.

One policy call per step proposes up to k candidate actions; a chooser picks
one; cheap rules judge the outcome and a verifier model is only consulted
when they cannot. EnterList narrows the observation to the first list item
so the whole list costs exactly one trajectory: model usage is a function of
trajectory length, never of list length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from . import dom, selectorgen
from .dsl import (
    Action,
    Recording,
    SAVE_KINDS,
    parse_action,
    resolve_and_append,
    validate,
)
from .errors import (
    AgentFailedError,
    ListTooDiffuseError,
    PolicyParseFailureError,
    RecordBudgetExceededError,
    SelectorModelFailedError,
    WebRelayError,
)
from .prompting import load_template
from .selectorgen import ListSelector
from .session import NavigationSession
from .tables import Cell, Row, column_specs, extract_cell

logger = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 40
DEFAULT_CANDIDATES = 3


@dataclass
class TaskSpec:
    goal: str
    schema: list[str]
    start_url: str
    key_column: str = ""
    max_pages: int = 5
    use_case: str = "default"
    column_kinds: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.schema:
            raise ValueError("schema must be non-empty")
        if self.max_pages < 1:
            raise ValueError("max_pages must be >= 1")
        if not self.key_column:
            urlish = [c for c in self.schema if "url" in c.lower()]
            self.key_column = urlish[0] if urlish else self.schema[0]

    @classmethod
    def from_json(cls, data: dict) -> "TaskSpec":
        return cls(
            goal=data["goal"],
            schema=list(data["schema"]),
            start_url=data["start_url"],
            key_column=data.get("key_column", ""),
            max_pages=data.get("max_pages", 5),
            use_case=data.get("use_case", "default"),
            column_kinds=data.get("column_kinds", {}),
        )


@dataclass
class Observation:
    url: str
    simplified: dom.SimplifiedDom
    mode: str  # regular | list
    history_digest: str = ""
    hints: list[str] = field(default_factory=list)
    # Static task context carried along so prompts can be built from the
    # observation alone.
    goal: str = ""
    schema_text: str = ""


@dataclass
class Verdict:
    decision: str  # finish | continue | backtrack
    feedback: str = ""
    next_step_hint: str = ""


def propose_actions(observation: Observation, k: int, policy) -> list[Action]:
    """One policy completion carrying up to k candidate tool calls.

    Unparsable lines are dropped; a reply with no parsable call at all is a
    PolicyParseFailure.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    prompt = load_template("policy").format(
        goal=observation.goal,
        schema=observation.schema_text,
        url=observation.url,
        mode=observation.mode,
        dom=observation.simplified.text,
        history=observation.history_digest or "(none)",
        hints="\n".join(observation.hints) or "(none)",
        k=k,
    )
    text, _usage = policy.complete([{"role": "user", "content": prompt}])
    candidates: list[Action] = []
    for line in text.splitlines():
        line = line.strip().strip("`").rstrip(";")
        if not line:
            continue
        try:
            candidates.append(parse_action(line))
        except ValueError:
            logger.debug("dropping unparsable candidate %r", line)
            continue
        if len(candidates) == k:
            break
    if not candidates:
        raise PolicyParseFailureError(f"no parsable action in {text[:120]!r}")
    return candidates


def choose_action(candidates: list[Action], observation: Observation, chooser) -> Action:
    """Pick exactly one proposed action, never synthesizing a new one."""
    if not candidates:
        raise ValueError("no candidates to choose from")
    unique: list[Action] = []
    seen: set[str] = set()
    for candidate in candidates:
        rendered = candidate.render()
        if rendered not in seen:
            seen.add(rendered)
            unique.append(candidate)
    if len(unique) == 1:
        return unique[0]
    listing = "\n".join(f"{i + 1}. {c.render()}" for i, c in enumerate(unique))
    prompt = load_template("chooser").format(
        goal=observation.goal, url=observation.url, candidates=listing
    )
    text, _usage = chooser.complete([{"role": "user", "content": prompt}])
    for line in text.splitlines():
        line = line.strip()
        if line.upper().startswith("CHOICE:"):
            try:
                index = int(line.split(":", 1)[1].strip())
            except ValueError:
                break
            if 1 <= index <= len(unique):
                return unique[index - 1]
            break
    return unique[0]


def verify_step(
    before: dom.DomSnapshot,
    after: dom.DomSnapshot,
    action: Action,
    goal: str,
    verifier=None,
    schema: list[str] | None = None,
    saved_columns: set[str] | None = None,
) -> Verdict:
    """Rule-based checks first; the verifier model only breaks ties.

    Finish is only granted once every schema column has been saved at least
    once.
    """
    kind = action.kind
    if kind == "Finish":
        missing = [c for c in (schema or []) if c not in (saved_columns or set())]
        if missing:
            return Verdict(
                "backtrack",
                feedback=f"cannot finish: column(s) never saved: {', '.join(missing)}",
                next_step_hint=f"save a value for {missing[0]!r} first",
            )
        return Verdict("finish")
    if kind in SAVE_KINDS or kind in ("EnterList", "ExitList", "GoBack", "TypeInput"):
        return Verdict("continue")
    if kind == "Click":
        if before.base_url != after.base_url:
            return Verdict("continue")
        if before.tree_digest() == after.tree_digest():
            return Verdict("backtrack", feedback="click had no effect on the page")
        # URL unchanged but content moved: rules are inconclusive.
        if verifier is None:
            return Verdict("continue")
        return _model_verdict(before, after, action, goal, verifier)
    if verifier is None:
        return Verdict("continue")
    return _model_verdict(before, after, action, goal, verifier)


def _model_verdict(before, after, action, goal, verifier) -> Verdict:
    prompt = load_template("verifier").format(
        goal=goal,
        action=action.render(),
        url_before=before.base_url,
        url_after=after.base_url,
        dom=after.simplified().text[:4000],
    )
    text, _usage = verifier.complete([{"role": "user", "content": prompt}])
    decision = "continue"
    feedback = ""
    hint = ""
    for line in text.splitlines():
        stripped = line.strip()
        upper = stripped.upper()
        if upper.startswith("VERDICT:"):
            value = stripped.split(":", 1)[1].strip().lower()
            if value in ("finish", "continue", "backtrack"):
                decision = value
        elif upper.startswith("FEEDBACK:"):
            feedback = stripped.split(":", 1)[1].strip()
        elif upper.startswith("NEXT:"):
            hint = stripped.split(":", 1)[1].strip()
    if decision == "backtrack" and not feedback:
        feedback = "verifier rejected the step"
    return Verdict(decision, feedback=feedback, next_step_hint=hint)


# --- the record loop -------------------------------------------------------------


@dataclass
class _ListState:
    block_id: int
    item_root: int  # node_id of the first matched item
    in_detail: bool = False


def run_record_phase(
    task: TaskSpec,
    session: NavigationSession,
    policy,
    chooser,
    verifier,
    selector_model=None,
    qa=None,
    step_budget: int = DEFAULT_STEP_BUDGET,
    k: int = DEFAULT_CANDIDATES,
) -> tuple[Recording, Row]:
    """Drive the policy until Finish, returning the recording and first row.

    Backtracking restores the session by re-fetching the pre-action URL; the
    recording only ever contains the successful path. In-item clicks are
    rewritten to a hidden SaveLink plus a detail block that replays as a
    second pass.
    """
    recording = Recording(
        start_url=task.start_url,
        goal=task.goal,
        schema=column_specs(task.schema, task.column_kinds),
        key_column=task.key_column,
        max_pages=task.max_pages,
    )
    first_row: Row = {}
    hints: list[str] = []
    history: list[str] = []
    list_state: _ListState | None = None
    next_block_id = 1

    for _step in range(step_budget):
        snapshot = session.current
        assert snapshot is not None
        scoped = list_state is not None and not list_state.in_detail
        view = dom.simplify(snapshot, scope=list_state.item_root if scoped else None)
        observation = Observation(
            url=session.url,
            simplified=view,
            mode="list" if scoped else "regular",
            history_digest="\n".join(f"{i + 1}. {h}" for i, h in enumerate(history[-20:])),
            hints=list(hints[-5:]),
            goal=task.goal,
            schema_text=", ".join(task.schema),
        )

        candidates = propose_actions(observation, k, policy)
        action = choose_action(candidates, observation, chooser)

        validate_mode = "list" if list_state is not None else "regular"
        try:
            validate(action, view, validate_mode)
        except WebRelayError as exc:
            hints.append(f"invalid action {action.render()}: {exc}")
            continue

        if action.kind == "Fail":
            raise AgentFailedError(action.error_code, action.error_message)

        checkpoint = _Checkpoint.capture(
            session, recording, list_state, first_row, next_block_id
        )
        try:
            outcome = _execute_action(
                action, task, session, recording, view, list_state,
                next_block_id, first_row, selector_model, qa,
            )
        except AgentFailedError:
            raise
        except WebRelayError as exc:
            checkpoint.restore(session, recording)
            list_state = checkpoint.list_state
            first_row = checkpoint.first_row
            next_block_id = checkpoint.next_block_id
            hints.append(f"{action.render()} failed: {exc}")
            continue
        list_state = outcome.list_state
        next_block_id = outcome.next_block_id

        verdict = verify_step(
            checkpoint.snapshot,
            session.current,
            action,
            task.goal,
            verifier,
            schema=task.schema,
            saved_columns=recording.saved_columns(),
        )
        if verdict.decision == "backtrack":
            checkpoint.restore(session, recording)
            list_state = checkpoint.list_state
            first_row = checkpoint.first_row
            next_block_id = checkpoint.next_block_id
            hints.append(verdict.feedback)
            if verdict.next_step_hint:
                hints.append(f"next: {verdict.next_step_hint}")
            continue
        history.append(action.render())
        if verdict.decision == "finish":
            recording.check_wellformed()
            return recording, {
                col: first_row.get(col, Cell("")) for col in _visible_columns(first_row, task)
            }
    raise RecordBudgetExceededError(f"no Finish within {step_budget} steps")


def _visible_columns(first_row: Row, task: TaskSpec) -> list[str]:
    extras = [c for c in first_row if c not in task.schema]
    return list(task.schema) + extras


@dataclass
class _Checkpoint:
    url: str
    history: list[str]
    snapshot: dom.DomSnapshot
    steps_len: int
    blocks: dict
    list_state: _ListState | None
    first_row: Row
    next_block_id: int

    @classmethod
    def capture(cls, session, recording, list_state, first_row, next_block_id):
        return cls(
            url=session.url,
            history=list(session.history),
            snapshot=session.current,
            steps_len=len(recording.steps),
            blocks=dict(recording.list_blocks),
            list_state=replace(list_state) if list_state else None,
            first_row=dict(first_row),
            next_block_id=next_block_id,
        )

    def restore(self, session, recording) -> None:
        if session.url != self.url or session.current is not self.snapshot:
            session.restore(self.url, self.history)
        else:
            session.history = list(self.history)
        del recording.steps[self.steps_len:]
        recording.list_blocks.clear()
        recording.list_blocks.update(self.blocks)


@dataclass
class _Outcome:
    list_state: _ListState | None
    next_block_id: int


def _execute_action(
    action: Action,
    task: TaskSpec,
    session: NavigationSession,
    recording: Recording,
    view: dom.SimplifiedDom,
    list_state: _ListState | None,
    next_block_id: int,
    first_row: Row,
    selector_model,
    qa,
) -> _Outcome:
    snapshot = session.current
    kind = action.kind

    if kind == "EnterList":
        example_nodes = [view.node_id_for(e) for e in action.elements]
        list_selector = _resolve_list_selector(
            task, snapshot, example_nodes, action.description, selector_model
        )
        items = _container_matches(snapshot, list_selector)
        if not items:
            raise ListTooDiffuseError("list selector matched nothing on the live page")
        block_id = next_block_id
        resolve_and_append(
            recording, action, snapshot, view, "regular",
            block_id=block_id, list_selector=list_selector,
        )
        return _Outcome(_ListState(block_id, items[0].node_id), next_block_id + 1)

    if kind == "ExitList":
        assert list_state is not None
        if list_state.in_detail:
            session.go_back()
        resolve_and_append(
            recording, action, snapshot, view, "list",
            block_id=list_state.block_id,
        )
        return _Outcome(None, next_block_id)

    mode = "list" if (list_state and not list_state.in_detail) else "regular"
    block_id = list_state.block_id if list_state else None
    item_root = list_state.item_root if list_state else None
    in_detail = bool(list_state and list_state.in_detail)

    if kind == "Click" and mode == "list":
        node_id = view.node_id_for(action.element)
        node = snapshot.node(node_id)
        if node.tag != "a" or "href" not in node.attributes:
            raise WebRelayError("only link clicks are supported inside list items")
        # Rewrite: save the link into a hidden column, then open the detail
        # context by visiting the first item's page.
        hidden = f"__detail_url_{block_id}"
        save = Action("SaveLink", element=action.element, column=hidden)
        resolve_and_append(
            recording, save, snapshot, view, "list",
            current_item_root=item_root, block_id=block_id,
        )
        recording.list_blocks[block_id].detail_url_column = hidden
        url = dom.resolve_link(snapshot, node_id)
        first_row[hidden] = Cell(url, provenance="direct")
        session.navigate(url)
        list_state.in_detail = True
        return _Outcome(list_state, next_block_id)

    if kind in ("Click", "TypeInput"):
        step = resolve_and_append(
            recording, action, snapshot, view, mode,
            current_item_root=item_root, block_id=block_id, in_detail=in_detail,
        )
        interact_kind = "click" if kind == "Click" else "type"
        _interact_first(session, step.selector, interact_kind, action.value)
        return _Outcome(list_state, next_block_id)

    if kind == "GoBack":
        if list_state and list_state.in_detail:
            resolve_and_append(
                recording, action, snapshot, view, "list",
                block_id=block_id, in_detail=True,
            )
            session.go_back()
            list_state.in_detail = False
            return _Outcome(list_state, next_block_id)
        resolve_and_append(recording, action, snapshot, view, "regular")
        session.go_back()
        return _Outcome(list_state, next_block_id)

    if kind in SAVE_KINDS:
        step = resolve_and_append(
            recording, action, snapshot, view, mode,
            current_item_root=item_root, block_id=block_id, in_detail=in_detail,
        )
        cell = _record_time_cell(action, step, session, view, qa)
        first_row[action.column] = cell
        return _Outcome(list_state, next_block_id)

    if kind == "Finish":
        resolve_and_append(recording, action, snapshot, view, "regular")
        return _Outcome(list_state, next_block_id)

    raise WebRelayError(f"cannot execute {kind}")


def _resolve_list_selector(
    task: TaskSpec,
    snapshot: dom.DomSnapshot,
    example_nodes: list[int],
    description: str,
    selector_model,
) -> ListSelector:
    try:
        return selectorgen.generate_list_selector(snapshot, example_nodes)
    except ListTooDiffuseError:
        if selector_model is None:
            raise
    lca_id = dom.least_common_ancestor(snapshot, example_nodes)
    lca_html = dom.to_html(snapshot.node(lca_id))
    try:
        return selectorgen.selector_model_generate(
            task.goal, task.schema, lca_html, description, selector_model
        )
    except SelectorModelFailedError:
        # Fall back to a per-section list seeded by the first example alone.
        logger.warning("selector model failed; narrowing to the first section")
        return selectorgen.generate_list_selector(snapshot, [example_nodes[0]])


def _container_matches(snapshot: dom.DomSnapshot, list_selector: ListSelector):
    for alternative in list_selector.container.alternatives:
        matches = dom.query(snapshot, alternative)
        if matches:
            return matches
    return []


def _interact_first(session: NavigationSession, selector, kind: str, value):
    assert selector is not None
    for alternative in selector.alternatives:
        if dom.query(session.current, alternative):
            session.interact(alternative, kind, value)
            return
    raise WebRelayError(f"selector {selector.text!r} matched nothing at interaction time")


def _record_time_cell(action: Action, step, session: NavigationSession,
                      view: dom.SimplifiedDom, qa) -> Cell:
    snapshot = session.current
    if action.kind == "SaveCurrentURL":
        return Cell(session.url, provenance="direct")
    node = snapshot.node(view.node_id_for(action.element))
    kind = {"SaveText": "text", "SaveLink": "link", "AnswerQuestion": "qa"}[action.kind]
    param = action.regex if action.kind == "SaveText" else (action.question or None)
    return extract_cell(
        kind,
        node,
        snapshot,
        action.column,
        param=param,
        qa_gateway=qa,
        current_url=session.url,
        source_selector=step.selector.text if step.selector else "",
    )
