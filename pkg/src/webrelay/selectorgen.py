"""Synthesis of robust, generalizable CSS selectors.

Three levels: single elements (multi-strategy candidates filtered by a
first-match test and joined as ordered alternatives), list-item sets (least
common ancestor of the examples, then its immediate children constrained by
structure), and within-item fields (``:scope``-relative selectors unique
inside one item). A model-backed generator covers layouts the heuristics
cannot split cleanly.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from . import dom
from .errors import (
    ListTooDiffuseError,
    NeedDistinctExamplesError,
    NotInItemError,
    SelectorModelFailedError,
    SelectorSyntaxError,
    SelectorUngeneralizableError,
)
from .prompting import load_template

logger = logging.getLogger(__name__)

# Attributes stable enough to select on. href/src are content-bearing and
# change across pages, so they are deliberately absent.
STABLE_ATTRS = ("name", "role", "aria-label", "rel", "type")

# Parent tags too generic to anchor a parent-child candidate.
_GENERIC_ANCHORS = {"html", "body", "div", "span"}

_CSS_SAFE = re.compile(r"^[A-Za-z_][A-Za-z0-9_-]*$")
_UUID_RE = re.compile(
    r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$", re.I
)
_HEX_RE = re.compile(r"^[0-9a-f]{8,}$", re.I)


@dataclass(frozen=True)
class SelectorCandidate:
    """One proposed selector with the strategy that produced it."""

    strategy: str  # parent-child | position | class | id | attribute
    selector: str
    specificity_rank: int


@dataclass
class GeneralizedSelector:
    """Ordered alternative selectors for one target.

    ``text`` (the comma-join) matches the union; at replay alternatives are
    tried left to right and the first one with a match wins.
    """

    alternatives: list[str]
    target_kind: str = "element"  # element | list | pagination

    @property
    def text(self) -> str:
        return ", ".join(self.alternatives)

    def to_json(self) -> dict:
        return {"alternatives": list(self.alternatives), "target_kind": self.target_kind}

    @classmethod
    def from_json(cls, data: dict) -> "GeneralizedSelector":
        return cls(alternatives=list(data["alternatives"]), target_kind=data["target_kind"])


@dataclass
class ListSelector:
    """Container selector for the item set plus per-field scoped selectors."""

    container: GeneralizedSelector
    item_fields: dict[str, GeneralizedSelector] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "container": self.container.to_json(),
            "item_fields": {k: v.to_json() for k, v in self.item_fields.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ListSelector":
        return cls(
            container=GeneralizedSelector.from_json(data["container"]),
            item_fields={
                k: GeneralizedSelector.from_json(v)
                for k, v in data["item_fields"].items()
            },
        )


def trusted_token(token: str) -> bool:
    """Reject identifiers that look auto-generated (they break on reload)."""
    if not token or not _CSS_SAFE.match(token):
        return False
    if re.search(r"\d{5,}", token):
        return False
    if _UUID_RE.match(token) or _HEX_RE.match(token):
        return False
    digits = sum(c.isdigit() for c in token)
    if len(token) >= 5 and digits / len(token) >= 0.3:
        return False
    return True


def _trusted_classes(node: dom.DomNode) -> list[str]:
    return [c for c in node.attributes.get("class", "").split() if trusted_token(c)]


def _trusted_id(node: dom.DomNode) -> str | None:
    node_id = node.attributes.get("id", "")
    return node_id if trusted_token(node_id) else None


def _position_pseudo(node: dom.DomNode) -> str:
    siblings = node.parent.children if node.parent else [node]
    idx = siblings.index(node) + 1
    if idx == 1:
        return ":first-child"
    if idx == len(siblings):
        return ":last-child"
    return f":nth-child({idx})"


def _anchor_for(node: dom.DomNode, allow_generic_tag: bool = False) -> str | None:
    """Short stable reference to a node: #id, tag.classes, or a bare tag."""
    node_id = _trusted_id(node)
    if node_id:
        return f"#{node_id}"
    classes = _trusted_classes(node)
    if classes:
        return node.tag + "".join(f".{c}" for c in classes)
    if node.tag not in _GENERIC_ANCHORS or allow_generic_tag:
        if node.tag in ("html", "body"):
            return None
        return node.tag
    return None


def element_candidates(snapshot: dom.DomSnapshot, node_id: int) -> list[SelectorCandidate]:
    """All strategy candidates for one node, before the first-match filter."""
    node = snapshot.node(node_id)
    candidates: list[SelectorCandidate] = []

    classes = _trusted_classes(node)
    if classes:
        sel = node.tag + "".join(f".{c}" for c in classes)
        candidates.append(SelectorCandidate("class", sel, 0))

    own_id = _trusted_id(node)
    if own_id:
        candidates.append(SelectorCandidate("id", f"#{own_id}", 1))

    for attr in STABLE_ATTRS:
        value = node.attributes.get(attr)
        if value and len(value) <= 64 and '"' not in value and trusted_token_loose(value):
            candidates.append(
                SelectorCandidate("attribute", f'{node.tag}[{attr}="{value}"]', 2)
            )
            break

    parent = node.parent
    if parent is not None and parent.tag not in ("html", "body"):
        anchor = _anchor_for(parent)
        if anchor:
            sel = f"{anchor} > {node.tag}{_position_pseudo(node)}"
            candidates.append(SelectorCandidate("parent-child", sel, 3))

    return candidates


def trusted_token_loose(value: str) -> bool:
    """Attribute values may contain spaces; only reject generated-looking ones."""
    if not value.strip():
        return False
    return all(trusted_token(tok) or tok.isalpha() for tok in re.split(r"[\s_:-]+", value) if tok)


def generate_element_selector(
    snapshot: dom.DomSnapshot, node_id: int
) -> GeneralizedSelector:
    """Join every strategy candidate whose first match is the node itself.

    Raises SelectorUngeneralizable when no candidate survives; callers that
    must not fail use :func:`absolute_css_path` instead.
    """
    node = snapshot.node(node_id)
    survivors: list[str] = []
    for cand in element_candidates(snapshot, node_id):
        try:
            matches = dom.query(snapshot, cand.selector)
        except SelectorSyntaxError:
            continue
        if matches and matches[0] is node:
            survivors.append(cand.selector)
    if not survivors:
        raise SelectorUngeneralizableError(
            f"no stable selector for <{node.tag}> (node {node_id})"
        )
    return GeneralizedSelector(alternatives=survivors, target_kind="element")


def absolute_css_path(snapshot: dom.DomSnapshot, node_id: int) -> GeneralizedSelector:
    """Positional fallback path from the nearest id-anchored ancestor (or body)."""
    node = snapshot.node(node_id)
    steps: list[str] = []
    current = node
    while current is not None and current.tag not in ("html", "body"):
        anchor_id = _trusted_id(current)
        if anchor_id and current is not node:
            steps.append(f"#{anchor_id}")
            break
        steps.append(f"{current.tag}{_position_pseudo(current)}")
        current = current.parent
    else:
        steps.append("body")
    selector = " > ".join(reversed(steps))
    return GeneralizedSelector(alternatives=[selector], target_kind="element")


# --- list selectors -----------------------------------------------------------


def _item_root_for(example: dom.DomNode, lca: dom.DomNode) -> dom.DomNode | None:
    """The ancestor-or-self of ``example`` that is an immediate child of lca."""
    node = example
    while node.parent is not None:
        if node.parent is lca:
            return node
        node = node.parent
    return None


def _resembles(candidate: dom.DomNode, roots: list[dom.DomNode]) -> bool:
    """Same tag as a root, plus shared classes (or shared child-tag profile)."""
    for root in roots:
        if candidate.tag != root.tag:
            continue
        root_classes = set(root.attributes.get("class", "").split())
        cand_classes = set(candidate.attributes.get("class", "").split())
        if root_classes:
            if root_classes & cand_classes:
                return True
        else:
            if sorted(c.tag for c in candidate.children) == sorted(
                c.tag for c in root.children
            ):
                return True
    return False


def _common_trusted_classes(roots: list[dom.DomNode]) -> list[str]:
    common = set(_trusted_classes(roots[0]))
    for root in roots[1:]:
        common &= set(_trusted_classes(root))
    # Preserve the first root's attribute order for deterministic output.
    return [c for c in _trusted_classes(roots[0]) if c in common]


def generate_list_selector(
    snapshot: dom.DomSnapshot, examples: list[int]
) -> ListSelector:
    """Container selector from example nodes, via their least common ancestor.

    Item roots are the LCA children containing the examples; the container
    must match exactly the LCA children that structurally resemble those
    roots. A single example degenerates to "parent is the LCA, matching
    siblings are the items".
    """
    if not examples:
        raise NeedDistinctExamplesError("no example elements")
    distinct = list(dict.fromkeys(examples))
    if len(distinct) == 1 and len(examples) > 1:
        raise NeedDistinctExamplesError("examples are the same node")

    if len(distinct) == 1:
        node = snapshot.node(distinct[0])
        if node.parent is None:
            raise ListTooDiffuseError("example has no parent")
        lca = node.parent
        roots = [node]
    else:
        lca = snapshot.node(dom.least_common_ancestor(snapshot, distinct))
        roots = []
        for ex in distinct:
            root = _item_root_for(snapshot.node(ex), lca)
            if root is None:
                # One example is an ancestor of another; no sibling structure.
                raise ListTooDiffuseError("examples are nested inside each other")
            if root not in roots:
                roots.append(root)

    if lca.tag in ("html", "body") or lca.parent is None:
        raise ListTooDiffuseError(
            "least common ancestor is the document root; items span sections"
        )

    expected = [c for c in lca.children if _resembles(c, roots)]
    for root in roots:
        if root not in expected:
            expected.append(root)
    expected.sort(key=lambda n: n.node_id)

    item_part = roots[0].tag + "".join(f".{c}" for c in _common_trusted_classes(roots))

    candidates: list[str] = []
    lca_id = _trusted_id(lca)
    if lca_id:
        candidates.append(f"#{lca_id} > {item_part}")
    lca_classes = _trusted_classes(lca)
    if lca_classes:
        candidates.append(f"{lca.tag}{''.join(f'.{c}' for c in lca_classes)} > {item_part}")
    ancestor = lca.parent
    while ancestor is not None and ancestor.tag not in ("html", "body"):
        anc_id = _trusted_id(ancestor)
        if anc_id:
            candidates.append(f"#{anc_id} {item_part}")
            break
        anc_classes = _trusted_classes(ancestor)
        if anc_classes:
            candidates.append(
                f"{ancestor.tag}{''.join(f'.{c}' for c in anc_classes)} {item_part}"
            )
            break
        ancestor = ancestor.parent
    candidates.append(f"{lca.tag} > {item_part}")
    candidates.append(item_part)

    for candidate in candidates:
        try:
            matches = dom.query(snapshot, candidate)
        except SelectorSyntaxError:
            continue
        if matches == expected:
            return ListSelector(
                container=GeneralizedSelector([candidate], target_kind="list")
            )
    raise ListTooDiffuseError(
        f"no container selector reproduces the {len(expected)}-item set"
    )


# --- within-item selectors ------------------------------------------------------


def relativize(
    snapshot: dom.DomSnapshot, item_root: int, node_id: int
) -> GeneralizedSelector:
    """``:scope``-relative selector matching the node uniquely within its item."""
    root = snapshot.node(item_root)
    node = snapshot.node(node_id)
    if node is root:
        return GeneralizedSelector([":scope"], target_kind="element")
    if not _is_descendant(node, root):
        raise NotInItemError(f"node {node_id} is outside item {item_root}")

    candidates: list[str] = []
    classes = _trusted_classes(node)
    if classes:
        candidates.append(":scope " + "".join(f".{c}" for c in classes))
    own_id = _trusted_id(node)
    if own_id:
        candidates.append(f":scope #{own_id}")
    anchored = _classed_ancestor_path(node, root)
    if anchored:
        candidates.append(anchored)
    for attr in STABLE_ATTRS:
        value = node.attributes.get(attr)
        if value and len(value) <= 64 and '"' not in value and trusted_token_loose(value):
            candidates.append(f':scope {node.tag}[{attr}="{value}"]')
            break

    survivors = [
        c
        for c in candidates
        if _unique_within(snapshot, c, item_root, node)
    ]
    if not survivors:
        positional = _positional_scope_path(node, root)
        if not _unique_within(snapshot, positional, item_root, node):
            raise SelectorUngeneralizableError(
                f"cannot address node {node_id} within its item"
            )
        survivors = [positional]
    return GeneralizedSelector(alternatives=survivors, target_kind="element")


def _is_descendant(node: dom.DomNode, ancestor: dom.DomNode) -> bool:
    current = node.parent
    while current is not None:
        if current is ancestor:
            return True
        current = current.parent
    return False


def _classed_ancestor_path(node: dom.DomNode, root: dom.DomNode) -> str | None:
    """Path from the nearest classed/id'd strict ancestor below the item root."""
    steps = [node.tag]
    current = node.parent
    while current is not None and current is not root:
        anchor_id = _trusted_id(current)
        classes = _trusted_classes(current)
        if anchor_id:
            return f":scope #{anchor_id} > " + " > ".join(reversed(steps))
        if classes:
            anchor = "".join(f".{c}" for c in classes)
            return f":scope {anchor} > " + " > ".join(reversed(steps))
        steps.append(current.tag)
        current = current.parent
    return None


def _positional_scope_path(node: dom.DomNode, root: dom.DomNode) -> str:
    steps: list[str] = []
    current = node
    while current is not root:
        steps.append(f"{current.tag}{_position_pseudo(current)}")
        current = current.parent
    return ":scope > " + " > ".join(reversed(steps))


def _unique_within(
    snapshot: dom.DomSnapshot, selector: str, item_root: int, node: dom.DomNode
) -> bool:
    try:
        matches = dom.query(snapshot, selector, scope=item_root)
    except SelectorSyntaxError:
        return False
    return len(matches) == 1 and matches[0] is node


# --- model-backed generation ------------------------------------------------------

_SELECTOR_LINE = re.compile(r"^\s*SELECTOR:\s*(?P<sel>.+?)\s*$", re.M)


def selector_model_generate(
    goal: str,
    columns: list[str],
    lca_html: str,
    description: str,
    model,
    baseline_selector: str | None = None,
) -> ListSelector:
    """Ask the selector model for a container selector over the common parent.

    The returned selector is validated against the parsed ``lca_html``: it
    must match at least one item and every matched item must contain a
    plausible field node per column (an anchor for URL columns, visible text
    otherwise). With ``baseline_selector`` given, the model's match set must
    also cover the baseline's. One retry with the failure appended, then
    SelectorModelFailed.
    """
    fragment = dom.parse_snapshot(lca_html, "https://fragment.local/")
    prompt = load_template("selector").format(
        goal=goal,
        columns=", ".join(columns),
        description=description,
        html=lca_html,
    )
    messages = [{"role": "user", "content": prompt}]
    failure = ""
    for attempt in range(2):
        if failure:
            messages = messages + [
                {"role": "user", "content": f"That selector failed: {failure}. Try again."}
            ]
        text, _usage = model.complete(messages)
        selector = _parse_selector_reply(text)
        if selector is None:
            failure = "reply had no SELECTOR: line"
            continue
        problem = _validate_model_selector(fragment, selector, columns, baseline_selector)
        if problem is None:
            logger.info("selector model produced %r (attempt %d)", selector, attempt + 1)
            return ListSelector(
                container=GeneralizedSelector([selector], target_kind="list")
            )
        failure = problem
    raise SelectorModelFailedError(failure)


def _parse_selector_reply(text: str) -> str | None:
    match = _SELECTOR_LINE.search(text)
    return match.group("sel") if match else None


def _validate_model_selector(
    fragment: dom.DomSnapshot,
    selector: str,
    columns: list[str],
    baseline_selector: str | None,
) -> str | None:
    try:
        items = dom.query(fragment, selector)
    except SelectorSyntaxError as exc:
        return f"unparsable selector ({exc.message})"
    if not items:
        return "selector matched zero nodes"
    for item in items:
        for column in columns:
            if _wants_url(column):
                ok = any(
                    "href" in n.attributes for n in item.iter_subtree()
                )
            else:
                ok = bool(item.visible_text())
            if not ok:
                return f"an item lacks a plausible node for column {column!r}"
    if baseline_selector:
        baseline = set(
            n.node_id for n in dom.query(fragment, baseline_selector)
        )
        got = set(n.node_id for n in items)
        if not baseline <= got:
            return "match set does not cover the baseline list"
    return None


def _wants_url(column: str) -> bool:
    return "url" in column.lower() or "link" in column.lower()
