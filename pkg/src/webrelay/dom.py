"""Immutable DOM snapshots: parsing, simplification, and querying.

The parser is a tag-soup tolerant tree builder on top of the stdlib
``html.parser`` tokenizer. It applies the standard repair rules that matter
for real-world markup (void elements, implied end tags for li/p/td/tr/...,
mismatched end tags) and always produces an ``html > body`` skeleton so every
snapshot has a well-defined root.

Snapshots are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from html import escape
from html.parser import HTMLParser
from urllib.parse import urljoin, urlsplit

from . import css
from .errors import (
    BadBaseUrlError,
    EmptyDocumentError,
    NotALinkError,
    EmptySelectionError,
    ScopeMissingError,
    UnknownNodeError,
)

VOID_TAGS = {
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link",
    "meta", "param", "source", "track", "wbr",
}

# start tag -> open tags it implicitly closes (nearest first)
_IMPLIED_CLOSES = {
    "li": {"li"},
    "dt": {"dt", "dd"},
    "dd": {"dt", "dd"},
    "tr": {"tr", "td", "th"},
    "td": {"td", "th"},
    "th": {"td", "th"},
    "thead": {"thead", "tbody", "tfoot", "tr", "td", "th"},
    "tbody": {"thead", "tbody", "tfoot", "tr", "td", "th"},
    "tfoot": {"thead", "tbody", "tfoot", "tr", "td", "th"},
    "option": {"option"},
    "optgroup": {"option", "optgroup"},
    "p": {"p"},
}

_P_CLOSERS = {
    "address", "article", "aside", "blockquote", "div", "dl", "fieldset",
    "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5",
    "h6", "header", "hr", "main", "nav", "ol", "p", "pre", "section",
    "table", "ul",
}

_HEAD_ONLY_TAGS = {"title", "meta", "base", "style"}


class DomNode:
    """One element in a snapshot. Treat as immutable once parsed."""

    __slots__ = ("node_id", "tag", "attributes", "children", "parent", "_content")

    def __init__(self, tag: str, attributes: dict[str, str], parent: "DomNode | None"):
        self.node_id: int = -1  # assigned when the snapshot is sealed
        self.tag = tag
        self.attributes = attributes
        self.children: list[DomNode] = []
        self.parent = parent
        self._content: list["DomNode | str"] = []  # children and text, document order

    def append_child(self, child: "DomNode") -> None:
        self.children.append(child)
        self._content.append(child)

    def append_text(self, chunk: str) -> None:
        self._content.append(chunk)

    @property
    def text(self) -> str:
        """Concatenated direct text content."""
        return "".join(c for c in self._content if isinstance(c, str))

    def __repr__(self) -> str:
        return f"<DomNode {self.tag} id={self.node_id}>"

    def iter_subtree(self):
        """Yield self then descendants, document order."""
        yield self
        for child in self.children:
            yield from child.iter_subtree()

    def visible_text(self) -> str:
        """Whitespace-normalized text of the subtree, skipping script/style."""
        parts: list[str] = []
        self._collect_text(parts)
        return normalize_ws("".join(parts))

    def _collect_text(self, parts: list[str]) -> None:
        if self.tag in ("script", "style", "template"):
            return
        for item in self._content:
            if isinstance(item, str):
                parts.append(item)
            else:
                item._collect_text(parts)


def normalize_ws(text: str) -> str:
    """Collapse internal whitespace runs to single spaces and trim."""
    return re.sub(r"\s+", " ", text).strip()


class _TreeBuilder(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.root = DomNode("html", {}, None)
        self.head = DomNode("head", {}, self.root)
        self.body = DomNode("body", {}, self.root)
        self.root.append_child(self.head)
        self.root.append_child(self.body)
        self.stack: list[DomNode] = [self.body]
        self._saw_explicit = {"html": False, "head": False, "body": False}

    def _top(self) -> DomNode:
        return self.stack[-1]

    def handle_starttag(self, tag, attrs):
        tag = tag.lower()
        if tag in ("html", "head", "body"):
            # Merge attributes onto the synthesized skeleton.
            target = {"html": self.root, "head": self.head, "body": self.body}[tag]
            for name, value in attrs:
                target.attributes.setdefault(name.lower(), value or "")
            return
        self._imply_closes(tag)
        parent = self._pick_parent(tag)
        attributes: dict[str, str] = {}
        for name, value in attrs:
            attributes.setdefault(name.lower(), value if value is not None else "")
        node = DomNode(tag, attributes, parent)
        parent.append_child(node)
        if tag not in VOID_TAGS:
            self.stack.append(node)

    def handle_startendtag(self, tag, attrs):
        tag = tag.lower()
        if tag in VOID_TAGS or tag in ("html", "head", "body"):
            self.handle_starttag(tag, attrs)
        else:
            self.handle_starttag(tag, attrs)
            self.handle_endtag(tag)

    def handle_endtag(self, tag):
        tag = tag.lower()
        if tag in ("html", "head", "body") or tag in VOID_TAGS:
            return
        for i in range(len(self.stack) - 1, 0, -1):
            if self.stack[i].tag == tag:
                del self.stack[i:]
                return
        # No matching open tag: ignore the stray end tag.

    def handle_data(self, data):
        if data:
            self._top().append_text(data)

    def _imply_closes(self, tag: str) -> None:
        closes = set(_IMPLIED_CLOSES.get(tag, ()))
        if tag in _P_CLOSERS:
            closes.add("p")
        if not closes:
            return
        # Close the nearest implied-open element unless a scoping boundary
        # (list/table container) sits above it.
        boundary = {"ul", "ol", "table", "body", "select", "dl"}
        for i in range(len(self.stack) - 1, 0, -1):
            t = self.stack[i].tag
            if t in closes:
                del self.stack[i:]
                return
            if t in boundary:
                return

    def _pick_parent(self, tag: str) -> DomNode:
        if tag in _HEAD_ONLY_TAGS and self._top() is self.body and not self.body.children:
            return self.head
        return self._top()


class DomSnapshot:
    """Parsed page: element tree + base URL. Immutable after construction."""

    def __init__(self, root: DomNode, base_url: str):
        self.root = root
        self.base_url = base_url
        self._nodes: dict[int, DomNode] = {}
        for i, node in enumerate(root.iter_subtree()):
            node.node_id = i
            self._nodes[i] = node
        self._simplified: SimplifiedDom | None = None

    @property
    def body(self) -> DomNode:
        for child in self.root.children:
            if child.tag == "body":
                return child
        return self.root

    def node(self, node_id: int) -> DomNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"no node {node_id} in snapshot") from None

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._nodes

    def simplified(self) -> "SimplifiedDom":
        """The cached whole-page observation view (see :func:`simplify`)."""
        if self._simplified is None:
            self._simplified = simplify(self)
        return self._simplified

    @property
    def id_map(self) -> dict[int, int]:
        """Numeric policy ID -> node_id for the whole-page observation."""
        return self.simplified().id_map

    def tree_digest(self) -> str:
        """Stable content hash; equal trees hash equal."""
        h = hashlib.sha256()
        for node in self.root.iter_subtree():
            attrs = ";".join(f"{k}={v}" for k, v in sorted(node.attributes.items()))
            h.update(f"{node.tag}|{attrs}|{node.text}|{len(node.children)}\n".encode())
        return h.hexdigest()


@dataclass
class SimplifiedDom:
    """Observation view: serialized text with numeric IDs for exposed nodes."""

    text: str
    exposed_ids: set[int]
    id_map: dict[int, int] = field(default_factory=dict)  # numeric ID -> node_id
    scope: int | None = None  # node_id the view is narrowed to

    def node_id_for(self, numeric_id: int) -> int:
        try:
            return self.id_map[numeric_id]
        except KeyError:
            raise UnknownNodeError(f"numeric ID {numeric_id} not exposed") from None


def parse_snapshot(html: str | bytes, base_url: str) -> DomSnapshot:
    """Parse an HTML document into an immutable snapshot.

    Malformed markup is repaired rather than rejected; an empty document or a
    relative base URL is an error.
    """
    if isinstance(html, bytes):
        html = html.decode("utf-8", errors="replace")
    if html is None or not html.strip():
        raise EmptyDocumentError("empty HTML document")
    split = urlsplit(base_url)
    if not split.scheme or not split.netloc:
        raise BadBaseUrlError(f"base_url must be absolute: {base_url!r}")
    builder = _TreeBuilder()
    builder.feed(html)
    builder.close()
    return DomSnapshot(builder.root, base_url)


# --- simplification -----------------------------------------------------------

INTERACTIVE_TAGS = {"a", "button", "input", "select", "textarea"}
HEADING_TAGS = {"h1", "h2", "h3", "h4", "h5", "h6"}
STRUCTURE_TAGS = {
    "ul", "ol", "li", "table", "thead", "tbody", "tfoot", "tr", "td", "th",
    "dl", "dt", "dd",
}
DROP_TAGS = {"script", "style", "template", "noscript", "head", "title", "meta", "link", "base"}
KEPT_ATTRS = ("id", "class", "href", "role", "aria-label", "name", "type", "value")


def _keep_in_observation(node: DomNode) -> bool:
    if node.tag in DROP_TAGS:
        return False
    if node.tag in ("html", "body"):
        return False
    if node.tag in INTERACTIVE_TAGS or node.tag in HEADING_TAGS or node.tag in STRUCTURE_TAGS:
        return True
    return bool(normalize_ws(node.text))


def simplify(snapshot: DomSnapshot, scope: int | None = None) -> SimplifiedDom:
    """Produce the observation DOM: wrappers pruned, numeric IDs assigned.

    Keeps interactive elements, headings, list/table structure, and any
    element with its own text; everything else is flattened away. IDs are
    sequential in document order. With ``scope`` set, only that node's
    descendants are exposed (the scope element itself renders as an
    unnumbered context line).
    """
    if scope is not None and scope not in snapshot:
        raise UnknownNodeError(f"scope node {scope} not in snapshot")
    scope_node = snapshot.node(scope) if scope is not None else None

    id_map: dict[int, int] = {}
    lines: list[str] = []
    counter = [0]

    def render(node: DomNode, depth: int) -> None:
        for child in node.children:
            if child.tag in DROP_TAGS:
                continue
            if _keep_in_observation(child):
                counter[0] += 1
                numeric = counter[0]
                id_map[numeric] = child.node_id
                _render_kept(child, depth, numeric)
            else:
                render(child, depth)

    def _render_kept(node: DomNode, depth: int, numeric: int) -> None:
        indent = "  " * depth
        attrs = _format_attrs(node)
        kept_children = _has_kept_descendant(node)
        if kept_children:
            lines.append(f"{indent}<{node.tag} #{numeric}{attrs}>")
            own = normalize_ws(node.text)
            if own:
                lines.append(f"{indent}  {own}")
            render(node, depth + 1)
            lines.append(f"{indent}</{node.tag}>")
        else:
            text = node.visible_text()
            if node.tag in VOID_TAGS:
                lines.append(f"{indent}<{node.tag} #{numeric}{attrs}/>")
            else:
                lines.append(f"{indent}<{node.tag} #{numeric}{attrs}>{text}</{node.tag}>")

    def _has_kept_descendant(node: DomNode) -> bool:
        for child in node.children:
            if child.tag in DROP_TAGS:
                continue
            if _keep_in_observation(child) or _has_kept_descendant(child):
                return True
        return False

    if scope_node is not None:
        lines.append(f"<{scope_node.tag}{_format_attrs(scope_node)}>")
        render(scope_node, 1)
        lines.append(f"</{scope_node.tag}>")
    else:
        render(snapshot.body, 0)

    return SimplifiedDom(
        text="\n".join(lines),
        exposed_ids=set(id_map),
        id_map=id_map,
        scope=scope,
    )


def _format_attrs(node: DomNode) -> str:
    parts = []
    for name in node.attributes:
        if name in KEPT_ATTRS and node.attributes[name] != "":
            parts.append(f'{name}="{escape(node.attributes[name], quote=True)}"')
    return (" " + " ".join(parts)) if parts else ""


# --- querying -------------------------------------------------------------------


def query(snapshot: DomSnapshot, selector: str, scope: int | None = None) -> list[DomNode]:
    """Evaluate a CSS selector, returning matches in document order.

    ``:scope`` resolves to the scope node; when scope is set, results are
    restricted to the scope's subtree. Comma groups return the deduplicated
    union.
    """
    group_uses_scope = css.selector_uses_scope(selector)  # also validates syntax
    if group_uses_scope and scope is None:
        raise ScopeMissingError(f":scope used without a scope: {selector!r}")
    if scope is not None:
        if scope not in snapshot:
            raise UnknownNodeError(f"scope node {scope} not in snapshot")
        scope_node = snapshot.node(scope)
        domain = list(scope_node.iter_subtree())
    else:
        scope_node = None
        domain = list(snapshot.root.iter_subtree())
    return css.match_nodes(domain, selector, scope_node)


def least_common_ancestor(snapshot: DomSnapshot, nodes: list[int]) -> int:
    """Deepest node that is an ancestor-or-self of every input node."""
    if not nodes:
        raise EmptySelectionError("least_common_ancestor of empty selection")
    paths = []
    for node_id in nodes:
        node = snapshot.node(node_id)
        path = []
        while node is not None:
            path.append(node)
            node = node.parent
        paths.append(list(reversed(path)))
    lca = None
    for level in zip(*paths):
        first = level[0]
        if all(n is first for n in level):
            lca = first
        else:
            break
    assert lca is not None  # all paths share the root
    return lca.node_id


def resolve_link(snapshot: DomSnapshot, node_id: int) -> str:
    """Absolute URL carried by the node's href (or src) attribute."""
    node = snapshot.node(node_id)
    for attr in ("href", "src"):
        if attr in node.attributes:
            return urljoin(snapshot.base_url, node.attributes[attr])
    raise NotALinkError(f"<{node.tag}> has no link attribute")


def to_html(node: DomNode) -> str:
    """Serialize a subtree back to HTML (for selector-model prompts)."""
    if node.tag in VOID_TAGS:
        return f"<{node.tag}{_all_attrs(node)}/>"
    inner = "".join(
        escape(item) if isinstance(item, str) else to_html(item)
        for item in node._content
    )
    return f"<{node.tag}{_all_attrs(node)}>{inner}</{node.tag}>"


def _all_attrs(node: DomNode) -> str:
    parts = [f'{k}="{escape(v, quote=True)}"' for k, v in node.attributes.items()]
    return (" " + " ".join(parts)) if parts else ""
