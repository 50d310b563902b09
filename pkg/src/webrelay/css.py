"""CSS selector engine for DomNode trees.

Supports the subset the selector generator can emit: type selectors,
``.class``, ``#id``, ``[attr]``, ``[attr=value]``, child (``>``) and
descendant combinators, ``:first-child`` / ``:last-child`` /
``:nth-child(n)``, ``:scope``, and comma-separated groups.

Matching is right-to-left per node; callers get results in document order
with duplicates from comma groups removed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

from .errors import SelectorSyntaxError

_IDENT = r"-?[A-Za-z_][A-Za-z0-9_-]*"
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<child>>)
  | (?P<comma>,)
  | (?P<scope>:scope\b)
  | (?P<nth>:nth-child\(\s*(?P<nth_arg>\d+)\s*\))
  | (?P<first>:first-child\b)
  | (?P<last>:last-child\b)
  | (?P<id>\#(?P<id_name>%(ident)s))
  | (?P<class>\.(?P<class_name>%(ident)s))
  | (?P<attr>\[\s*(?P<attr_name>%(ident)s)\s*(?:=\s*(?P<attr_val>"[^"]*"|'[^']*'|[^\]\s]+)\s*)?\])
  | (?P<type>%(ident)s|\*)
    """
    % {"ident": _IDENT},
    re.VERBOSE,
)


@dataclass(frozen=True)
class Simple:
    """One simple selector: kind in {type, id, class, attr, first, last, nth, scope}."""

    kind: str
    name: str = ""
    value: str | None = None


# A compound is a tuple of Simples; a complex selector is a tuple of
# (combinator, compound) pairs where the first combinator is "".
Compound = tuple[Simple, ...]
Complex = tuple[tuple[str, Compound], ...]


@lru_cache(maxsize=2048)
def parse_selector(text: str) -> tuple[Complex, ...]:
    """Parse selector text into a group of complex selectors."""
    if not text or not text.strip():
        raise SelectorSyntaxError("empty selector")
    group: list[Complex] = []
    for part in _split_group(text):
        group.append(_parse_complex(part))
    return tuple(group)


def _split_group(text: str) -> list[str]:
    # Commas cannot appear inside this grammar's brackets except in attr
    # values; split outside quotes/brackets.
    parts: list[str] = []
    depth = 0
    quote = ""
    start = 0
    for i, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = ""
        elif ch in "\"'":
            quote = ch
        elif ch == "[":
            depth += 1
        elif ch == "]":
            depth = max(0, depth - 1)
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    if any(not p.strip() for p in parts):
        raise SelectorSyntaxError(f"empty selector in group: {text!r}")
    return parts


def _parse_complex(text: str) -> Complex:
    pos = 0
    out: list[tuple[str, Compound]] = []
    pending_comb = ""
    current: list[Simple] = []
    saw_ws = False

    def flush():
        nonlocal current, pending_comb
        if not current:
            if pending_comb == ">":
                raise SelectorSyntaxError(f"dangling combinator in {text!r}")
            return
        out.append((pending_comb, tuple(current)))
        current = []
        pending_comb = ""

    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise SelectorSyntaxError(f"bad selector near {text[pos:]!r}")
        pos = m.end()
        if m.lastgroup in ("ws",):
            saw_ws = True
            continue
        if m.group("child"):
            flush()
            pending_comb = ">"
            saw_ws = False
            continue
        if m.group("comma"):
            raise SelectorSyntaxError("unexpected comma")
        # A new compound starts after whitespace (descendant combinator).
        if saw_ws and current:
            flush()
            pending_comb = ""
        saw_ws = False
        if m.group("scope"):
            current.append(Simple("scope"))
        elif m.group("nth"):
            current.append(Simple("nth", value=m.group("nth_arg")))
        elif m.group("first"):
            current.append(Simple("first"))
        elif m.group("last"):
            current.append(Simple("last"))
        elif m.group("id"):
            current.append(Simple("id", name=m.group("id_name")))
        elif m.group("class"):
            current.append(Simple("class", name=m.group("class_name")))
        elif m.group("attr"):
            val = m.group("attr_val")
            if val is not None and val[:1] in "\"'":
                val = val[1:-1]
            current.append(Simple("attr", name=m.group("attr_name").lower(), value=val))
        elif m.group("type"):
            # A type selector is only valid at the start of a compound.
            if current:
                raise SelectorSyntaxError(f"type selector not first in compound: {text!r}")
            current.append(Simple("type", name=m.group("type").lower()))
    flush()
    if not out:
        raise SelectorSyntaxError(f"no compounds in {text!r}")
    if out[0][0] == ">":
        raise SelectorSyntaxError(f"leading combinator in {text!r}")
    return tuple(out)


def selector_uses_scope(text: str) -> bool:
    return any(
        simple.kind == "scope"
        for complex_ in parse_selector(text)
        for _, compound in complex_
        for simple in compound
    )


# --- matching ----------------------------------------------------------------


def _classes(node) -> list[str]:
    return node.attributes.get("class", "").split()


def _child_index(node) -> int:
    """1-based position among element siblings."""
    parent = node.parent
    if parent is None:
        return 1
    return parent.children.index(node) + 1


def _matches_compound(node, compound: Compound, scope) -> bool:
    for simple in compound:
        if simple.kind == "scope":
            if scope is None or node is not scope:
                return False
        elif simple.kind == "type":
            if simple.name != "*" and node.tag != simple.name:
                return False
        elif simple.kind == "id":
            if node.attributes.get("id") != simple.name:
                return False
        elif simple.kind == "class":
            if simple.name not in _classes(node):
                return False
        elif simple.kind == "attr":
            if simple.name not in node.attributes:
                return False
            if simple.value is not None and node.attributes[simple.name] != simple.value:
                return False
        elif simple.kind == "first":
            if _child_index(node) != 1:
                return False
        elif simple.kind == "last":
            parent = node.parent
            n = len(parent.children) if parent else 1
            if _child_index(node) != n:
                return False
        elif simple.kind == "nth":
            if _child_index(node) != int(simple.value or 0):
                return False
    return True


def _matches_complex(node, complex_: Complex, scope) -> bool:
    return _match_from(node, complex_, len(complex_) - 1, scope)


def _match_from(node, complex_: Complex, idx: int, scope) -> bool:
    comb, compound = complex_[idx]
    if not _matches_compound(node, compound, scope):
        return False
    if idx == 0:
        return True
    prev_comb = comb  # combinator between complex_[idx-1] and this compound
    if prev_comb == ">":
        parent = node.parent
        return parent is not None and _match_from(parent, complex_, idx - 1, scope)
    anc = node.parent
    while anc is not None:
        if _match_from(anc, complex_, idx - 1, scope):
            return True
        anc = anc.parent
    return False


def match_nodes(candidates, selector_text: str, scope=None) -> list:
    """Return candidates (document order) matching any selector in the group.

    ``scope`` is the node ``:scope`` resolves to; selectors using ``:scope``
    require it (enforced by the caller, dom.query).
    """
    group = parse_selector(selector_text)
    out = []
    for node in candidates:
        if any(_matches_complex(node, c, scope) for c in group):
            out.append(node)
    return out
