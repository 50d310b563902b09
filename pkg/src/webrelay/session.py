"""Page access and interaction state.

Two fetchers sit behind one interface: a fixture-manifest fetcher that
serves HTML files and simulates widget interactions from a transitions
table, and a plain HTTP fetcher for live pages (no JavaScript). The session
itself tracks the current snapshot and a URL history stack for GoBack.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import css, dom
from .errors import (
    ElementNotFoundError,
    HttpFetchError,
    InteractionUnsupportedError,
    NoHistoryError,
    PageNotFoundError,
)

logger = logging.getLogger(__name__)


class Fetcher:
    def fetch(self, url: str) -> str:
        raise NotImplementedError

    def transition(self, url: str, selector: str, kind: str, value: str | None) -> str | None:
        """URL reached by a non-link interaction, when the backend knows one."""
        return None


@dataclass(frozen=True)
class _Transition:
    url: str
    selector: str
    action: str
    value: str | None
    target: str


class FixtureManifest:
    """URL -> HTML file map plus (url, selector, action[, value]) -> URL moves."""

    def __init__(self, pages: dict[str, Path], transitions: list[_Transition]):
        self.pages = pages
        self.transitions = transitions
        for t in transitions:
            if t.target not in pages:
                raise ValueError(f"transition target not in pages: {t.target}")
            css.parse_selector(t.selector)  # validates

    @classmethod
    def load(cls, manifest_path: str | Path) -> "FixtureManifest":
        manifest_path = Path(manifest_path)
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        base = manifest_path.parent
        pages = {
            entry["url"]: base / entry["file"] for entry in data.get("pages", [])
        }
        transitions = [
            _Transition(
                url=entry["url"],
                selector=entry["selector"],
                action=entry.get("action", "click"),
                value=entry.get("value"),
                target=entry["target"],
            )
            for entry in data.get("transitions", [])
        ]
        return cls(pages, transitions)

    def lookup(self, url: str, selector_texts: list[str], kind: str, value: str | None) -> str | None:
        for t in self.transitions:
            if t.url != url or t.action != kind:
                continue
            if t.value is not None and t.value != value:
                continue
            if t.selector in selector_texts:
                return t.target
        return None


class FixtureFetcher(Fetcher):
    def __init__(self, manifest: FixtureManifest):
        self.manifest = manifest

    @classmethod
    def from_dir(cls, fixture_dir: str | Path) -> "FixtureFetcher":
        return cls(FixtureManifest.load(Path(fixture_dir) / "manifest.json"))

    def fetch(self, url: str) -> str:
        path = self.manifest.pages.get(url)
        if path is None:
            raise PageNotFoundError(f"no fixture page for {url}")
        return path.read_text(encoding="utf-8")

    def transition(self, url, selector, kind, value=None):
        return self.manifest.lookup(url, [selector], kind, value)


class InMemoryFetcher(Fetcher):
    """Pages from a dict; handy for generated fixtures in tests."""

    def __init__(self, pages: dict[str, str], transitions: dict[tuple, str] | None = None):
        self.pages = pages
        self.transitions = transitions or {}

    def fetch(self, url: str) -> str:
        try:
            return self.pages[url]
        except KeyError:
            raise PageNotFoundError(f"no page for {url}") from None

    def transition(self, url, selector, kind, value=None):
        return self.transitions.get((url, selector, kind, value)) or self.transitions.get(
            (url, selector, kind)
        )


class LiveFetcher(Fetcher):
    """Plain HTTP GET, redirects followed, no JavaScript, polite delay."""

    def __init__(self, user_agent: str = "webrelay/0.1", min_delay: float = 1.0):
        self.user_agent = user_agent
        self.min_delay = min_delay
        self._last_request = 0.0

    def fetch(self, url: str) -> str:
        import requests

        wait = self.min_delay - (time.monotonic() - self._last_request)
        if wait > 0:
            time.sleep(wait)
        self._last_request = time.monotonic()
        response = requests.get(url, headers={"User-Agent": self.user_agent}, timeout=30)
        if response.status_code >= 400:
            raise HttpFetchError(response.status_code, f"{url} -> {response.status_code}")
        return response.text


@dataclass
class NavigationSession:
    """Single-owner, sequential browsing state over a fetcher."""

    fetcher: Fetcher
    current: dom.DomSnapshot | None = None
    url: str = ""
    history: list[str] = field(default_factory=list)
    input_state: dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, fetcher: Fetcher, url: str) -> "NavigationSession":
        session = cls(fetcher=fetcher)
        session._load(url)
        return session

    def _load(self, url: str) -> dom.DomSnapshot:
        html = self.fetcher.fetch(url)
        self.current = dom.parse_snapshot(html, url)
        self.url = url
        self.input_state = {}
        return self.current

    def navigate(self, url: str) -> dom.DomSnapshot:
        if self.url:
            self.history.append(self.url)
        return self._load(url)

    def go_back(self) -> dom.DomSnapshot:
        if not self.history:
            raise NoHistoryError("history is empty")
        return self._load(self.history.pop())

    def interact(self, selector: str, kind: str = "click", value: str | None = None) -> dom.DomSnapshot:
        """Click or type on the first match of ``selector``.

        Anchor clicks navigate to the resolved href. Anything else consults
        the fetcher's transition table; typing with no transition only
        records input state.
        """
        assert self.current is not None
        alternatives = [s.strip() for s in selector.split(",")]
        node = None
        matched_alt = selector
        for alt in [selector] + alternatives:
            matches = dom.query(self.current, alt)
            if matches:
                node = matches[0]
                matched_alt = alt
                break
        if node is None:
            raise ElementNotFoundError(f"nothing matches {selector!r} on {self.url}")
        if kind == "click" and node.tag == "a" and "href" in node.attributes:
            return self.navigate(dom.resolve_link(self.current, node.node_id))
        target = None
        for text in (selector, matched_alt, *alternatives):
            target = self.fetcher.transition(self.url, text, kind, value)
            if target:
                break
        if kind == "type":
            self.input_state[matched_alt] = value or ""
            if target:
                return self.navigate(target)
            return self.current
        if target:
            return self.navigate(target)
        raise InteractionUnsupportedError(
            f"no transition for {kind} on {selector!r} at {self.url}"
        )

    def restore(self, url: str, history: list[str]) -> dom.DomSnapshot:
        """Backtracking support: reset to a prior (url, history) pair."""
        snapshot = self._load(url)
        self.history = list(history)
        return snapshot
