"""Versioned prompt templates shipped as package text assets."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

TEMPLATE_VERSIONS = {
    "policy": "policy_v1.txt",
    "chooser": "chooser_v1.txt",
    "verifier": "verifier_v1.txt",
    "selector": "selector_v1.txt",
    "qa": "qa_v1.txt",
}


@lru_cache(maxsize=None)
def load_template(role: str) -> str:
    filename = TEMPLATE_VERSIONS[role]
    return (
        resources.files("webrelay.prompts").joinpath(filename).read_text(encoding="utf-8")
    )
