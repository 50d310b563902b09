"""Language-model access: one HTTP chat-completions shape, deterministic mocks.

Every call produces a UsageRecord (failures included, with zero token
counts) so cost reports can always be reconstructed from the usage log.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field

import requests

from .errors import GatewayProtocolError, GatewayUnavailableError, MissingRateError

logger = logging.getLogger(__name__)

ROLES = ("policy", "chooser", "verifier", "selector", "qa")


@dataclass
class GatewayConfig:
    endpoint: str = ""
    model: str = "mock"
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 2
    api_key: str = ""

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class UsageRecord:
    role: str
    input_tokens: int
    output_tokens: int
    wall_time: float

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "wall_time": self.wall_time,
        }


class UsageLog:
    """Append-only usage sink; optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.records: list[UsageRecord] = []
        self.path = path
        self._lock = threading.Lock()

    def append(self, record: UsageRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    def calls_by_role(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for record in self.records:
            counts[record.role] = counts.get(record.role, 0) + 1
        return counts

    def totals(self) -> tuple[int, int]:
        return (
            sum(r.input_tokens for r in self.records),
            sum(r.output_tokens for r in self.records),
        )


def _approx_tokens(text: str) -> int:
    # Whitespace tokenization: deterministic and model-free.
    return len(text.split())


def complete(prompt: list[dict], config: GatewayConfig) -> tuple[str, UsageRecord]:
    """One chat completion over HTTP with retry/backoff.

    Wire format: POST {model, messages, temperature}; response must carry
    choices[0].message.content. Usage tokens come from the server when
    present, else a whitespace approximation.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    payload = {
        "model": config.model,
        "messages": prompt,
        "temperature": config.temperature,
    }
    headers = {"Content-Type": "application/json"}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    start = time.monotonic()
    last_error: Exception | None = None
    for attempt in range(config.max_retries + 1):
        try:
            response = requests.post(
                config.endpoint, json=payload, headers=headers, timeout=config.timeout
            )
        except requests.RequestException as exc:
            last_error = exc
            if attempt < config.max_retries:
                time.sleep(min(0.2 * 2**attempt, 2.0))
            continue
        if response.status_code >= 500:
            last_error = GatewayUnavailableError(f"server error {response.status_code}")
            if attempt < config.max_retries:
                time.sleep(min(0.2 * 2**attempt, 2.0))
            continue
        if response.status_code >= 400:
            raise GatewayProtocolError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayProtocolError(f"malformed completion response: {exc}") from exc
        usage = body.get("usage") or {}
        record = UsageRecord(
            role="unspecified",
            input_tokens=int(
                usage.get("prompt_tokens")
                or sum(_approx_tokens(m.get("content", "")) for m in prompt)
            ),
            output_tokens=int(usage.get("completion_tokens") or _approx_tokens(text)),
            wall_time=time.monotonic() - start,
        )
        return text, record
    raise GatewayUnavailableError(f"gateway unreachable after retries: {last_error}")


class ModelGateway:
    """Interface: complete(messages) -> (text, UsageRecord)."""

    role = "unspecified"

    def complete(self, messages: list[dict]) -> tuple[str, UsageRecord]:
        raise NotImplementedError


class HttpGateway(ModelGateway):
    def __init__(self, config: GatewayConfig, role: str, usage_log: UsageLog | None = None):
        self.config = config
        self.role = role
        self.usage_log = usage_log

    def complete(self, messages: list[dict]) -> tuple[str, UsageRecord]:
        start = time.monotonic()
        try:
            text, record = complete(messages, self.config)
        except Exception:
            if self.usage_log is not None:
                self.usage_log.append(
                    UsageRecord(self.role, 0, 0, time.monotonic() - start)
                )
            raise
        record.role = self.role
        if self.usage_log is not None:
            self.usage_log.append(record)
        return text, record


class ScriptedGateway(ModelGateway):
    """Deterministic mock: answers from a queue, in order."""

    def __init__(self, responses: list[str], role: str = "policy",
                 usage_log: UsageLog | None = None):
        self.queue = list(responses)
        self.served = 0
        self.role = role
        self.usage_log = usage_log

    def complete(self, messages: list[dict]) -> tuple[str, UsageRecord]:
        if self.served >= len(self.queue):
            raise GatewayUnavailableError(
                f"scripted {self.role} gateway exhausted after {self.served} calls"
            )
        text = self.queue[self.served]
        self.served += 1
        record = UsageRecord(
            role=self.role,
            input_tokens=sum(_approx_tokens(m.get("content", "")) for m in messages),
            output_tokens=_approx_tokens(text),
            wall_time=0.0,
        )
        if self.usage_log is not None:
            self.usage_log.append(record)
        return text, record


class KeyedGateway(ModelGateway):
    """Mock keyed by substring of the last message (used for QA scripts)."""

    def __init__(self, answers: dict[str, str], role: str = "qa",
                 default: str = "I don't know", usage_log: UsageLog | None = None):
        self.answers = dict(answers)
        self.default = default
        self.role = role
        self.usage_log = usage_log

    def complete(self, messages: list[dict]) -> tuple[str, UsageRecord]:
        content = messages[-1].get("content", "") if messages else ""
        text = self.default
        for key, answer in self.answers.items():
            if key in content:
                text = answer
                break
        record = UsageRecord(
            role=self.role,
            input_tokens=sum(_approx_tokens(m.get("content", "")) for m in messages),
            output_tokens=_approx_tokens(text),
            wall_time=0.0,
        )
        if self.usage_log is not None:
            self.usage_log.append(record)
        return text, record


# --- cost accounting -------------------------------------------------------------


def cost(usage: list[UsageRecord], price_table: dict[str, dict[str, float]]) -> float:
    """Total cost in cents: sum of tokens times per-1k-token role rates."""
    total = 0.0
    for record in usage:
        if record.role not in price_table:
            raise MissingRateError(f"no price for role {record.role!r}")
        rates = price_table[record.role]
        total += record.input_tokens / 1000.0 * rates["input_per_1k"]
        total += record.output_tokens / 1000.0 * rates["output_per_1k"]
    return total


@dataclass
class GatewaySuite:
    """Per-role gateways behind one usage log."""

    policy: ModelGateway
    chooser: ModelGateway
    verifier: ModelGateway
    selector: ModelGateway
    qa: ModelGateway
    usage_log: UsageLog = field(default_factory=UsageLog)


def suite_from_config(config: dict, usage_log: UsageLog | None = None) -> GatewaySuite:
    """Build the five role gateways from a config mapping.

    ``{"mode": "mock", "script": {...}}`` wires ScriptedGateways (the script
    maps role -> list of responses; "qa" may map question substrings to
    answers). ``{"mode": "http", ...}`` wires HttpGateways per role.
    """
    log = usage_log or UsageLog()
    mode = config.get("mode", "mock")
    if mode == "mock":
        script = config.get("script", {})
        gateways = {}
        for role in ROLES:
            entry = script.get(role, [])
            if isinstance(entry, dict):
                gateways[role] = KeyedGateway(entry, role=role, usage_log=log)
            else:
                gateways[role] = ScriptedGateway(entry, role=role, usage_log=log)
        return GatewaySuite(usage_log=log, **gateways)
    if mode == "http":
        import os

        api_key = os.environ.get(config.get("api_key_env", "WEBRELAY_API_KEY"), "")
        gateways = {}
        for role in ROLES:
            cfg = GatewayConfig(
                endpoint=config["endpoint"],
                model=config.get("models", {}).get(role, config.get("model", "default")),
                temperature=config.get("temperatures", {}).get(
                    role, config.get("temperature", 0.0)
                ),
                timeout=config.get("timeout", 30.0),
                max_retries=config.get("max_retries", 2),
                api_key=api_key,
            )
            gateways[role] = HttpGateway(cfg, role=role, usage_log=log)
        return GatewaySuite(usage_log=log, **gateways)
    raise ValueError(f"unknown gateway mode {mode!r}")
