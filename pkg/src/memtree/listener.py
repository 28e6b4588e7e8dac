"""Operation-list generation: the prompt template and chat-completion clients."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import httpx

TEMPLATE_VERSION = "ops-v1"

OPS_PROMPT_TEMPLATE = """\
You are a Memory-Tree Operation Generator. You will be given:
(1) An initial persona schema represented as a hierarchical JSON tree.
(2) A dialogue history.

Your objective is to transform the dialogue history into a sequence of operations for updating the persona schema, **covering as comprehensively as possible all information about this person, especially personalized characteristics**.

About the schema:
- The schema below contains **user attribute information that has already been successfully structured**;
- Treat the schema as “recorded information” and **do not re-extract fields that already exist**;
- Generate operations for the schema only when the dialogue history introduces additional facts, details, or preferences not yet covered by the schema;
- If the dialogue history conflicts with the schema, the **most recent explicit statement** in the dialogue should prevail.

Principles for using ADD / UPDATE / DELETE / NO_OP:
   * Use: ADD(path, "value") when an attribute at that path has **not been recorded at all**. Prefer creating more branches and avoid overly long content in a single attribute.
   * Use: UPDATE(path, "value") when an attribute at that path already has a record and the current passage **supplements, refines, or corrects** it.
   * Use: DELETE(path, None) only when the passage explicitly states that an existing piece of information **is no longer valid, is negated, or should be removed**.
   * If the passage does not entail any changes, output a single line: NO_OP().

Key requirements for "value" in UPDATE (very important):
   * "value" must semantically **contain or integrate the previously valid information** while incorporating or reflecting the new information, yielding a more complete, more accurate, and up-to-date description.
   * It is **strictly forbidden** to discard useful original content and keep only the new information in an UPDATE.
   * When the new information is supplemental or more specific, the value should be an integrated expression of “original information + new supplementation”.
   * When the new information conflicts with the old, the value should describe the “current latest and most reasonable state”, while retaining non-conflicting old details whenever possible.

Notes:
1. Treat each leaf node in the JSON schema as an attribute slot capable of storing a textual value.

2. For each distinct user personal attribute mentioned in the dialogue history:
   * Locate the most closely matching and most specific leaf node in the schema.
   * Generate **exactly one and only one** operation for that attribute.

3. You may use only the following operations:
   * ADD(path, "value"), UPDATE(path, "value"), DELETE(path, None), NO_OP()

4. Requirements for the "path" format:
   * Use a JSON key path separated by English periods. Example:
1_Biological_Characteristics.Physiological_Status.Age_Related_Characteristics.Chronological_Age

5. Requirements for the "value" format:
   * Provide a natural-language expression extracted from or normalized based on the dialogue history.
   * It must be enclosed in English double quotation marks.

6. Output format (must be strictly followed):
   * Output only operations, one operation per line.
   * Do not add any explanations or comments.
   * The only permissible forms are: ADD(<path>, "<value>"), UPDATE(<path>, "<value>"), DELETE(<path>, None), NO_OP()

Persona Schema:

{schema}

Dialogue History:

{dialogue_text}

Now, based on the given dialogue history, output only the operations:
"""

ENV_ENDPOINT = "MEMTREE_LLM_ENDPOINT"
ENV_API_KEY = "MEMTREE_LLM_API_KEY"
ENV_MODEL = "MEMTREE_LLM_MODEL"


_SLOT_RE = re.compile(r"\{(\w+)\}")


def fill_template(template: str, **values: str) -> str:
    """Substitute ``{name}`` slots in one pass; inserted text is never rescanned."""
    return _SLOT_RE.sub(lambda m: values.get(m.group(1), m.group(0)), template)


def estimate_tokens(text: str) -> int:
    """Model-agnostic token estimate: four characters per token, rounded up."""
    return -(-len(text) // 4)


@dataclass(frozen=True)
class OpsPrompt:
    text: str
    token_estimate: int
    key: str | None = None


def build_ops_prompt(tree_state: str, chunk) -> OpsPrompt:
    """Fill the operation-generation template with the tree outline and chunk text.

    ``chunk`` is a DialogueChunk; its content fingerprint becomes the prompt
    key that scripted clients look up.
    """
    dialogue = chunk.text if chunk is not None else ""
    text = fill_template(OPS_PROMPT_TEMPLATE, schema=tree_state, dialogue_text=dialogue)
    inputs = estimate_tokens(tree_state) + estimate_tokens(dialogue)
    key = chunk.fingerprint if chunk is not None else None
    return OpsPrompt(text, inputs, key)


class ListenerTransportError(Exception):
    """The model endpoint could not be reached or answered with an error."""

    def __init__(self, message: str, status: int | None = None, retryable: bool = True) -> None:
        super().__init__(message)
        self.status = status
        self.retryable = retryable
        self.attempts = 1


class CompletionClient(Protocol):
    def complete(self, prompt: str, *, key: str | None = None) -> str: ...


@dataclass(frozen=True)
class ListenerConfig:
    endpoint: str | None = None
    model: str = "memlistener"
    api_key: str | None = None
    temperature: float = 0.7
    top_p: float = 0.9
    max_tokens: int = 1024
    strategy: str = "direct"
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.strategy != "direct":
            raise ValueError("only the direct generation strategy is supported")


class HTTPChatClient:
    """Client for any server speaking the chat-completions HTTP contract."""

    def __init__(self, cfg: ListenerConfig, transport: httpx.BaseTransport | None = None) -> None:
        if not cfg.endpoint:
            raise ValueError(f"no endpoint configured (set {ENV_ENDPOINT})")
        self.cfg = cfg
        url = cfg.endpoint.rstrip("/")
        self.url = url if url.endswith("/chat/completions") else url + "/chat/completions"
        headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
        self._client = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **overrides) -> "HTTPChatClient":
        env = os.environ if env is None else env
        cfg = ListenerConfig(
            endpoint=env.get(ENV_ENDPOINT),
            api_key=env.get(ENV_API_KEY),
            model=env.get(ENV_MODEL, "memlistener"),
            **overrides,
        )
        return cls(cfg)

    def complete(self, prompt: str, *, key: str | None = None) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "max_tokens": self.cfg.max_tokens,
        }
        try:
            resp = self._client.post(self.url, json=payload)
        except httpx.TimeoutException as exc:
            raise ListenerTransportError(f"timeout after {self.cfg.timeout}s: {exc}") from exc
        except httpx.HTTPError as exc:
            raise ListenerTransportError(f"transport failure: {exc}") from exc
        if resp.status_code != 200:
            retryable = resp.status_code == 429 or resp.status_code >= 500
            raise ListenerTransportError(
                f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code, retryable=retryable
            )
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ListenerTransportError(f"unexpected response body: {exc}", retryable=False) from exc


class ScriptedClient:
    """Offline test double: canned completions keyed by prompt key.

    Unknown keys fall back to ``default``; with ``default=None`` they raise.
    Every call is recorded in ``calls``.
    """

    def __init__(self, script: Mapping[str, str], default: str | None = "NO_OP()") -> None:
        self.script = dict(script)
        self.default = default
        self.calls: list[tuple[str | None, str]] = []

    @classmethod
    def from_file(cls, path: str | Path, default: str | None = "NO_OP()") -> "ScriptedClient":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
            raise ValueError(f"{path}: mock script must map fingerprints to completion strings")
        return cls(data, default)

    def complete(self, prompt: str, *, key: str | None = None) -> str:
        self.calls.append((key, prompt))
        if key in self.script:
            return self.script[key]
        if self.default is None:
            raise KeyError(f"no scripted completion for key {key!r}")
        return self.default


class FailingClient:
    """Always raises a transport error; for fallback paths and retry tests."""

    def __init__(self, message: str = "endpoint unreachable") -> None:
        self.message = message
        self.calls = 0

    def complete(self, prompt: str, *, key: str | None = None) -> str:
        self.calls += 1
        raise ListenerTransportError(self.message)


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class EchoClient:
    """Deterministic stand-in answerer: reports the prompt digest and size."""

    def __init__(self) -> None:
        self.prompts: list[str] = []

    def complete(self, prompt: str, *, key: str | None = None) -> str:
        self.prompts.append(prompt)
        return f"echo {prompt_digest(prompt)} chars={len(prompt)}"


def generate_ops(client: CompletionClient, prompt: OpsPrompt) -> str:
    """Return the raw completion for an ops prompt; parsing happens elsewhere."""
    return client.complete(prompt.text, key=prompt.key)
