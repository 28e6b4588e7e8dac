"""Turn histories into dialogue chunks and fold them into the tree, one version per chunk."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from memtree.gate import GateConfig, apply_ops
from memtree.listener import ListenerTransportError, OpsPrompt, build_ops_prompt, generate_ops
from memtree.ops import parse_op_list
from memtree.schema import Schema, serialize_tree
from memtree.store import VersionStore

log = logging.getLogger(__name__)

ROLES = ("user", "assistant")
DEFAULT_WINDOW = 3
_PREFIXES = {"USER:": "user", "ASSISTANT:": "assistant"}


class HistoryError(ValueError):
    def __init__(self, line_no: int, message: str) -> None:
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class DialogueTurn:
    role: str
    text: str
    session_id: str | None = None
    ordinal: int | None = None

    def render(self) -> str:
        return f"{self.role.upper()}: {self.text}"


@dataclass(frozen=True)
class DialogueChunk:
    chunk_id: str
    turns: tuple[DialogueTurn, ...]

    @property
    def text(self) -> str:
        return "\n".join(t.render() for t in self.turns)

    @property
    def fingerprint(self) -> str:
        return chunk_fingerprint(self.turns)

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "turns": [
                {"role": t.role, "text": t.text, "session_id": t.session_id, "ordinal": t.ordinal}
                for t in self.turns
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DialogueChunk":
        return cls(data["chunk_id"], tuple(DialogueTurn(**t) for t in data["turns"]))


def chunk_fingerprint(turns: Iterable[DialogueTurn]) -> str:
    """Content key of a chunk, independent of its id and of session metadata."""
    text = "\n".join(t.render() for t in turns)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def normalize_history(source: str) -> list[DialogueTurn]:
    """Parse a history document into ordered turns.

    Accepts line-delimited JSON records ``{session_id, ordinal, role, text}``
    or a plain transcript whose turns start with ``USER:`` / ``ASSISTANT:``
    (unprefixed lines continue the previous turn).
    """
    lines = source.split("\n")
    first = next((ln.strip() for ln in lines if ln.strip()), "")
    if not first:
        return []
    if first.startswith("{"):
        return _from_records(lines)
    return _from_transcript(lines)


def _from_records(lines: list[str]) -> list[DialogueTurn]:
    turns: list[DialogueTurn] = []
    last_ordinal: dict[str | None, int] = {}
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise HistoryError(no, f"malformed record: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise HistoryError(no, "record must be an object")
        role = rec.get("role")
        if role is None:
            raise HistoryError(no, "record missing role")
        role = str(role).lower()
        if role not in ROLES:
            raise HistoryError(no, f"unknown role {rec.get('role')!r}")
        text = rec.get("text")
        if not isinstance(text, str) or not text.strip():
            raise HistoryError(no, "record text must be a non-empty string")
        session = rec.get("session_id")
        session = None if session is None else str(session)
        ordinal = rec.get("ordinal")
        if ordinal is not None:
            if not isinstance(ordinal, int) or isinstance(ordinal, bool):
                raise HistoryError(no, "ordinal must be an integer")
            if session in last_ordinal and ordinal <= last_ordinal[session]:
                raise HistoryError(no, f"ordinal {ordinal} does not increase within session {session!r}")
            last_ordinal[session] = ordinal
        turns.append(DialogueTurn(role, text, session, ordinal))
    return turns


def _from_transcript(lines: list[str]) -> list[DialogueTurn]:
    turns: list[tuple[str, list[str]]] = []
    for no, line in enumerate(lines, start=1):
        stripped = line.strip()
        head = next((p for p in _PREFIXES if stripped.upper().startswith(p)), None)
        if head is not None:
            turns.append((_PREFIXES[head], [stripped[len(head):].strip()]))
        elif stripped:
            if not turns:
                raise HistoryError(no, "transcript line has no USER:/ASSISTANT: prefix")
            turns[-1][1].append(stripped)
    out = []
    for i, (role, parts) in enumerate(turns):
        text = "\n".join(p for p in parts if p)
        if not text:
            raise HistoryError(0, f"turn {i + 1} is empty")
        out.append(DialogueTurn(role, text, None, i))
    return out


def chunk(turns: list[DialogueTurn], w: int = DEFAULT_WINDOW, prefix: str = "c") -> list[DialogueChunk]:
    """Greedy fixed windows of ``w`` turns; the last window may be shorter."""
    if w < 1:
        raise ValueError("chunk window must be at least 1")
    return [
        DialogueChunk(f"{prefix}-{i // w + 1:05d}", tuple(turns[i : i + w]))
        for i in range(0, len(turns), w)
    ]


@dataclass
class TurnBuffer:
    """Live-chat cache: collects turns and releases a chunk every ``w`` turns
    or on an explicit flush."""

    w: int = DEFAULT_WINDOW
    prefix: str = "live"
    start: int = 0
    pending: list[DialogueTurn] = field(default_factory=list)

    def _emit(self, turns: list[DialogueTurn]) -> DialogueChunk:
        self.start += 1
        return DialogueChunk(f"{self.prefix}-{self.start:05d}", tuple(turns))

    def push(self, turn: DialogueTurn) -> list[DialogueChunk]:
        self.pending.append(turn)
        if len(self.pending) >= self.w:
            out = [self._emit(self.pending[: self.w])]
            self.pending = self.pending[self.w :]
            return out
        return []

    def flush(self) -> list[DialogueChunk]:
        if not self.pending:
            return []
        out = [self._emit(self.pending)]
        self.pending = []
        return out


@dataclass
class EvolveResult:
    head_id: int
    committed: list[int] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    applied: int = 0
    rejected: int = 0
    truncated: int = 0
    diagnostics: int = 0
    listener_calls: int = 0


def _call_with_retry(
    client, prompt: OpsPrompt, retries: int, backoff: float, sleep: Callable[[float], None]
) -> str:
    attempt = 0
    while True:
        try:
            return generate_ops(client, prompt)
        except ListenerTransportError as exc:
            if attempt >= retries or not exc.retryable:
                exc.attempts = attempt + 1
                raise
            delay = backoff * (2**attempt)
            log.warning("listener transport failure (%s); retrying in %.2fs", exc, delay)
            sleep(delay)
            attempt += 1


def evolve(
    store: VersionStore,
    schema: Schema,
    listener,
    chunks: list[DialogueChunk],
    gate_cfg: GateConfig | None = None,
    *,
    retries: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
    resume: bool = True,
) -> EvolveResult:
    """Fold chunks into the store, committing one version per chunk.

    With ``resume`` set, chunks whose id is already in the log are skipped,
    so re-running after an interruption continues from the head. A transport
    failure that outlives the retries propagates with the head left at the
    last committed chunk.
    """
    gate_cfg = gate_cfg or GateConfig()
    gate_cfg.check_against(schema)
    result = EvolveResult(store.head_id)
    with store.writer():
        done = store.committed_chunk_ids() if resume else set()
        tree = store.head_tree()
        head = store.head_id
        for ch in chunks:
            if ch.chunk_id in done:
                result.skipped.append(ch.chunk_id)
                continue
            prompt = build_ops_prompt(serialize_tree(tree, "prompt_compact"), ch)
            raw = _call_with_retry(listener, prompt, retries, backoff, sleep)
            result.listener_calls += 1
            ops, diags = parse_op_list(raw)
            tree, report = apply_ops(tree, schema, ops, gate_cfg)
            store.append_chunks([ch.to_dict()])
            head = store.commit(tree, ops, report, ch.chunk_id, gate_cfg, parent_id=head)
            result.committed.append(head)
            result.applied += len(report.applied)
            result.rejected += len(report.rejected)
            result.truncated += len(report.truncated)
            result.diagnostics += sum(1 for d in diags if not d.accepted)
        result.head_id = store.head_id
    return result
