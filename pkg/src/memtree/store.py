"""Append-only versioned persistence of tree states.

A store is a directory::

    schema.json    schema document the tree was initialized from
    log.jsonl      one VersionRecord per line, version 0 first
    head.json      {"version_id": N, "digest": "..."}; a cache of the log tail
    chunks.jsonl   ingested dialogue chunks, used as the retrieval corpus
    .lock          advisory writer lock

The log is the source of truth. A torn final line (crash mid-append) is
ignored by readers and cut off the next time a writer opens the store.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

from filelock import FileLock, Timeout

from memtree.gate import ApplyReport, GateConfig, apply_ops
from memtree.ops import parse_op_list, render_op
from memtree.schema import PersonaTree, Schema, init_tree, load_schema, parse_tree, serialize_tree, tree_hash

LOG_NAME = "log.jsonl"
HEAD_NAME = "head.json"
SCHEMA_NAME = "schema.json"
CHUNKS_NAME = "chunks.jsonl"
LOCK_NAME = ".lock"

RECORD_FIELDS = (
    "version_id",
    "parent_id",
    "chunk_id",
    "ops",
    "report",
    "gate",
    "snapshot",
    "digest",
    "timestamp",
)


class StoreError(Exception):
    pass


class HeadMovedError(StoreError):
    pass


class ReplayMismatch(StoreError):
    def __init__(self, version_id: int, expected: str, actual: str) -> None:
        self.version_id = version_id
        self.expected = expected
        self.actual = actual
        super().__init__(f"digest mismatch at version {version_id}: recorded {expected[:12]}, replayed {actual[:12]}")


@dataclass
class VersionRecord:
    version_id: int
    parent_id: int | None
    chunk_id: str | None
    ops: list[str]
    report: dict
    gate: dict
    snapshot: str
    digest: str
    timestamp: str = ""

    def to_line(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "VersionRecord":
        if set(data) != set(RECORD_FIELDS):
            raise StoreError(f"record fields {sorted(data)} do not match the log format")
        return cls(**data)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class VersionStore:
    """Single-user version log rooted at ``root``."""

    root: Path
    schema: Schema
    records: list[VersionRecord] = field(default_factory=list, repr=False)
    _lock: FileLock | None = field(default=None, repr=False)

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def create(cls, root: str | Path, schema: Schema, schema_text: str | None = None) -> "VersionStore":
        root = Path(root)
        if (root / LOG_NAME).exists():
            raise StoreError(f"store already initialized at {root}")
        root.mkdir(parents=True, exist_ok=True)
        text = schema_text if schema_text is not None else json.dumps(schema.to_document(), ensure_ascii=False, indent=2)
        if load_schema(text) != schema:
            raise StoreError("schema text does not describe the given schema")
        (root / SCHEMA_NAME).write_text(text, encoding="utf-8")
        store = cls(root, schema)
        tree = init_tree(schema)
        snapshot = serialize_tree(tree, "canonical")
        rec = VersionRecord(0, None, None, [], ApplyReport().summary(), GateConfig().to_dict(), snapshot, tree_hash(tree), _now())
        with store.writer():
            store._append(rec)
        return store

    @classmethod
    def open(cls, root: str | Path) -> "VersionStore":
        root = Path(root)
        if not (root / LOG_NAME).exists():
            raise StoreError(f"no store at {root} (run init first)")
        schema = load_schema((root / SCHEMA_NAME).read_text(encoding="utf-8"))
        store = cls(root, schema)
        store.reload()
        return store

    def reload(self) -> None:
        self.records = list(self._read_records())
        if not self.records:
            raise StoreError("log holds no root record")

    def _read_records(self) -> Iterator[VersionRecord]:
        raw = (self.root / LOG_NAME).read_bytes()
        lines = raw.split(b"\n")
        # the last element is b"" for a clean log, or a torn record
        for no, line in enumerate(lines[:-1], start=1):
            try:
                rec = VersionRecord.from_dict(json.loads(line.decode("utf-8")))
            except (ValueError, TypeError) as exc:
                raise StoreError(f"{LOG_NAME} line {no}: unreadable record ({exc})") from exc
            if rec.version_id != no - 1:
                raise StoreError(f"{LOG_NAME} line {no}: expected version {no - 1}, found {rec.version_id}")
            yield rec

    def _valid_prefix_length(self) -> int:
        raw = (self.root / LOG_NAME).read_bytes()
        return raw.rfind(b"\n") + 1

    class _Writer:
        def __init__(self, store: "VersionStore", timeout: float) -> None:
            self.store = store
            self.timeout = timeout

        def __enter__(self) -> "VersionStore":
            lock = FileLock(str(self.store.root / LOCK_NAME))
            try:
                lock.acquire(timeout=self.timeout)
            except Timeout as exc:
                raise HeadMovedError("another writer holds the store lock") from exc
            self.store._lock = lock
            log = self.store.root / LOG_NAME
            if log.exists():
                keep = self.store._valid_prefix_length()
                if keep < log.stat().st_size:
                    with open(log, "r+b") as fh:
                        fh.truncate(keep)
                self.store.reload()
            return self.store

        def __exit__(self, *exc: object) -> None:
            lock, self.store._lock = self.store._lock, None
            if lock is not None:
                lock.release()

    def writer(self, timeout: float = 10.0) -> "VersionStore._Writer":
        """Context manager holding the single-writer lock."""
        return VersionStore._Writer(self, timeout)

    # -- reading -------------------------------------------------------------

    @property
    def head_id(self) -> int:
        return self.records[-1].version_id

    def record(self, version_id: int) -> VersionRecord:
        if not 0 <= version_id < len(self.records):
            raise StoreError(f"no version {version_id} (head is {self.head_id})")
        return self.records[version_id]

    def tree_at(self, version_id: int) -> PersonaTree:
        return parse_tree(self.record(version_id).snapshot, self.schema)

    def head_tree(self) -> PersonaTree:
        return self.tree_at(self.head_id)

    def committed_chunk_ids(self) -> set[str]:
        return {r.chunk_id for r in self.records if r.chunk_id is not None}

    # -- writing -------------------------------------------------------------

    def _append(self, rec: VersionRecord) -> None:
        if self._lock is None:
            raise StoreError("commit requires the writer lock")
        log = self.root / LOG_NAME
        with open(log, "ab") as fh:
            fh.write(rec.to_line().encode("utf-8"))
            fh.flush()
            os.fsync(fh.fileno())
        self.records.append(rec)
        head = self.root / HEAD_NAME
        tmp = head.with_suffix(".tmp")
        tmp.write_text(json.dumps({"version_id": rec.version_id, "digest": rec.digest}), encoding="utf-8")
        os.replace(tmp, head)

    def commit(
        self,
        new_tree: PersonaTree,
        ops: list,
        report: ApplyReport,
        chunk_id: str | None,
        gate: GateConfig | None = None,
        *,
        parent_id: int | None = None,
        digest: str | None = None,
    ) -> int:
        """Append ``new_tree`` as the next version and return its id.

        ``parent_id`` is the head the caller built on; a mismatch means another
        writer moved the head. ``digest`` lets callers assert the tree they
        think they are committing.
        """
        new_tree.check()
        snapshot = serialize_tree(new_tree, "canonical")
        actual = tree_hash(new_tree)
        if digest is not None and digest != actual:
            raise StoreError(f"snapshot digest {actual[:12]} does not match declared digest {digest[:12]}")
        if tree_hash(parse_tree(snapshot, self.schema)) != actual:
            raise StoreError("snapshot does not round-trip to the committed tree")
        lines = [op if isinstance(op, str) else render_op(op) for op in ops]

        def write() -> int:
            head = self.head_id
            if parent_id is not None and parent_id != head:
                raise HeadMovedError(f"head moved: expected {parent_id}, store is at {head}")
            rec = VersionRecord(
                head + 1,
                head,
                chunk_id,
                lines,
                report.summary(),
                (gate or GateConfig()).to_dict(),
                snapshot,
                actual,
                _now(),
            )
            self._append(rec)
            return rec.version_id

        if self._lock is not None:
            return write()
        with self.writer():
            return write()

    def append_chunks(self, chunks: list[dict]) -> None:
        with open(self.root / CHUNKS_NAME, "a", encoding="utf-8") as fh:
            for c in chunks:
                fh.write(json.dumps(c, ensure_ascii=False) + "\n")

    def read_chunks(self) -> list[dict]:
        path = self.root / CHUNKS_NAME
        if not path.exists():
            return []
        out: dict[str, dict] = {}
        for line in path.read_text(encoding="utf-8").split("\n"):
            if line.strip():
                rec = json.loads(line)
                # a chunk written just before an interrupted commit is written again on resume
                out.setdefault(rec["chunk_id"], rec)
        return list(out.values())


def replay(store: VersionStore, start: int = 0, end: int | None = None) -> PersonaTree:
    """Rebuild version ``end`` from version ``start`` by re-executing the
    recorded operations, checking every intermediate digest."""
    end = store.head_id if end is None else end
    if start > end:
        raise StoreError(f"replay range is empty: {start} > {end}")
    first = store.record(start)
    tree = parse_tree(first.snapshot, store.schema)
    if tree_hash(tree) != first.digest:
        raise ReplayMismatch(start, first.digest, tree_hash(tree))
    for vid in range(start + 1, end + 1):
        rec = store.record(vid)
        ops, _ = parse_op_list("\n".join(rec.ops))
        tree, _ = apply_ops(tree, store.schema, ops, GateConfig.from_dict(rec.gate))
        got = tree_hash(tree)
        if got != rec.digest:
            raise ReplayMismatch(vid, rec.digest, got)
    return tree


def diff(a: PersonaTree, b: PersonaTree) -> list[tuple[str, str | None, str | None]]:
    """Sorted (path, before, after) triples for every leaf whose text differs.

    A leaf present in only one tree reports None on the other side.
    """
    paths = set(a.values) | set(b.values)
    out = []
    for p in sorted(paths):
        before, after = a.values.get(p), b.values.get(p)
        if before != after:
            out.append((p.text, before, after))
    return out
