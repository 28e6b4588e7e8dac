import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN, HISTORY, SCRIPT, fixture_chunks
from memtree.gate import GateConfig
from memtree.ingest import (
    DialogueChunk,
    DialogueTurn,
    HistoryError,
    TurnBuffer,
    chunk,
    chunk_fingerprint,
    evolve,
    normalize_history,
)
from memtree.listener import FailingClient, ListenerTransportError, ScriptedClient
from memtree.schema import default_schema_text, init_tree, serialize_tree, tree_hash
from memtree.store import VersionStore, replay


def _turns(n):
    return [DialogueTurn("user" if i % 2 == 0 else "assistant", f"turn {i}", "s", i) for i in range(n)]


def test_fixture_history_in_session_order():
    turns = normalize_history(HISTORY.read_text(encoding="utf-8"))
    assert len(turns) >= 60
    sessions = [t.session_id for t in turns]
    assert sessions == sorted(sessions)
    assert len(set(sessions)) >= 10
    assert turns[0].role == "user" and turns[0].text.startswith("Hi! I'm Maya")


def test_empty_history():
    assert normalize_history("") == []
    assert normalize_history("\n  \n") == []


@pytest.mark.parametrize(
    "lines, line_no, needle",
    [
        (['{"role": "user", "text": "hi"}', '{"text": "no role"}'], 2, "role"),
        (['{"role": "robot", "text": "beep"}'], 1, "unknown role"),
        (['{"role": "user", "text": "a"}', "{not json"], 2, "malformed"),
        (['{"role": "user", "text": "  "}'], 1, "non-empty"),
        (['{"role": "user", "text": "a", "session_id": "s", "ordinal": 2}', '{"role": "user", "text": "b", "session_id": "s", "ordinal": 2}'], 2, "increase"),
    ],
)
def test_history_errors(lines, line_no, needle):
    with pytest.raises(HistoryError) as exc:
        normalize_history("\n".join(lines))
    assert exc.value.line_no == line_no and needle in str(exc.value)


def test_transcript_format():
    text = "USER: I like tea.\nASSISTANT: Noted.\nMore on that.\n\nuser: and cats"
    turns = normalize_history(text)
    assert [(t.role, t.text) for t in turns] == [
        ("user", "I like tea."),
        ("assistant", "Noted.\nMore on that."),
        ("user", "and cats"),
    ]
    with pytest.raises(HistoryError):
        normalize_history("no prefix here")


def test_chunk_examples():
    assert [len(c.turns) for c in chunk(_turns(7), 3)] == [3, 3, 1]
    assert [len(c.turns) for c in chunk(_turns(3), 5)] == [3]
    assert [len(c.turns) for c in chunk(_turns(4), 1)] == [1, 1, 1, 1]
    assert chunk([], 3) == []
    assert [c.chunk_id for c in chunk(_turns(4), 2, prefix="h")] == ["h-00001", "h-00002"]
    with pytest.raises(ValueError):
        chunk(_turns(2), 0)


@given(st.integers(min_value=0, max_value=60), st.sampled_from([1, 3, 5, 7, 10, 13, 15]))
@settings(max_examples=200, deadline=None)
def test_chunk_partition(n, w):
    turns = _turns(n)
    chunks = chunk(turns, w)
    assert [t for c in chunks for t in c.turns] == turns
    assert all(1 <= len(c.turns) <= w for c in chunks)
    assert len({c.chunk_id for c in chunks}) == len(chunks)


def test_chunk_dict_roundtrip_and_fingerprint():
    c = chunk(_turns(3), 3)[0]
    back = DialogueChunk.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back == c and back.fingerprint == c.fingerprint
    # the fingerprint ignores ids and session metadata
    other = [DialogueTurn(t.role, t.text) for t in c.turns]
    assert chunk_fingerprint(other) == c.fingerprint


def test_turn_buffer():
    buf = TurnBuffer(w=2)
    out = []
    for t in _turns(5):
        out += buf.push(t)
    assert [len(c.turns) for c in out] == [2, 2]
    rest = buf.flush()
    assert [len(c.turns) for c in rest] == [1] and buf.flush() == []
    assert [c.chunk_id for c in out + rest] == ["live-00001", "live-00002", "live-00003"]


@pytest.fixture
def store(tmp_path, schema):
    return VersionStore.create(tmp_path / "s", schema, default_schema_text())


def test_zero_chunks(store, schema):
    res = evolve(store, schema, ScriptedClient({}), [])
    assert res.head_id == 0 and store.head_id == 0


def test_noop_chain_commits_every_chunk(store, schema):
    chunks = chunk(_turns(10), 3)
    client = ScriptedClient({}, default="NO_OP()")
    res = evolve(store, schema, client, chunks)
    assert res.committed == [1, 2, 3, 4] and res.listener_calls == 4 == len(client.calls)
    assert tree_hash(store.head_tree()) == tree_hash(init_tree(schema))
    assert all(store.record(v).digest == store.record(0).digest for v in range(5))


def test_one_call_per_chunk_with_fingerprint_key(store, schema):
    chunks = chunk(_turns(6), 2)
    client = ScriptedClient({}, default="")
    evolve(store, schema, client, chunks)
    assert [k for k, _ in client.calls] == [c.fingerprint for c in chunks]


def test_prompt_carries_previous_tree(store, schema):
    chunks = chunk(_turns(4), 2)
    path = "3_Social_Characteristics.Demographics.Identity.Name"
    client = ScriptedClient({chunks[0].fingerprint: f'ADD({path}, "Maya")'})
    evolve(store, schema, client, chunks)
    first, second = (p for _, p in client.calls)
    assert "Name: Maya" not in first and "Name: Maya" in second
    assert chunks[1].text in second


def test_fixture_golden_tree(evolved_store):
    golden = (GOLDEN / "final_tree.json").read_text(encoding="utf-8")
    assert serialize_tree(evolved_store.head_tree(), "canonical") == golden
    _, chunks = fixture_chunks()
    assert evolved_store.head_id == len(chunks)


def test_resume_matches_uninterrupted(tmp_path, schema, evolved_store):
    _, chunks = fixture_chunks()
    script = json.loads(SCRIPT.read_text(encoding="utf-8"))
    store = VersionStore.create(tmp_path / "r", schema, default_schema_text())
    evolve(store, schema, ScriptedClient(script, default=None), chunks[:17])
    # simulate a crash: a fresh process reopens the store and reruns everything
    again = VersionStore.open(store.root)
    res = evolve(again, schema, ScriptedClient(script, default=None), chunks)
    assert len(res.skipped) == 17 and res.listener_calls == len(chunks) - 17
    assert tree_hash(again.head_tree()) == tree_hash(evolved_store.head_tree())
    assert [c["chunk_id"] for c in again.read_chunks()] == [c.chunk_id for c in chunks]


def test_transport_retry_then_success(store, schema):
    chunks = chunk(_turns(3), 3)

    class Flaky:
        def __init__(self):
            self.calls = 0

        def complete(self, prompt, *, key=None):
            self.calls += 1
            if self.calls < 3:
                raise ListenerTransportError("boom")
            return "NO_OP()"

    delays = []
    client = Flaky()
    res = evolve(store, schema, client, chunks, sleep=delays.append, backoff=0.5)
    assert delays == [0.5, 1.0] and res.committed == [1] and res.listener_calls == 1


def test_transport_exhaustion_leaves_resumable_head(store, schema):
    chunks = chunk(_turns(6), 3)
    client = ScriptedClient({chunks[0].fingerprint: "NO_OP()"}, default=None)

    class Dies:
        def __init__(self):
            self.calls = 0

        def complete(self, prompt, *, key=None):
            if key == chunks[0].fingerprint:
                return client.complete(prompt, key=key)
            self.calls += 1
            raise ListenerTransportError("down")

    dies = Dies()
    delays = []
    with pytest.raises(ListenerTransportError) as exc:
        evolve(store, schema, dies, chunks, sleep=delays.append)
    assert exc.value.attempts == 4 and dies.calls == 4 and len(delays) == 3
    assert store.head_id == 1
    res = evolve(VersionStore.open(store.root), schema, ScriptedClient({}), chunks)
    assert res.skipped == [chunks[0].chunk_id] and res.head_id == 2


def test_non_retryable_error_fails_fast(store, schema):
    class Rejects:
        calls = 0

        def complete(self, prompt, *, key=None):
            Rejects.calls += 1
            raise ListenerTransportError("HTTP 400", status=400, retryable=False)

    with pytest.raises(ListenerTransportError):
        evolve(store, schema, Rejects(), chunk(_turns(3), 3), sleep=lambda s: None)
    assert Rejects.calls == 1


def test_failing_client_counts_calls(store, schema):
    client = FailingClient()
    with pytest.raises(ListenerTransportError):
        evolve(store, schema, client, chunk(_turns(3), 3), retries=2, sleep=lambda s: None)
    assert client.calls == 3


def test_all_rejected_chunk_still_commits(store, schema):
    chunks = chunk(_turns(3), 3)
    client = ScriptedClient({chunks[0].fingerprint: 'ADD(Nowhere.Path, "x")\nprose'})
    res = evolve(store, schema, client, chunks)
    assert res.committed == [1] and res.rejected == 1 and res.diagnostics == 1
    rec = store.record(1)
    assert rec.digest == store.record(0).digest
    assert rec.report["rejections"] == [["Nowhere.Path", "path-not-writable"]]
    assert tree_hash(replay(store)) == rec.digest


def test_marker_that_does_not_fit_is_refused(store):
    from memtree.gate import GateConfigError
    from memtree.schema import load_schema

    tiny = load_schema('{"T": {"A": {"$budget": 3}}}')
    with pytest.raises(GateConfigError):
        evolve(store, tiny, ScriptedClient({}), [], GateConfig(deletion_mode="marker"))
