from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memtree.ingest import chunk, evolve, normalize_history  # noqa: E402
from memtree.listener import ScriptedClient  # noqa: E402
from memtree.schema import default_schema, default_schema_text  # noqa: E402
from memtree.store import VersionStore  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
HISTORY = FIXTURES / "history.jsonl"
SCRIPT = FIXTURES / "listener_script.json"
CASES = FIXTURES / "cases.jsonl"
GOLDEN = FIXTURES / "golden"


def fixture_chunks():
    turns = normalize_history(HISTORY.read_text(encoding="utf-8"))
    return turns, chunk(turns, 3, prefix="history")


def build_fixture_store(root: Path) -> VersionStore:
    schema = default_schema()
    store = VersionStore.create(root, schema, default_schema_text())
    _, chunks = fixture_chunks()
    evolve(store, schema, ScriptedClient.from_file(SCRIPT, default=None), chunks)
    return store


@pytest.fixture(scope="session")
def evolved_store(tmp_path_factory) -> VersionStore:
    return build_fixture_store(tmp_path_factory.mktemp("evolved") / "store")


@pytest.fixture
def schema():
    return default_schema()


_CRITERIA: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
