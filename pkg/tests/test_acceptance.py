"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line that the terminal summary prints (see
``conftest.pytest_terminal_summary``), so a plain ``pytest`` run shows the
verdict per criterion.
"""

import json
import random
import statistics
import time

import pytest

from conftest import CASES, GOLDEN, fixture_chunks, record_criterion
from evolutions import random_evolution, random_turns, tamper_op_line
from memtree.evaluation import FixedAnswerClient, OracleAnswerClient, load_cases, run_eval
from memtree.gate import GateConfig, apply_ops
from memtree.ingest import DialogueChunk, chunk
from memtree.ops import NoOp, normalize_op_line, parse_op_list, render_ops
from memtree.recall import BM25Retriever, RecallEngine, Snippet, fast_context, rerank_fuse, retrieve_parallel
from memtree.rl_math import RewardGroup, dapo_term, dynamic_sample_keep, normalize_rewards
from memtree.schema import init_tree, serialize_tree, tree_hash
from memtree.store import ReplayMismatch, VersionStore, diff, replay
from oracles import doc_branches, doc_leaves, random_op, random_op_source, random_ops, random_schema, ref_apply


class Criterion:
    def __init__(self, name: str) -> None:
        self.name = name
        self.start = time.perf_counter()
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        verdict = "PASS" if exc_type is None else "FAIL"
        note = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}"
        record_criterion(f"{verdict} {self.name} ({elapsed:.2f}s) {note}".rstrip())
        return False


def test_dsl_roundtrip():
    with Criterion("dsl-roundtrip") as c:
        rng = random.Random(2024)
        for _ in range(1000):
            ops = [random_op(rng) for _ in range(rng.randint(0, 10))]
            parsed, _ = parse_op_list(render_ops(ops))
            assert parsed == ops
            loose = [random_op_source(rng) for _ in range(rng.randint(0, 10))]
            y = "\n".join(line for line, _ in loose)
            assert render_ops(parse_op_list(y)[0]) == "\n".join(canon for _, canon in loose)
            assert all(normalize_op_line(line) == canon for line, canon in loose)
        assert time.perf_counter() - c.start < 5.0
        c.detail = "1000 lists each way, 0 failures"


def _gate_runs():
    """Run the gate and the reference interpreter side by side; count disagreements."""
    mismatches, violations, states = [], [], 0
    for seed in range(1000):
        rng = random.Random(seed)
        schema, doc = random_schema(rng)
        policy = rng.choice(["strict", "extend"])
        deletion = rng.choice(["clear", "marker"])
        override = rng.choice([None, None, 20])
        cfg = GateConfig(policy, deletion, "[DEL]", override, schema.max_depth)
        leaves, branches = doc_leaves(doc), doc_branches(doc)
        tree = init_tree(schema)
        state = {p.text: "" for p in schema.leaves}
        ext: set[str] = set()
        for _ in range(3):
            ops = random_ops(rng, doc, rng.randint(0, 25))
            tree, rep = apply_ops(tree, schema, ops, cfg)
            state, ext, rejected = ref_apply(
                state, ext, leaves, branches, ops,
                policy=policy, deletion=deletion, marker="[DEL]",
                default_budget=schema.default_budget, override=override, max_depth=schema.max_depth,
            )
            if (
                {p.text: v for p, v in tree.values.items()} != state
                or {p.text for p in tree.extensions} != ext
                or len(rep.rejected) != rejected
                or len(rep.applied) + len(rep.rejected) != sum(not isinstance(o, NoOp) for o in ops)
            ):
                mismatches.append(seed)
            for p, v in tree.values.items():
                cap = schema.budget_of(p) if p in schema.leaves else schema.default_budget
                if override is not None:
                    cap = min(cap, override)
                if len(v) > cap:
                    violations.append((seed, p.text))
            if policy == "strict" and set(tree.values) != set(schema.leaves):
                violations.append((seed, "leaf set changed"))
            states += 1
    return mismatches, violations, states


def test_gate_oracle_equivalence_and_closure():
    t0 = time.perf_counter()
    mismatches, violations, states = _gate_runs()
    elapsed = time.perf_counter() - t0
    with Criterion("gate-oracle-equivalence") as c:
        assert not mismatches, f"mismatching seeds {mismatches[:10]}"
        assert elapsed < 10.0, f"took {elapsed:.2f}s"
        c.detail = f"1000 sequences x 3 applies in {elapsed:.2f}s, 0 mismatches"
    with Criterion("budget-schema-closure") as c:
        assert not violations, f"violations {violations[:10]}"
        assert states == 3000
        c.detail = f"{states} intermediate states within budget, strict leaf sets unchanged"


def test_replay_determinism(tmp_path):
    with Criterion("replay-determinism") as c:
        flagged = 0
        for seed in range(100):
            store, _ = random_evolution(seed, tmp_path / f"s{seed}")
            assert tree_hash(replay(store)) == store.record(store.head_id).digest
            n = store.head_id
            if n < 1:
                continue
            rng = random.Random(seed)
            first = rng.randint(1, n)
            tamper_op_line(store, first)
            if first < n and rng.random() < 0.5:
                tamper_op_line(store, rng.randint(first + 1, n))
            with pytest.raises(ReplayMismatch) as exc:
                replay(VersionStore.open(store.root))
            assert exc.value.version_id == first
            flagged += 1
        assert time.perf_counter() - c.start < 10.0
        c.detail = f"100 evolutions replayed, {flagged} tampered logs flagged at the first corrupted version"


def test_chunker_partition():
    with Criterion("chunker-partition") as c:
        rng = random.Random(5)
        runs = 0
        for w in (1, 3, 5, 7, 10, 13, 15):
            for _ in range(100):
                turns = random_turns(rng, rng.randint(0, 80))
                chunks = chunk(turns, w)
                assert [t for ch in chunks for t in ch.turns] == turns
                assert all(1 <= len(ch.turns) <= w for ch in chunks)
                runs += 1
        c.detail = f"{runs} transcripts over 7 window sizes"


def test_rl_math():
    with Criterion("rl-math") as c:
        rng = random.Random(8)
        checked = 0
        while checked < 10_000:
            rewards = tuple(rng.uniform(-1, 1) for _ in range(8))
            if statistics.pstdev(rewards) <= 1e-6:
                continue
            out = normalize_rewards(RewardGroup(rewards))
            assert abs(statistics.fmean(out)) <= 1e-9
            assert abs(statistics.pstdev(out) - 1.0) <= 1e-9
            checked += 1
        assert dapo_term(2.0, 1) == 1.28
        assert dapo_term(0.5, -1) == -0.8
        assert not dynamic_sample_keep([True] * 8)
        assert not dynamic_sample_keep([False] * 8)
        assert dynamic_sample_keep([True] + [False] * 7)
        c.detail = "10000 groups of 8 normalized; clip values exact"


def test_context_compression(evolved_store):
    with Criterion("context-compression") as c:
        turns, _ = fixture_chunks()
        assert len(turns) >= 60
        full = len("\n".join(t.render() for t in turns))
        tree = evolved_store.head_tree()
        questions = [case.question for case in load_cases(CASES)]
        worst = max(len(fast_context(tree, q)) for q in questions)
        ratio = worst / full
        assert ratio <= 0.15
        c.detail = f"ratio {ratio:.3f} (fast context {worst} chars vs history {full} chars)"


def _engine(store, answerer):
    r = BM25Retriever()
    r.index((ch["chunk_id"], DialogueChunk.from_dict(ch).text) for ch in store.read_chunks())
    return RecallEngine(store.head_tree(), r, answerer)


def test_end_to_end_golden(evolved_store):
    with Criterion("end-to-end-golden") as c:
        store = evolved_store
        assert serialize_tree(store.head_tree(), "canonical") == (GOLDEN / "final_tree.json").read_text(encoding="utf-8")
        full = [list(r) for r in diff(store.tree_at(0), store.head_tree())]
        assert full == json.loads((GOLDEN / "diff_0_head.json").read_text(encoding="utf-8"))
        steps = {}
        for v in range(1, store.head_id + 1):
            rows = diff(store.tree_at(v - 1), store.tree_at(v))
            if rows:
                steps[str(v)] = [list(r) for r in rows]
        assert steps == json.loads((GOLDEN / "version_diffs.json").read_text(encoding="utf-8"))
        cases = load_cases(CASES)
        fixed = run_eval(cases, _engine(store, FixedAnswerClient("A")))
        assert fixed.to_dict() == json.loads((GOLDEN / "eval_report.json").read_text(encoding="utf-8"))
        assert fixed.to_dict() == run_eval(cases, _engine(store, FixedAnswerClient("A"))).to_dict()
        a_share = sum(case.answer == "A" for case in cases) / len(cases)
        assert fixed.overall == a_share
        oracle = run_eval(cases, _engine(store, OracleAnswerClient(cases)))
        assert oracle.overall == 1.0
        c.detail = f"golden tree and {len(steps)} version diffs match; oracle 1.0, fixed-A {fixed.overall} = A share {a_share}"


def test_recall_determinism():
    with Criterion("recall-determinism") as c:
        _, chunks = fixture_chunks()
        r = BM25Retriever()
        r.index((ch.chunk_id, ch.text) for ch in chunks)
        queries = ["dog walks in the rain", "moving to seattle for work", "allergies and diet", "rust side project", "garden"]
        seq = retrieve_parallel(r, queries, 4, workers=1)
        for _ in range(10):
            par = retrieve_parallel(r, queries, 4, workers=len(queries))
            assert json.dumps([s.__dict__ for s in par]) == json.dumps([s.__dict__ for s in seq])
        rng = random.Random(13)
        for _ in range(1000):
            pool = []
            for _ in range(rng.randint(0, 30)):
                n = rng.randint(1, 15)
                pool.append(Snippet(f"c-{n}", "x" * (80 * n), rng.uniform(0, 10), rng.randint(0, 3)))
            budget = rng.randint(100, 4000)
            fused = rerank_fuse("q", pool, rng.randint(1, 6), budget=budget)
            ids = [s.chunk_id for s in fused.snippets]
            assert len(ids) == len(set(ids)) and fused.total_chars <= budget
        c.detail = "parallel pool byte-equal to sequential; 1000 fused pools within budget, no duplicate ids"
