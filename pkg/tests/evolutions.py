"""Random evolutions driven by a scripted listener, for replay and store tests."""

from __future__ import annotations

import json
import random
from pathlib import Path

from memtree.gate import GateConfig
from memtree.ingest import DialogueTurn, chunk, evolve
from memtree.listener import ScriptedClient
from memtree.ops import render_op
from memtree.store import LOG_NAME, VersionStore
from oracles import random_ops, random_schema

JUNK = ["Sure! Here are the operations:", "```", "ADD(broken", "UPDATE(a.b)", ""]


def random_turns(rng: random.Random, n: int) -> list[DialogueTurn]:
    words = ["tea", "runs", "likes", "cats", "Lisbon", "quiet", "jazz", "works", "nights", "garden"]
    return [
        DialogueTurn("user" if i % 2 == 0 else "assistant", " ".join(rng.choice(words) for _ in range(rng.randint(1, 12))) + f" #{i}", "s1", i)
        for i in range(n)
    ]


def random_evolution(seed: int, root: Path) -> tuple[VersionStore, list]:
    """Build a store from a random schema, random transcript and random scripted ops."""
    rng = random.Random(seed)
    schema, doc = random_schema(rng, n_leaves=rng.randint(5, 20))
    store = VersionStore.create(root, schema, json.dumps(doc))
    chunks = chunk(random_turns(rng, rng.randint(1, 30)), rng.randint(1, 5))
    script = {}
    for ch in chunks:
        lines = [render_op(op) for op in random_ops(rng, doc, rng.randint(0, 8))]
        if rng.random() < 0.3:
            lines.insert(rng.randint(0, len(lines)), rng.choice(JUNK))
        script[ch.fingerprint] = "\n".join(lines)
    cfg = GateConfig(
        schema_policy=rng.choice(["strict", "extend"]),
        deletion_mode=rng.choice(["clear", "marker"]),
        deletion_marker="[x]",
        budget_override=rng.choice([None, 25]),
    )
    evolve(store, schema, ScriptedClient(script, default=None), chunks, cfg)
    return store, chunks


def tamper_op_line(store: VersionStore, version: int) -> None:
    """Rewrite the last op line of ``version`` in the log so that its result must change."""
    log = store.root / LOG_NAME
    lines = log.read_text(encoding="utf-8").split("\n")
    rec = json.loads(lines[version])
    target = next(iter(store.schema.leaves)).text
    replacement = f'UPDATE({target}, "tampered at {version}")'
    if rec["ops"]:
        rec["ops"][-1] = replacement
    else:
        rec["ops"].append(replacement)
    lines[version] = json.dumps(rec, ensure_ascii=False, separators=(",", ":"))
    log.write_text("\n".join(lines), encoding="utf-8")
