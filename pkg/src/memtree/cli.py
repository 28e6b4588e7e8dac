"""Command-line entry point: ``memtree <command>``.

Exit codes: 0 ok, 2 usage, 3 config, 4 store, 5 transport, 6 verification.
Failures print a single ``error[<class>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence, TextIO

from memtree.config import ConfigError, EngineConfig, load_config
from memtree.evaluation import CaseError, FixedAnswerClient, OracleAnswerClient, load_cases, run_eval
from memtree.ingest import DialogueChunk, DialogueTurn, HistoryError, TurnBuffer, chunk, evolve, normalize_history
from memtree.listener import EchoClient, HTTPChatClient, ListenerTransportError, ScriptedClient, estimate_tokens
from memtree.recall import AGENTIC, FAST, BM25Retriever, RecallEngine
from memtree.schema import SchemaError, TreeError, default_schema_text, load_schema, serialize_tree
from memtree.store import ReplayMismatch, StoreError, VersionStore, diff, replay

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_STORE = 4
EXIT_TRANSPORT = 5
EXIT_VERIFY = 6


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str) -> None:
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise CLIError(EXIT_USAGE, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memtree", description="Schema-bounded long-term user memory.")
    p.add_argument("--store", help="store directory (default: config store_path)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--schema", help="schema document used by init")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--listener-script", help="offline listener: JSON map of chunk fingerprint -> ops text")
    p.add_argument(
        "--answerer",
        default="http",
        help="answer client: http (default), echo, fixed:<letter>, or oracle (eval only)",
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("init", help="create a store holding the empty tree")

    ing = sub.add_parser("ingest", help="fold a history file into the tree")
    ing.add_argument("history")
    ing.add_argument("-w", type=int, help="turns per chunk")

    show = sub.add_parser("show", help="print a tree version")
    show.add_argument("--version", type=int)
    show.add_argument("--json", action="store_true")

    d = sub.add_parser("diff", help="leaf changes between two versions")
    d.add_argument("a", type=int)
    d.add_argument("b", type=int)
    d.add_argument("--json", action="store_true")

    ask = sub.add_parser("ask", help="answer a question from memory")
    ask.add_argument("question")
    ask.add_argument("--mode", choices=("auto", FAST, AGENTIC), default="auto")

    chat = sub.add_parser("chat", help="interactive session that keeps memory up to date")
    chat.add_argument("--mode", choices=("auto", FAST, AGENTIC), default="auto")

    ev = sub.add_parser("eval", help="score a multiple-choice case file")
    ev.add_argument("cases")
    ev.add_argument("--mode", choices=("auto", FAST, AGENTIC), default="auto")
    ev.add_argument("--json", action="store_true")
    ev.add_argument("--csv", help="also write per-case rows to this CSV file")

    rp = sub.add_parser("replay", help="rebuild a version from the log and check digests")
    rp.add_argument("--verify", action="store_true")
    rp.add_argument("--from", dest="start", type=int, default=0)
    rp.add_argument("--to", dest="end", type=int)
    return p


def _flags(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise CLIError(EXIT_USAGE, "usage", f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value
    return out


def _config(args: argparse.Namespace, env) -> EngineConfig:
    flags = _flags(args.set)
    if args.store:
        flags["store_path"] = args.store
    if args.schema:
        flags["schema_path"] = args.schema
    if getattr(args, "w", None) is not None:
        flags["chunk_w"] = str(args.w)
    return load_config(args.config, env, flags)


def _open_store(cfg: EngineConfig) -> VersionStore:
    return VersionStore.open(cfg.store_path)


def _listener(args: argparse.Namespace, cfg: EngineConfig):
    if args.listener_script:
        return ScriptedClient.from_file(args.listener_script)
    if not cfg.listener.endpoint:
        raise CLIError(EXIT_CONFIG, "config", "no listener configured: set MEMTREE_LLM_ENDPOINT or pass --listener-script")
    return HTTPChatClient(cfg.listener)


def _answerer(spec: str, cfg: EngineConfig, cases=None):
    if spec == "echo":
        return EchoClient()
    if spec.startswith("fixed:"):
        letter = spec.split(":", 1)[1].strip()
        if not letter:
            raise CLIError(EXIT_USAGE, "usage", "fixed answerer needs a letter, e.g. fixed:A")
        return FixedAnswerClient(letter)
    if spec == "oracle":
        if cases is None:
            raise CLIError(EXIT_USAGE, "usage", "the oracle answerer only works with eval")
        return OracleAnswerClient(cases)
    if spec == "http":
        if not cfg.listener.endpoint:
            raise CLIError(EXIT_CONFIG, "config", "no answer endpoint configured: set MEMTREE_LLM_ENDPOINT or pass --answerer echo")
        return HTTPChatClient(cfg.listener)
    raise CLIError(EXIT_USAGE, "usage", f"unknown answerer {spec!r}")


def _engine(store: VersionStore, cfg: EngineConfig, answerer) -> RecallEngine:
    retriever = BM25Retriever()
    retriever.index((c["chunk_id"], DialogueChunk.from_dict(c).text) for c in store.read_chunks())
    return RecallEngine(store.head_tree(), retriever, answerer, cfg.recall)


def cmd_init(args, cfg: EngineConfig, out: TextIO) -> int:
    text = Path(cfg.schema_path).read_text(encoding="utf-8") if cfg.schema_path else default_schema_text()
    schema = load_schema(text)
    store = VersionStore.create(cfg.store_path, schema, text)
    rec = store.record(0)
    out.write(f"initialized {cfg.store_path}: version 0, {len(schema.leaves)} leaves, digest {rec.digest[:12]}\n")
    return EXIT_OK


def cmd_ingest(args, cfg: EngineConfig, out: TextIO) -> int:
    try:
        source = Path(args.history).read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError(EXIT_USAGE, "usage", f"cannot read {args.history}: {exc}") from exc
    turns = normalize_history(source)
    listener = _listener(args, cfg)
    store = _open_store(cfg)
    chunks = chunk(turns, cfg.chunk_w, prefix=Path(args.history).stem)
    result = evolve(store, store.schema, listener, chunks, cfg.gate)
    out.write(
        f"head={result.head_id} committed={len(result.committed)} skipped={len(result.skipped)} "
        f"applied={result.applied} rejected={result.rejected} truncated={result.truncated} "
        f"diagnostics={result.diagnostics}\n"
    )
    return EXIT_OK


def cmd_show(args, cfg: EngineConfig, out: TextIO) -> int:
    store = _open_store(cfg)
    vid = store.head_id if args.version is None else args.version
    tree = store.tree_at(vid)
    if args.json:
        out.write(json.dumps({"version": vid, "leaves": tree.non_empty()}, ensure_ascii=False, indent=2) + "\n")
    else:
        out.write(f"# version {vid}\n{serialize_tree(tree, 'prompt_compact')}\n")
    return EXIT_OK


def cmd_diff(args, cfg: EngineConfig, out: TextIO) -> int:
    store = _open_store(cfg)
    changes = diff(store.tree_at(args.a), store.tree_at(args.b))
    if args.json:
        rows = [{"path": p, "before": b, "after": a} for p, b, a in changes]
        out.write(json.dumps(rows, ensure_ascii=False, indent=2) + "\n")
        return EXIT_OK
    if not changes:
        out.write("no changes\n")
    for path, before, after in changes:
        out.write(f"{path}\n  - {json.dumps(before, ensure_ascii=False)}\n  + {json.dumps(after, ensure_ascii=False)}\n")
    return EXIT_OK


def cmd_ask(args, cfg: EngineConfig, out: TextIO) -> int:
    answerer = _answerer(args.answerer, cfg)
    engine = _engine(_open_store(cfg), cfg, answerer)
    result = engine.ask(args.question, args.mode)
    out.write(result.answer.rstrip("\n") + "\n")
    out.write(f"mode={result.decision.mode} reason={result.decision.reason}\n")
    fused = result.fused.total_chars if result.fused else 0
    out.write(
        f"context_chars={len(result.context)} tokens_est={estimate_tokens(result.context)} retrieved_chars={fused}\n"
    )
    return EXIT_OK


def cmd_chat(args, cfg: EngineConfig, out: TextIO, inp: TextIO) -> int:
    """REPL. Each user line is answered from memory; every ``w`` exchanges
    (or ``:flush``) the buffered turns are folded into the tree. ``:quit`` exits."""
    listener = _listener(args, cfg)
    answerer = _answerer(args.answerer, cfg)
    store = _open_store(cfg)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    buffer = TurnBuffer(w=cfg.chunk_w, prefix=f"chat-{stamp}")
    pending: list[DialogueTurn] = []
    engine = _engine(store, cfg, answerer)

    def fold(flush: bool) -> None:
        nonlocal engine
        chunks: list[DialogueChunk] = []
        for turn in pending:
            chunks += buffer.push(turn)
        pending.clear()
        if flush:
            chunks += buffer.flush()
        if chunks:
            res = evolve(store, store.schema, listener, chunks, cfg.gate)
            out.write(f"[memory] head={res.head_id} applied={res.applied} rejected={res.rejected}\n")
            engine = _engine(store, cfg, answerer)

    exchanges = 0
    for line in inp:
        text = line.strip()
        if not text:
            continue
        if text == ":quit":
            break
        if text == ":flush":
            fold(True)
            exchanges = 0
            continue
        result = engine.ask(text, args.mode)
        out.write(f"{result.answer.rstrip()}\n[{result.decision.mode}] {result.decision.reason}\n")
        pending += [DialogueTurn("user", text), DialogueTurn("assistant", result.answer.strip() or "(no answer)")]
        exchanges += 1
        if exchanges >= cfg.chunk_w:
            fold(True)
            exchanges = 0
    fold(True)
    return EXIT_OK


def cmd_eval(args, cfg: EngineConfig, out: TextIO) -> int:
    cases = load_cases(args.cases)
    answerer = _answerer(args.answerer, cfg, cases)
    engine = _engine(_open_store(cfg), cfg, answerer)
    report = run_eval(cases, engine, args.mode)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.json:
        out.write(json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n")
    else:
        out.write(report.to_table() + "\n")
    return EXIT_OK


def cmd_replay(args, cfg: EngineConfig, out: TextIO) -> int:
    store = _open_store(cfg)
    end = store.head_id if args.end is None else args.end
    tree = replay(store, args.start, end)
    if args.verify:
        if serialize_tree(tree, "canonical") != store.record(end).snapshot:
            raise CLIError(EXIT_VERIFY, "verification", f"replayed tree differs from stored snapshot at {end}")
        out.write(f"verified {end - args.start} versions ({args.start}..{end}), digest {store.record(end).digest[:12]}\n")
    else:
        out.write(serialize_tree(tree, "prompt_compact") + "\n")
    return EXIT_OK


COMMANDS = {
    "init": cmd_init,
    "ingest": cmd_ingest,
    "show": cmd_show,
    "diff": cmd_diff,
    "ask": cmd_ask,
    "eval": cmd_eval,
    "replay": cmd_replay,
}


def run_cli(
    argv: Sequence[str] | None = None,
    out: TextIO | None = None,
    err: TextIO | None = None,
    inp: TextIO | None = None,
    env=None,
) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    inp = inp or sys.stdin
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args, env)
        if args.command == "chat":
            return cmd_chat(args, cfg, out, inp)
        return COMMANDS[args.command](args, cfg, out)
    except CLIError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (ConfigError, SchemaError) as exc:
        code, kind, msg = EXIT_CONFIG, "config", str(exc)
    except (HistoryError, CaseError) as exc:
        code, kind, msg = EXIT_USAGE, "input", str(exc)
    except ReplayMismatch as exc:
        code, kind, msg = EXIT_VERIFY, "verification", str(exc)
    except (StoreError, TreeError, OSError) as exc:
        code, kind, msg = EXIT_STORE, "store", str(exc)
    except ListenerTransportError as exc:
        code, kind, msg = EXIT_TRANSPORT, "transport", str(exc)
    err.write(f"error[{kind}]: {msg}\n")
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
