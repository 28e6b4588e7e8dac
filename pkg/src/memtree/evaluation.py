"""Multiple-choice evaluation over an evolved tree, with context-length accounting."""

from __future__ import annotations

import csv
import io
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from memtree.listener import ListenerTransportError
from memtree.recall import RecallEngine, answer, fast_context

SKILLS = (
    "Recall-Facts",
    "Pref-Rec",
    "New-Ideas",
    "Recall-Reason",
    "Pref-Evol",
    "Gen-New",
    "Recall-User",
)
OPTION_LABELS = ("A", "B", "C", "D")

_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])([A-D])(?![A-Za-z0-9])")


class CaseError(ValueError):
    def __init__(self, line_no: int, message: str) -> None:
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    question: str
    options: Mapping[str, str]
    answer: str
    skill: str
    history: str | None = None


def load_cases(path: str | Path) -> list[EvalCase]:
    """Read line-delimited case records ``{id, history, question, options, answer, skill}``."""
    cases: list[EvalCase] = []
    seen: set[str] = set()
    text = Path(path).read_text(encoding="utf-8")
    for no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaseError(no, f"malformed case: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise CaseError(no, "case must be an object")
        missing = [k for k in ("id", "question", "options", "answer", "skill") if k not in rec]
        if missing:
            raise CaseError(no, f"missing fields {missing}")
        options = rec["options"]
        if not isinstance(options, dict) or not options or not set(options) <= set(OPTION_LABELS):
            raise CaseError(no, f"options must be labeled with {'/'.join(OPTION_LABELS)}")
        if rec["answer"] not in options:
            raise CaseError(no, f"answer key {rec['answer']!r} is not one of the options")
        if rec["skill"] not in SKILLS:
            raise CaseError(no, f"unknown skill tag {rec['skill']!r}")
        cid = str(rec["id"])
        if cid in seen:
            raise CaseError(no, f"duplicate case id {cid!r}")
        seen.add(cid)
        cases.append(EvalCase(cid, rec["question"], dict(options), rec["answer"], rec["skill"], rec.get("history")))
    return cases


def parse_option_letter(text: str) -> str | None:
    """First standalone option letter in a completion."""
    m = _LETTER_RE.search(text)
    return m.group(1) if m else None


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    skill: str
    route: str
    predicted: str | None
    answer: str
    correct: bool
    context_chars: int
    memory_chars: int
    tag: str = ""


@dataclass
class EvalReport:
    records: list[CaseRecord] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def correct(self) -> int:
        return sum(r.correct for r in self.records)

    @property
    def overall(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def per_skill(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for skill in SKILLS:
            rows = [r for r in self.records if r.skill == skill]
            if rows:
                out[skill] = (sum(r.correct for r in rows), len(rows))
        return out

    @property
    def mean_context_chars(self) -> float:
        return sum(r.context_chars for r in self.records) / self.total if self.total else 0.0

    @property
    def mean_memory_chars(self) -> float:
        return sum(r.memory_chars for r in self.records) / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "correct": self.correct,
            "total": self.total,
            "per_skill": {k: {"correct": c, "total": n, "accuracy": c / n} for k, (c, n) in self.per_skill().items()},
            "mean_context_chars": self.mean_context_chars,
            "mean_context_tokens_est": self.mean_context_chars / 4,
            "mean_memory_chars": self.mean_memory_chars,
            "cases": [asdict(r) for r in self.records],
        }

    def to_table(self) -> str:
        lines = [f"{'skill':<14} {'correct':>7} {'total':>5} {'accuracy':>8}"]
        for skill, (c, n) in self.per_skill().items():
            lines.append(f"{skill:<14} {c:>7} {n:>5} {c / n:>8.4f}")
        lines.append(f"{'Overall':<14} {self.correct:>7} {self.total:>5} {self.overall:>8.4f}")
        lines.append(
            f"mean context: {self.mean_context_chars:.1f} chars (~{self.mean_context_chars / 4:.1f} tokens); "
            f"mean memory: {self.mean_memory_chars:.1f} chars"
        )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(CaseRecord.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow(asdict(r))
        return buf.getvalue()


def _run_case(engine: RecallEngine, case: EvalCase, mode: str) -> CaseRecord:
    decision, context, _, fused = engine.context_for(case.question, mode)
    memory_chars = len(fast_context(engine.tree, case.question))
    try:
        reply = answer(engine.answerer, case.question, engine.tree, fused, case.options)
    except ListenerTransportError as exc:
        return CaseRecord(case.case_id, case.skill, decision.mode, None, case.answer, False, len(context), memory_chars, f"transport: {exc}")
    letter = parse_option_letter(reply)
    tag = "" if letter else "parse"
    return CaseRecord(
        case.case_id, case.skill, decision.mode, letter, case.answer, letter == case.answer, len(context), memory_chars, tag
    )


def run_eval(cases: list[EvalCase], engine: RecallEngine, mode: str = "auto", workers: int = 1) -> EvalReport:
    """Score every case; transport failures count as wrong and never abort."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda c: _run_case(engine, c, mode), cases))
    else:
        records = [_run_case(engine, c, mode) for c in cases]
    return EvalReport(records)


class FixedAnswerClient:
    """Always answers the same option letter."""

    def __init__(self, letter: str = "A") -> None:
        self.letter = letter

    def complete(self, prompt: str, *, key: str | None = None) -> str:
        return self.letter


class OracleAnswerClient:
    """Answers each question with its key; the accuracy ceiling of the harness."""

    def __init__(self, cases: list[EvalCase]) -> None:
        self.keys = {c.question: c.answer for c in cases}

    def complete(self, prompt: str, *, key: str | None = None) -> str:
        if key not in self.keys:
            raise ListenerTransportError(f"oracle has no key for {key!r}", retryable=False)
        return f"({self.keys[key]})"

