"""The line-based memory operation grammar.

One operation per line, in one of four forms::

    ADD(<path>, "<value>")
    UPDATE(<path>, "<value>")
    DELETE(<path>, None)
    NO_OP()

Values are double-quoted; ``\\"`` and ``\\\\`` are the only escapes. Any other
backslash is kept literally.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from memtree.schema import NodePath

HEADS = ("ADD", "UPDATE", "DELETE", "NO_OP")


@dataclass(frozen=True)
class Add:
    path: NodePath
    value: str


@dataclass(frozen=True)
class Update:
    path: NodePath
    value: str


@dataclass(frozen=True)
class Delete:
    path: NodePath


@dataclass(frozen=True)
class NoOp:
    pass


MemOp = Union[Add, Update, Delete, NoOp]


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class LineDiagnostic:
    """Outcome for one non-blank input line.

    ``reason`` is None for accepted operations; ``note`` records lossless
    normalizations such as a dropped DELETE value or an unwrapped fence.
    """

    line_no: int
    text: str
    op: MemOp | None = None
    reason: str | None = None
    note: str = ""

    @property
    def accepted(self) -> bool:
        return self.op is not None


# rejection reasons
MALFORMED_HEAD = "malformed-head"
MISSING_PAREN = "missing-parenthesis"
UNBALANCED_QUOTE = "unbalanced-quote"
BAD_PATH = "bad-path"
EMPTY_SEGMENT = "empty-path-segment"
MISSING_VALUE = "missing-value"
STRAY_TEXT = "stray-text"
RAW_NEWLINE = "raw-newline"
FENCE = "code-fence"

_HEAD_RE = re.compile(r"([A-Za-z_]+)\s*")
_SEGMENT_RE = re.compile(r'[^\s.,()"\\]+')
_FORBIDDEN_IN_VALUE = ("\n", "\r")
_ESCAPE_RE = re.compile(r'\\([\\"])')


def escape_value(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"')


def render_op(op: MemOp) -> str:
    if isinstance(op, NoOp):
        return "NO_OP()"
    if isinstance(op, Delete):
        return f"DELETE({op.path.text}, None)"
    if any(ch in op.value for ch in _FORBIDDEN_IN_VALUE):
        raise ValueError("operation values cannot contain line breaks")
    head = "ADD" if isinstance(op, Add) else "UPDATE"
    return f'{head}({op.path.text}, "{escape_value(op.value)}")'


def render_ops(ops: list[MemOp]) -> str:
    return "\n".join(render_op(op) for op in ops)


class _Cursor:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def eat(self, ch: str) -> bool:
        self.skip_ws()
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def rest(self) -> str:
        return self.text[self.pos :]


def _parse_path(cur: _Cursor) -> NodePath | Rejection:
    cur.skip_ws()
    segments: list[str] = []
    while True:
        m = _SEGMENT_RE.match(cur.text, cur.pos)
        if not m:
            if cur.peek() == "." or (segments and cur.text[cur.pos - 1] == "."):
                return Rejection(EMPTY_SEGMENT, "empty path segment")
            if not segments and cur.peek() in (",", ")", ""):
                return Rejection(EMPTY_SEGMENT, "empty path")
            return Rejection(BAD_PATH, f"unexpected {cur.peek()!r} in path")
        segments.append(m.group())
        cur.pos = m.end()
        if cur.peek() != ".":
            break
        cur.pos += 1
    if len(segments) < 2:
        return Rejection(BAD_PATH, "path needs at least two segments")
    return NodePath(tuple(segments))


def _parse_quoted(cur: _Cursor) -> str | Rejection:
    cur.skip_ws()
    if cur.peek() != '"':
        return Rejection(MISSING_VALUE, "expected a double-quoted value")
    cur.pos += 1
    out: list[str] = []
    text = cur.text
    while cur.pos < len(text):
        ch = text[cur.pos]
        if ch == "\\" and cur.pos + 1 < len(text) and text[cur.pos + 1] in '"\\':
            out.append(text[cur.pos + 1])
            cur.pos += 2
        elif ch == '"':
            cur.pos += 1
            return "".join(out)
        else:
            out.append(ch)
            cur.pos += 1
    return Rejection(UNBALANCED_QUOTE, "value has no closing quote")


def _recover_unescaped(body: str) -> str | None:
    """Model output sometimes leaves inner quotes unescaped: ``"he said "hi""``.

    When the argument still starts and ends with a quote, take everything
    between the outermost pair.
    """
    body = body.strip()
    if len(body) >= 2 and body[0] == '"' and body[-1] == '"':
        inner = body[1:-1]
        return _ESCAPE_RE.sub(r"\1", inner)
    return None


def _close(cur: _Cursor) -> Rejection | None:
    if not cur.eat(")"):
        if cur.peek() == "":
            return Rejection(MISSING_PAREN, "missing closing parenthesis")
        return Rejection(STRAY_TEXT, f"unexpected text {cur.rest()!r}")
    cur.skip_ws()
    if cur.rest():
        return Rejection(STRAY_TEXT, f"trailing text {cur.rest()!r}")
    return None


def _parse(line: str) -> tuple[MemOp | Rejection, str]:
    note = ""
    if "\n" in line or "\r" in line:
        return Rejection(RAW_NEWLINE, "operation spans more than one line"), note
    text = line.strip()
    if len(text) >= 2 and text.startswith("`") and text.endswith("`"):
        text = text.strip("`").strip()
        note = "unwrapped inline code"
    head_m = _HEAD_RE.match(text)
    if not head_m or head_m.group(1) not in HEADS:
        return Rejection(MALFORMED_HEAD, "line does not start with an operation name"), note
    head = head_m.group(1)
    cur = _Cursor(text)
    cur.pos = head_m.end()
    if not cur.eat("("):
        return Rejection(MISSING_PAREN, "expected '(' after operation name"), note

    if head == "NO_OP":
        rej = _close(cur)
        return (rej or NoOp()), note

    path = _parse_path(cur)
    if isinstance(path, Rejection):
        return path, note
    if not cur.eat(","):
        if cur.peek() == ")":
            return Rejection(MISSING_VALUE, f"{head} needs a second argument"), note
        if cur.peek() == "":
            return Rejection(MISSING_PAREN, "missing closing parenthesis"), note
        return Rejection(BAD_PATH, f"unexpected {cur.peek()!r} after path"), note

    if head == "DELETE":
        cur.skip_ws()
        if cur.text.startswith("None", cur.pos):
            cur.pos += 4
        else:
            value = _parse_quoted(cur)
            if isinstance(value, Rejection):
                return value, note
            note = _join(note, f"ignored DELETE value {value!r}")
        rej = _close(cur)
        return (rej or Delete(path)), note

    start = cur.pos
    value = _parse_quoted(cur)
    if not isinstance(value, Rejection):
        rej = _close(cur)
        if rej is None:
            return (Add if head == "ADD" else Update)(path, value), note
        value = rej
    if value.reason in (STRAY_TEXT, UNBALANCED_QUOTE) and text.endswith(")"):
        recovered = _recover_unescaped(text[start:-1])
        if recovered is not None:
            op = (Add if head == "ADD" else Update)(path, recovered)
            return op, _join(note, "recovered unescaped inner quotes")
    return value, note


def _join(a: str, b: str) -> str:
    return f"{a}; {b}" if a else b


def parse_op_line(line: str) -> MemOp | Rejection:
    """Parse a single operation line; malformed input yields a Rejection."""
    result, _ = _parse(line)
    return result


def normalize_op_line(line: str) -> str | None:
    """Canonical rendering of a line, or None if it does not parse."""
    result = parse_op_line(line)
    return None if isinstance(result, Rejection) else render_op(result)


def _is_fence(text: str) -> bool:
    return text.startswith("```")


def parse_op_list(text: str) -> tuple[list[MemOp], list[LineDiagnostic]]:
    """Parse model output into operations, never raising.

    Returns accepted ops in source order and one diagnostic per non-blank line.
    """
    if not isinstance(text, str):
        text = text.decode("utf-8", errors="replace") if isinstance(text, (bytes, bytearray)) else str(text)
    ops: list[MemOp] = []
    diags: list[LineDiagnostic] = []
    for no, raw in enumerate(text.split("\n"), start=1):
        line = raw[:-1] if raw.endswith("\r") else raw
        if not line.strip():
            continue
        if _is_fence(line.strip()):
            diags.append(LineDiagnostic(no, line, reason=FENCE))
            continue
        try:
            result, note = _parse(line)
        except Exception as exc:  # defensive: the list parser is total
            result, note = Rejection(MALFORMED_HEAD, f"internal parse error: {exc}"), ""
        if isinstance(result, Rejection):
            diags.append(LineDiagnostic(no, line, reason=result.reason, note=result.detail))
        else:
            ops.append(result)
            diags.append(LineDiagnostic(no, line, op=result, note=note))
    return ops, diags
