"""Validate operations against the schema and apply them to produce the next tree.

The gate never merges or rewrites values beyond deterministic truncation to
the leaf budget. Later operations on a path win purely by order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from memtree.ops import Add, Delete, MemOp, NoOp, Update
from memtree.schema import DEFAULT_MAX_DEPTH, NodePath, PersonaTree, Schema, resolve_path

STRICT = "strict"
EXTEND = "extend"
CLEAR = "clear"
MARKER = "marker"

PATH_NOT_WRITABLE = "path-not-writable"
PATH_IS_BRANCH = "path-is-branch"
EXTENSION_DISALLOWED = "extension-disallowed"
DEPTH_EXCEEDED = "depth-exceeded"

ELLIPSIS = "…"


class GateConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GateConfig:
    schema_policy: str = STRICT
    deletion_mode: str = CLEAR
    deletion_marker: str = "[DELETED]"
    budget_override: int | None = None
    max_depth: int = DEFAULT_MAX_DEPTH

    def __post_init__(self) -> None:
        if self.schema_policy not in (STRICT, EXTEND):
            raise GateConfigError(f"schema_policy must be {STRICT!r} or {EXTEND!r}")
        if self.deletion_mode not in (CLEAR, MARKER):
            raise GateConfigError(f"deletion_mode must be {CLEAR!r} or {MARKER!r}")
        if self.budget_override is not None and self.budget_override <= 0:
            raise GateConfigError("budget_override must be positive")
        if self.max_depth < 2:
            raise GateConfigError("max_depth must be at least 2")

    @property
    def deleted_value(self) -> str:
        return self.deletion_marker if self.deletion_mode == MARKER else ""

    def budget_for(self, schema: Schema, path: NodePath) -> int:
        """Declared budget, capped by the override; extension leaves use the
        override or the schema default."""
        base = schema.budget_of(path)
        return base if self.budget_override is None else min(base, self.budget_override)

    def check_against(self, schema: Schema) -> None:
        if self.deletion_mode == MARKER:
            smallest = min(self.budget_for(schema, p) for p in schema.leaves)
            smallest = min(smallest, self.budget_for(schema, NodePath(("_", "_"))))
            if len(self.deletion_marker) > smallest:
                raise GateConfigError("deletion marker does not fit every leaf budget")

    def to_dict(self) -> dict:
        return {
            "schema_policy": self.schema_policy,
            "deletion_mode": self.deletion_mode,
            "deletion_marker": self.deletion_marker,
            "budget_override": self.budget_override,
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GateConfig":
        return cls(**data)


@dataclass
class ApplyReport:
    applied: list[tuple[MemOp, str]] = field(default_factory=list)
    rejected: list[tuple[MemOp, str]] = field(default_factory=list)
    truncated: list[NodePath] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "applied": len(self.applied),
            "rejected": len(self.rejected),
            "truncated": len(self.truncated),
            "rejections": [[_op_path(op), reason] for op, reason in self.rejected],
        }


def _op_path(op: MemOp) -> str:
    return op.path.text if not isinstance(op, NoOp) else ""


def validate_op(tree: PersonaTree, schema: Schema, op: MemOp, cfg: GateConfig) -> str | None:
    """Return None if the op may be executed, else a rejection reason."""
    if isinstance(op, NoOp):
        return None
    res = resolve_path(tree, op.path)
    if res.kind == "leaf":
        return None
    if res.kind == "branch":
        return PATH_IS_BRANCH
    if cfg.schema_policy == STRICT:
        return PATH_NOT_WRITABLE
    if res.kind == "missing_branch":
        return PATH_NOT_WRITABLE
    if not isinstance(op, Add):
        return EXTENSION_DISALLOWED
    if len(op.path.segments) > cfg.max_depth:
        return DEPTH_EXCEEDED
    return None


def enforce_budget(value: str, budget: int) -> str:
    """Cut an overlong value at a word boundary and mark it with an ellipsis."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    if len(value) <= budget:
        return value
    window = value[:budget]
    cut = max((i for i, ch in enumerate(window) if ch.isspace()), default=-1)
    head = value[:cut].rstrip() if cut > 0 else ""
    if not head:
        head = value[: budget - 1]
    return head + ELLIPSIS


def apply_ops(
    tree: PersonaTree, schema: Schema, ops: list[MemOp], cfg: GateConfig
) -> tuple[PersonaTree, ApplyReport]:
    report = ApplyReport()
    values: dict[NodePath, str] = {}
    new_ext: set[NodePath] = set()
    current = tree
    for op in ops:
        if isinstance(op, NoOp):
            continue
        reason = validate_op(current, schema, op, cfg)
        if reason is not None:
            report.rejected.append((op, reason))
            continue
        if isinstance(op, Delete):
            text = cfg.deleted_value
        else:
            budget = cfg.budget_for(schema, op.path)
            text = enforce_budget(op.value, budget)
            if text != op.value:
                report.truncated.append(op.path)
        values[op.path] = text
        if op.path not in schema.leaves and op.path not in current.extensions:
            new_ext.add(op.path)
            current = current.with_values({op.path: text}, frozenset({op.path}))
        report.applied.append((op, text))
    if not values:
        return tree, report
    return tree.with_values(values, frozenset(new_ext)), report
