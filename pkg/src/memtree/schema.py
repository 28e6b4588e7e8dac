"""Schema and PersonaTree types: the writable profile space and its instances."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping, Union

DEFAULT_BUDGET = 500
DEFAULT_MAX_DEPTH = 6
MIN_DEPTH = 2

_LEAF_KEYS = {"$budget", "$default"}


class SchemaError(ValueError):
    """Raised when a schema document is malformed or violates an invariant."""

    def __init__(self, message: str, path: str = "") -> None:
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class TreeError(ValueError):
    pass


def _check_name(name: str, where: str) -> None:
    if not isinstance(name, str) or not name:
        raise SchemaError("node names must be non-empty strings", where)
    if "." in name:
        raise SchemaError(f"node name {name!r} contains a period", where)
    if name.startswith("$"):
        raise SchemaError(f"node name {name!r} may not start with '$'", where)
    if any(ch.isspace() for ch in name) or any(ch in name for ch in ',()"\\'):
        raise SchemaError(f"node name {name!r} contains a reserved character", where)


@dataclass(frozen=True)
class NodePath:
    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.segments) < MIN_DEPTH:
            raise ValueError(f"a node path needs at least {MIN_DEPTH} segments: {self.text!r}")
        if any(not s or "." in s for s in self.segments):
            raise ValueError(f"invalid path segment in {self.text!r}")

    @classmethod
    def parse(cls, text: str) -> "NodePath":
        return cls(tuple(text.split(".")))

    @property
    def text(self) -> str:
        return ".".join(self.segments)

    @property
    def parent(self) -> tuple[str, ...]:
        return self.segments[:-1]

    @property
    def name(self) -> str:
        return self.segments[-1]

    def __str__(self) -> str:
        return self.text

    def __lt__(self, other: "NodePath") -> bool:
        return self.segments < other.segments


@dataclass(frozen=True)
class LeafSpec:
    budget: int = DEFAULT_BUDGET
    default: str = ""


@dataclass(frozen=True)
class Branch:
    children: Mapping[str, Union["Branch", LeafSpec]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Branch):
            return NotImplemented
        return list(self.children.items()) == list(other.children.items())

    def __hash__(self) -> int:
        return hash(tuple(self.children.items()))


Node = Union[Branch, LeafSpec]


@dataclass(frozen=True, eq=False)
class Schema:
    """A validated hierarchy of branches ending in budgeted text leaves.

    Leaves are kept in declaration order, which is also the canonical
    serialization order.
    """

    root: Branch
    max_depth: int = DEFAULT_MAX_DEPTH
    default_budget: int = DEFAULT_BUDGET
    leaves: Mapping[NodePath, LeafSpec] = field(init=False, repr=False)
    branches: frozenset[tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        leaves: dict[NodePath, LeafSpec] = {}
        branches: set[tuple[str, ...]] = {()}
        _collect(self.root, (), leaves, branches, self.max_depth)
        if not leaves:
            raise SchemaError("schema declares no leaves")
        object.__setattr__(self, "leaves", MappingProxyType(leaves))
        object.__setattr__(self, "branches", frozenset(branches))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Schema):
            return NotImplemented
        return (self.root, self.max_depth, self.default_budget) == (
            other.root,
            other.max_depth,
            other.default_budget,
        )

    def __hash__(self) -> int:
        return hash((self.root, self.max_depth, self.default_budget))

    @property
    def trunks(self) -> list[str]:
        return list(self.root.children)

    def budget_of(self, path: NodePath) -> int:
        spec = self.leaves.get(path)
        return spec.budget if spec else self.default_budget

    def node_at(self, segments: tuple[str, ...]) -> Node | None:
        node: Node = self.root
        for seg in segments:
            if not isinstance(node, Branch) or seg not in node.children:
                return None
            node = node.children[seg]
        return node

    def total_budget(self) -> int:
        return sum(spec.budget for spec in self.leaves.values())

    def to_document(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "default_budget": self.default_budget,
            "tree": _branch_doc(self.root, self.default_budget),
        }


def _collect(
    branch: Branch,
    prefix: tuple[str, ...],
    leaves: dict[NodePath, LeafSpec],
    branches: set[tuple[str, ...]],
    max_depth: int,
) -> None:
    for name, child in branch.children.items():
        path = prefix + (name,)
        where = ".".join(path)
        _check_name(name, where)
        if isinstance(child, Branch):
            if len(path) >= max_depth:
                raise SchemaError(f"branch leaves no room for a leaf within max depth {max_depth}", where)
            if not child.children:
                raise SchemaError("branch has no children", where)
            branches.add(path)
            _collect(child, path, leaves, branches, max_depth)
        else:
            if len(path) < MIN_DEPTH:
                raise SchemaError(f"leaf depth {len(path)} is below {MIN_DEPTH}", where)
            if len(path) > max_depth:
                raise SchemaError(f"leaf depth {len(path)} exceeds max depth {max_depth}", where)
            if child.budget <= 0:
                raise SchemaError("leaf budget must be positive", where)
            if len(child.default) > child.budget:
                raise SchemaError("default text exceeds leaf budget", where)
            leaves[NodePath(path)] = child


def _branch_doc(branch: Branch, default_budget: int) -> dict:
    out: dict = {}
    for name, child in branch.children.items():
        if isinstance(child, Branch):
            out[name] = _branch_doc(child, default_budget)
        elif child.budget == default_budget:
            out[name] = child.default
        else:
            out[name] = {"$budget": child.budget, "$default": child.default}
    return out


def _build_branch(doc: object, prefix: tuple[str, ...], default_budget: int) -> Branch:
    where = ".".join(prefix) or "<root>"
    if not isinstance(doc, _Pairs):
        raise SchemaError("branch must be an object", where)
    children: dict[str, Node] = {}
    for name, value in doc:
        path = prefix + (name,)
        if name in children:
            raise SchemaError(f"duplicate sibling name {name!r}", ".".join(path))
        if isinstance(value, _Pairs):
            value = _as_dict(value) if value and {k for k, _ in value} <= _LEAF_KEYS else value
        if isinstance(value, str):
            children[name] = LeafSpec(default_budget, value)
        elif value is None:
            children[name] = LeafSpec(default_budget, "")
        elif isinstance(value, dict) and value and set(value) <= _LEAF_KEYS:
            budget = value.get("$budget", default_budget)
            default = value.get("$default", "")
            if not isinstance(budget, int) or isinstance(budget, bool):
                raise SchemaError("$budget must be an integer", ".".join(path))
            if not isinstance(default, str):
                raise SchemaError("$default must be a string", ".".join(path))
            children[name] = LeafSpec(budget, default)
        elif isinstance(value, _Pairs):
            if any(k.startswith("$") for k, _ in value):
                raise SchemaError("unknown '$' key in leaf declaration", ".".join(path))
            children[name] = _build_branch(value, path, default_budget)
        else:
            raise SchemaError(f"unsupported node value of type {type(value).__name__}", ".".join(path))
    return Branch(MappingProxyType(children))


def load_schema(text: str) -> Schema:
    """Parse and validate a schema document.

    The document is JSON. Either a bare nested object, or an object with a
    ``tree`` key plus optional ``max_depth`` and ``default_budget``. A leaf is
    a string (its default text), ``null``, or an object holding ``$budget``
    and/or ``$default``; any other object is a branch.
    """
    try:
        doc = json.loads(text, object_pairs_hook=_Pairs)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"parse failure at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, _Pairs):
        raise SchemaError("schema document must be an object")
    top = dict(doc)
    if isinstance(top.get("tree"), _Pairs) and set(top) <= {"tree", "max_depth", "default_budget"}:
        max_depth = top.get("max_depth", DEFAULT_MAX_DEPTH)
        default_budget = top.get("default_budget", DEFAULT_BUDGET)
        tree_doc = top["tree"]
    else:
        max_depth, default_budget, tree_doc = DEFAULT_MAX_DEPTH, DEFAULT_BUDGET, doc
    for key, value in (("max_depth", max_depth), ("default_budget", default_budget)):
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            raise SchemaError(f"{key} must be a positive integer")
    if max_depth < MIN_DEPTH:
        raise SchemaError(f"max_depth must be at least {MIN_DEPTH}")
    root = _build_branch(tree_doc, (), default_budget)
    return Schema(root, max_depth=max_depth, default_budget=default_budget)


class _Pairs(list):
    """Key/value pairs of a JSON object, kept as-is so duplicates survive decoding."""


def _as_dict(value: object) -> object:
    if isinstance(value, _Pairs):
        return {k: _as_dict(v) for k, v in value}
    return value


def default_schema_text() -> str:
    return resources.files("memtree.data").joinpath("default_schema.json").read_text(encoding="utf-8")


def default_schema() -> Schema:
    return load_schema(default_schema_text())


def load_schema_file(path: str | Path | None) -> Schema:
    if path is None:
        return default_schema()
    return load_schema(Path(path).read_text(encoding="utf-8"))


# -- trees -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PersonaTree:
    """An immutable assignment of text to every leaf of a schema.

    ``extensions`` lists leaves created under the extend policy; they are not
    declared by the schema and use ``extension_budget``.
    """

    schema: Schema
    values: Mapping[NodePath, str]
    extensions: frozenset[NodePath] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", MappingProxyType(dict(self.values)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PersonaTree):
            return NotImplemented
        return (
            self.schema == other.schema
            and dict(self.values) == dict(other.values)
            and self.extensions == other.extensions
        )

    def __hash__(self) -> int:
        return hash(tree_hash(self))

    def get(self, path: NodePath | str) -> str | None:
        if isinstance(path, str):
            path = NodePath.parse(path)
        return self.values.get(path)

    def leaf_paths(self) -> list[NodePath]:
        """Leaves in canonical order: declared ones first, then extensions."""
        return list(_ordered(self))

    def non_empty(self) -> dict[str, str]:
        return {p.text: self.values[p] for p in _ordered(self) if self.values[p]}

    def budget_of(self, path: NodePath) -> int:
        return self.schema.budget_of(path)

    def with_values(self, updates: Mapping[NodePath, str], new_extensions: frozenset[NodePath] = frozenset()) -> "PersonaTree":
        values = dict(self.values)
        values.update(updates)
        return PersonaTree(self.schema, values, self.extensions | new_extensions)

    def check(self) -> None:
        """Raise TreeError if any invariant is violated."""
        for path, value in self.values.items():
            if path not in self.schema.leaves and path not in self.extensions:
                raise TreeError(f"{path.text}: not a declared or extended leaf")
            if not isinstance(value, str):
                raise TreeError(f"{path.text}: leaf values must be strings")
            if len(value) > self.budget_of(path):
                raise TreeError(f"{path.text}: value exceeds budget {self.budget_of(path)}")
        missing = [p for p in self.schema.leaves if p not in self.values]
        if missing:
            raise TreeError(f"{missing[0].text}: declared leaf has no value")


def init_tree(schema: Schema) -> PersonaTree:
    return PersonaTree(schema, {path: spec.default for path, spec in schema.leaves.items()})


def _ordered(tree: PersonaTree) -> Iterator[NodePath]:
    # extensions are sorted so the canonical form does not depend on insertion order
    ext_by_parent: dict[tuple[str, ...], list[NodePath]] = {}
    for p in sorted(tree.extensions):
        ext_by_parent.setdefault(p.parent, []).append(p)
    yield from _walk(tree.schema.root, (), ext_by_parent)


def _walk(branch: Branch, prefix: tuple[str, ...], ext: dict[tuple[str, ...], list[NodePath]]) -> Iterator[NodePath]:
    for name, child in branch.children.items():
        path = prefix + (name,)
        if isinstance(child, Branch):
            yield from _walk(child, path, ext)
        else:
            yield NodePath(path)
    yield from ext.get(prefix, [])


# -- path resolution ---------------------------------------------------------


@dataclass(frozen=True)
class Resolution:
    """Outcome of resolving a path: ``leaf``, ``branch``, ``missing_leaf``
    (parent branch exists) or ``missing_branch``."""

    kind: str
    segments: tuple[str, ...]
    budget: int | None = None
    extension: bool = False

    @property
    def found(self) -> bool:
        return self.kind in ("leaf", "branch")


def resolve_path(tree: PersonaTree, path: NodePath | str) -> Resolution:
    if isinstance(path, NodePath):
        segments = path.segments
    else:
        if not isinstance(path, str):
            return Resolution("missing_branch", ())
        segments = tuple(path.split("."))
    if not segments or any(not s for s in segments):
        return Resolution("missing_branch", segments)
    schema = tree.schema
    node = schema.node_at(segments)
    if isinstance(node, Branch):
        return Resolution("branch", segments)
    if isinstance(node, LeafSpec) and len(segments) >= MIN_DEPTH:
        return Resolution("leaf", segments, node.budget)
    if len(segments) >= MIN_DEPTH:
        np_ = NodePath(segments)
        if np_ in tree.extensions:
            return Resolution("leaf", segments, schema.default_budget, extension=True)
    if isinstance(schema.node_at(segments[:-1]), Branch) and node is None:
        return Resolution("missing_leaf", segments)
    return Resolution("missing_branch", segments)


# -- serialization -----------------------------------------------------------


def _nested(tree: PersonaTree) -> dict:
    out: dict = {}
    for path in _ordered(tree):
        cursor = out
        for seg in path.parent:
            cursor = cursor.setdefault(seg, {})
        cursor[path.name] = tree.values[path]
    return out


def serialize_tree(tree: PersonaTree, style: str = "canonical") -> str:
    """Render a tree as text.

    ``canonical`` is the full JSON dump used for persistence and hashing.
    ``prompt_compact`` is an indented outline for model context: every branch,
    every leaf name, and a ``name: value`` line for populated leaves only.
    """
    if style == "canonical":
        return json.dumps(_nested(tree), ensure_ascii=False, indent=2) + "\n"
    if style == "prompt_compact":
        return "\n".join(_outline(tree))
    raise ValueError(f"unknown serialization style {style!r}")


def _outline(tree: PersonaTree) -> Iterator[str]:
    def emit(node: dict, depth: int) -> Iterator[str]:
        pad = "  " * depth
        for name, child in node.items():
            if isinstance(child, dict):
                yield f"{pad}{name}"
                yield from emit(child, depth + 1)
            elif child:
                yield f"{pad}- {name}: {child}"
            else:
                yield f"{pad}- {name}"

    yield from emit(_nested(tree), 0)


def parse_compact_values(text: str) -> dict[str, str]:
    """Recover the populated leaves from a ``prompt_compact`` outline."""
    stack: list[str] = []
    found: dict[str, str] = {}
    for line in text.split("\n"):
        if not line.strip():
            continue
        stripped = line.lstrip(" ")
        depth = (len(line) - len(stripped)) // 2
        del stack[depth:]
        if stripped.startswith("- "):
            name, sep, value = stripped[2:].partition(": ")
            if sep:
                found[".".join(stack + [name])] = value
        else:
            stack.append(stripped)
    return found


def compact_overhead_bound(schema: Schema, extra_leaves: int = 0) -> int:
    """Upper bound on prompt_compact characters that are not leaf text."""
    total = 0
    for segments in schema.branches:
        if segments:
            total += 2 * (len(segments) - 1) + len(segments[-1]) + 1
    for path in schema.leaves:
        total += 2 * (len(path.segments) - 1) + 2 + len(path.name) + 2 + 1
    # extension leaves: assume the deepest indentation and a name as long as the longest path
    longest = max(len(p.text) for p in schema.leaves)
    total += extra_leaves * (2 * schema.max_depth + 2 + longest + 3)
    return total


def parse_tree(text: str, schema: Schema) -> PersonaTree:
    """Inverse of the canonical serialization.

    Strings found under existing branches but not declared by the schema are
    read back as extension leaves.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeError(f"snapshot parse failure: {exc.msg}") from exc
    values: dict[NodePath, str] = {}
    extensions: set[NodePath] = set()

    def visit(node: object, prefix: tuple[str, ...]) -> None:
        if not isinstance(node, dict):
            raise TreeError(f"{'.'.join(prefix) or '<root>'}: expected an object")
        for name, child in node.items():
            path = prefix + (name,)
            if isinstance(child, dict):
                if not isinstance(schema.node_at(path), Branch):
                    raise TreeError(f"{'.'.join(path)}: unknown branch")
                visit(child, path)
            elif isinstance(child, str):
                np_ = NodePath(path)
                spec = schema.node_at(path)
                if isinstance(spec, Branch):
                    raise TreeError(f"{np_.text}: branch holds a string")
                if spec is None:
                    extensions.add(np_)
                values[np_] = child
            else:
                raise TreeError(f"{'.'.join(path)}: leaf values must be strings")

    visit(doc, ())
    tree = PersonaTree(schema, values, frozenset(extensions))
    tree.check()
    return tree


def tree_hash(tree: PersonaTree) -> str:
    return hashlib.sha256(serialize_tree(tree, "canonical").encode("utf-8")).hexdigest()
