"""Schema-bounded long-term user memory for dialogue agents."""

from memtree.gate import ApplyReport, GateConfig, apply_ops, enforce_budget, validate_op
from memtree.ops import Add, Delete, NoOp, Update, parse_op_line, parse_op_list, render_op
from memtree.schema import (
    NodePath,
    PersonaTree,
    Schema,
    default_schema,
    init_tree,
    load_schema,
    parse_tree,
    resolve_path,
    serialize_tree,
    tree_hash,
)
from memtree.store import VersionStore, diff, replay

__version__ = "0.1.0"
