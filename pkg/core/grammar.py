"""
Relational Algebra Grammar
Operator vocabulary, immutable query trees, Keep-balancing, canonical form,
s-expression text format and structure-only tree edit distance.
"""

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import zss

from utils.error_handler import GrammarError, HeightOverflowError, TreeParseError

# Operator symbols. Ids are positions in SYMBOLS and never change.
UNARY_OPS: Tuple[str, ...] = (
    "keep", "count", "sum", "min", "max", "avg",
    "distinct", "order_asc", "order_desc", "limit1",
)
BINARY_OPS: Tuple[str, ...] = (
    ">", ">=", "<", "<=", "=", "!=",
    "and", "select", "join", "project", "groupby",
    "union", "intersect", "except",
)
LEAF_KINDS: Tuple[str, ...] = ("tab", "col", "val")
NULL = "null"
KEEP = "keep"

SYMBOLS: Tuple[str, ...] = UNARY_OPS + BINARY_OPS + LEAF_KINDS + (NULL,)
SYMBOL_IDS: Dict[str, int] = {name: idx for idx, name in enumerate(SYMBOLS)}

COMPARATORS = (">", ">=", "<", "<=", "=", "!=")
AGGREGATES = ("count", "sum", "min", "max", "avg")
QUERY_MODIFIERS = ("distinct", "order_asc", "order_desc", "limit1")
SET_OPS = ("union", "intersect", "except")
COMMUTATIVE_OPS = ("and", "union", "intersect", "join")

# Leaf kinds as the grammar sees them
SCHEMA_CONSTANT = "SchemaConstant"
DB_VALUE = "DBValue"

# Static types used by the operator signature table
T_TABLE, T_COLUMN, T_VALUE = "table", "column", "value"
T_PRED, T_REL, T_GREL, T_AGG, T_QUERY = "pred", "rel", "grel", "agg", "query"
_RELATIONS = (T_TABLE, T_REL)


class _Wildcard:
    """Marker replacing DB-value payloads in canonical trees"""
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "?"

    def __reduce__(self):
        return (_Wildcard, ())


WILDCARD = _Wildcard()
Payload = Union[str, int, _Wildcard, None]


def symbol_id(name: str) -> int:
    try:
        return SYMBOL_IDS[name]
    except KeyError:
        raise GrammarError(f"Unknown operator symbol: {name!r}")


def is_leaf_symbol(name: str) -> bool:
    return name in LEAF_KINDS or name == NULL


def leaf_kind(name: str) -> Optional[str]:
    """Grammar leaf kind of a leaf symbol (None for operators and the pad)"""
    if name in ("tab", "col"):
        return SCHEMA_CONSTANT
    if name == "val":
        return DB_VALUE
    return None


@dataclass(frozen=True)
class OperatorVocab:
    """Unary and binary operator ids available to the decoder"""
    unary_ops: Tuple[int, ...]
    binary_ops: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "unary_ops", tuple(sorted(self.unary_ops)))
        object.__setattr__(self, "binary_ops", tuple(sorted(self.binary_ops)))
        if set(self.unary_ops) & set(self.binary_ops):
            raise GrammarError("unary and binary operator sets overlap")
        for op_id in self.unary_ops:
            if SYMBOLS[op_id] not in UNARY_OPS:
                raise GrammarError(f"{SYMBOLS[op_id]!r} is not a unary operator")
        for op_id in self.binary_ops:
            if SYMBOLS[op_id] not in BINARY_OPS:
                raise GrammarError(f"{SYMBOLS[op_id]!r} is not a binary operator")

    @classmethod
    def default(cls) -> "OperatorVocab":
        vocab = cls(tuple(SYMBOL_IDS[o] for o in UNARY_OPS),
                    tuple(SYMBOL_IDS[o] for o in BINARY_OPS))
        vocab.validate()
        return vocab

    @classmethod
    def from_names(cls, unary: Sequence[str], binary: Sequence[str]) -> "OperatorVocab":
        return cls(tuple(symbol_id(o) for o in unary), tuple(symbol_id(o) for o in binary))

    def validate(self) -> None:
        """Full decoding vocabulary: needs KEEP and at least one op of each arity"""
        if SYMBOL_IDS[KEEP] not in self.unary_ops:
            raise GrammarError("KEEP must be a unary operator")
        if not self.unary_ops or not self.binary_ops:
            raise GrammarError("vocabulary needs at least one unary and one binary operator")

    @property
    def unary_names(self) -> List[str]:
        return [SYMBOLS[i] for i in self.unary_ops]

    @property
    def binary_names(self) -> List[str]:
        return [SYMBOLS[i] for i in self.binary_ops]

    def frontier_size(self, beam_size: int) -> int:
        return beam_size * beam_size * len(self.binary_ops) + beam_size * len(self.unary_ops)


@dataclass(frozen=True)
class QueryTree:
    """
    Immutable relational algebra tree.

    Leaves are `tab`/`col` schema constants or `val` DB values and carry a payload;
    unary nodes have only `left`; binary nodes have both children.
    """
    op: str
    left: Optional["QueryTree"] = None
    right: Optional["QueryTree"] = None
    payload: Payload = None
    height: int = field(init=False, compare=False, repr=False)
    size: int = field(init=False, compare=False, repr=False)
    _hash: int = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        op = self.op
        if op in LEAF_KINDS:
            if self.left is not None or self.right is not None:
                raise GrammarError(f"leaf {op!r} cannot have children")
            if self.payload is None:
                raise GrammarError(f"leaf {op!r} needs a payload")
            height, size = 0, 1
        elif op == NULL:
            if self.left is not None or self.right is not None:
                raise GrammarError("null leaf cannot have children")
            height, size = 0, 1
        elif op in UNARY_OPS:
            if self.left is None or self.right is not None:
                raise GrammarError(f"unary {op!r} needs exactly a left child")
            height, size = self.left.height + 1, self.left.size + 1
        elif op in BINARY_OPS:
            if self.left is None or self.right is None:
                raise GrammarError(f"binary {op!r} needs two children")
            height = max(self.left.height, self.right.height) + 1
            size = self.left.size + self.right.size + 1
        else:
            raise GrammarError(f"Unknown operator symbol: {op!r}")
        if op not in LEAF_KINDS and self.payload is not None:
            raise GrammarError(f"operator {op!r} cannot carry a payload")
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "_hash", hash((op, self.left, self.right, _payload_key(self.payload))))

    def __hash__(self) -> int:
        return self._hash

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def op_id(self) -> int:
        return SYMBOL_IDS[self.op]

    def children(self) -> List["QueryTree"]:
        return [c for c in (self.left, self.right) if c is not None]

    def __str__(self) -> str:
        return to_sexpr(self)


def _payload_key(payload: Payload):
    # keep int 1 and str "1" apart in hashing
    return (type(payload).__name__, payload if not isinstance(payload, _Wildcard) else "?")


NULL_TREE = QueryTree(NULL)


def table_leaf(name: str) -> QueryTree:
    return QueryTree("tab", payload=name)


def column_leaf(qualified_name: str) -> QueryTree:
    return QueryTree("col", payload=qualified_name)


def value_leaf(value: Union[int, str]) -> QueryTree:
    return QueryTree("val", payload=value)


def node(op: str, left: QueryTree, right: Optional[QueryTree] = None) -> QueryTree:
    return QueryTree(op, left, right)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

def leaf_type(op: str) -> Optional[str]:
    return {"tab": T_TABLE, "col": T_COLUMN, "val": T_VALUE}.get(op)


@lru_cache(maxsize=None)
def result_type(op: str, left_type: Optional[str], right_type: Optional[str] = None) -> Optional[str]:
    """Static operator signature table. None means inadmissible."""
    if left_type is None:
        return None
    if op == KEEP:
        return left_type if right_type is None else None
    if op in AGGREGATES:
        return T_AGG if left_type == T_COLUMN else None
    if op in QUERY_MODIFIERS:
        return T_QUERY if left_type == T_QUERY else None
    if right_type is None:
        return None
    if op in COMPARATORS:
        return T_PRED if (left_type, right_type) == (T_COLUMN, T_VALUE) else None
    if op == "and":
        return T_PRED if left_type == right_type == T_PRED else None
    if op == "select":
        return T_REL if left_type == T_PRED and right_type in _RELATIONS else None
    if op == "join":
        return T_REL if left_type in _RELATIONS and right_type in _RELATIONS else None
    if op == "groupby":
        return T_GREL if left_type == T_COLUMN and right_type in _RELATIONS else None
    if op == "project":
        if left_type in (T_COLUMN, T_AGG) and right_type in (T_TABLE, T_REL, T_GREL):
            return T_QUERY
        return None
    if op in SET_OPS:
        return T_QUERY if left_type == right_type == T_QUERY else None
    return None


def tree_type(tree: QueryTree) -> Optional[str]:
    """Static type of a tree, or None if it does not type-check"""
    if tree.is_leaf:
        return leaf_type(tree.op)
    left = tree_type(tree.left)
    right = tree_type(tree.right) if tree.right is not None else None
    if tree.right is not None and right is None:
        return None
    return result_type(tree.op, left, right)


# ---------------------------------------------------------------------------
# Balancing and traversal
# ---------------------------------------------------------------------------

def balance_tree(tree: QueryTree, target_height: int) -> QueryTree:
    """Insert KEEP chains so every root-to-leaf path has length target_height"""
    if target_height < tree.height:
        raise HeightOverflowError(
            f"tree of height {tree.height} does not fit target height {target_height}")
    if tree.is_leaf:
        balanced = tree
    elif tree.right is None:
        balanced = QueryTree(tree.op, balance_tree(tree.left, tree.height - 1))
    else:
        balanced = QueryTree(tree.op,
                             balance_tree(tree.left, tree.height - 1),
                             balance_tree(tree.right, tree.height - 1))
    for _ in range(target_height - tree.height):
        balanced = QueryTree(KEEP, balanced)
    return balanced


def is_balanced(tree: QueryTree) -> bool:
    if tree.is_leaf:
        return True
    if tree.left.height != tree.height - 1:
        return False
    if tree.right is not None and tree.right.height != tree.height - 1:
        return False
    return all(is_balanced(c) for c in tree.children())


def collapse_keep(tree: QueryTree) -> QueryTree:
    """Remove every KEEP node"""
    while tree.op == KEEP:
        tree = tree.left
    if tree.is_leaf:
        return tree
    left = collapse_keep(tree.left)
    right = collapse_keep(tree.right) if tree.right is not None else None
    if left is tree.left and right is tree.right:
        return tree
    return QueryTree(tree.op, left, right)


def enumerate_subtrees(tree: QueryTree) -> List[QueryTree]:
    """One subtree per node, pre-order"""
    out: List[QueryTree] = []
    stack = [tree]
    while stack:
        current = stack.pop()
        out.append(current)
        if current.right is not None:
            stack.append(current.right)
        if current.left is not None:
            stack.append(current.left)
    return out


def subtrees_by_height(balanced: QueryTree) -> List[List[QueryTree]]:
    """Distinct subtrees of a balanced tree grouped by height, first-seen pre-order"""
    levels: List[List[QueryTree]] = [[] for _ in range(balanced.height + 1)]
    seen = set()
    for sub in enumerate_subtrees(balanced):
        if sub not in seen:
            seen.add(sub)
            levels[sub.height].append(sub)
    return levels


def canonicalize(tree: QueryTree) -> QueryTree:
    """KEEP-free form with sorted commutative children and wildcarded DB values"""
    tree = collapse_keep(tree)
    if tree.op == "val":
        return QueryTree("val", payload=WILDCARD)
    if tree.is_leaf:
        return tree
    left = canonicalize(tree.left)
    if tree.right is None:
        return QueryTree(tree.op, left)
    right = canonicalize(tree.right)
    if tree.op in COMMUTATIVE_OPS and to_sexpr(right) < to_sexpr(left):
        left, right = right, left
    return QueryTree(tree.op, left, right)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r'\(|\)|"(?:[^"\\]|\\.)*"|[^\s()"]+')


def _payload_text(payload: Payload) -> str:
    if isinstance(payload, _Wildcard):
        return "?"
    if isinstance(payload, bool):
        raise GrammarError("boolean payloads are not supported")
    if isinstance(payload, int):
        return str(payload)
    return json.dumps(payload, ensure_ascii=False)


def to_sexpr(tree: QueryTree) -> str:
    """Serialize, e.g. (> (col people.age) (val 60))"""
    if tree.op == NULL:
        return "(null)"
    if tree.op in ("tab", "col"):
        return f"({tree.op} {tree.payload})"
    if tree.op == "val":
        return f"(val {_payload_text(tree.payload)})"
    if tree.right is None:
        return f"({tree.op} {to_sexpr(tree.left)})"
    return f"({tree.op} {to_sexpr(tree.left)} {to_sexpr(tree.right)})"


def parse_sexpr(text: str) -> QueryTree:
    """Parse the s-expression format produced by to_sexpr"""
    tokens = _TOKEN_RE.findall(text)
    if not tokens:
        raise TreeParseError("empty tree text")
    tree, pos = _parse_at(tokens, 0, text)
    if pos != len(tokens):
        raise TreeParseError(f"trailing tokens after tree: {text!r}")
    return tree


def _parse_at(tokens: List[str], pos: int, text: str) -> Tuple[QueryTree, int]:
    if pos >= len(tokens) or tokens[pos] != "(":
        raise TreeParseError(f"expected '(' at token {pos}: {text!r}")
    if pos + 1 >= len(tokens):
        raise TreeParseError(f"unterminated tree: {text!r}")
    op = tokens[pos + 1]
    pos += 2
    try:
        if op == NULL:
            tree = NULL_TREE
        elif op in ("tab", "col"):
            tree = QueryTree(op, payload=tokens[pos])
            pos += 1
        elif op == "val":
            tree = QueryTree("val", payload=_parse_value(tokens[pos]))
            pos += 1
        elif op in UNARY_OPS:
            child, pos = _parse_at(tokens, pos, text)
            tree = QueryTree(op, child)
        elif op in BINARY_OPS:
            left, pos = _parse_at(tokens, pos, text)
            right, pos = _parse_at(tokens, pos, text)
            tree = QueryTree(op, left, right)
        else:
            raise TreeParseError(f"unknown operator {op!r} in {text!r}")
    except IndexError:
        raise TreeParseError(f"unterminated tree: {text!r}")
    except TreeParseError:
        raise
    except GrammarError as e:
        raise TreeParseError(f"malformed tree {text!r}: {e.message}", original_error=e)
    if pos >= len(tokens) or tokens[pos] != ")":
        raise TreeParseError(f"expected ')' after {op!r}: {text!r}")
    return tree, pos + 1


def _parse_value(token: str) -> Payload:
    if token == "?":
        return WILDCARD
    if token.startswith('"'):
        return json.loads(token)
    try:
        return int(token)
    except ValueError:
        raise TreeParseError(f"bad value literal {token!r}")


def tree_tokens(tree: QueryTree) -> List[str]:
    """Word tokens of the linearized tree, used when cases are concatenated to an utterance"""
    tokens: List[str] = []
    for raw in _TOKEN_RE.findall(to_sexpr(tree)):
        if raw.startswith('"'):
            raw = json.loads(raw)
        for part in re.split(r"[._\s]+", str(raw).lower()):
            if part:
                tokens.append(part)
    return tokens


# ---------------------------------------------------------------------------
# Tree edit distance (ordered, unit cost, leaf payloads ignored)
# ---------------------------------------------------------------------------

def ted_label(tree: QueryTree) -> str:
    """Node label for edit distance: operator name, or the leaf kind for leaves"""
    kind = leaf_kind(tree.op)
    return kind if kind is not None else tree.op


def _unit_relabel(a: str, b: str) -> int:
    return 0 if a == b else 1


def tree_edit_distance_raw(a: QueryTree, b: QueryTree) -> int:
    """Ordered edit distance with unit insert/delete/relabel costs; leaf payloads are ignored"""
    a, b = collapse_keep(a), collapse_keep(b)
    return int(zss.simple_distance(a, b, get_children=QueryTree.children, get_label=ted_label,
                                   label_dist=_unit_relabel))


def tree_edit_distance(a: QueryTree, b: QueryTree) -> float:
    """Edit distance normalized by the node count of the larger tree, in [0, 1]"""
    a, b = collapse_keep(a), collapse_keep(b)
    raw = tree_edit_distance_raw(a, b)
    return min(1.0, raw / max(a.size, b.size))
