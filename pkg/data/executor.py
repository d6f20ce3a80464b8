"""
Relational Algebra Executor
Evaluates KEEP-collapsed query trees over an in-memory Database.
Pure and thread-safe; every failure is an ExecutionError.
"""

from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from core.grammar import (
    AGGREGATES, COMPARATORS, KEEP, QueryTree, collapse_keep,
)
from data.schema import INT, TEXT, Database
from utils.error_handler import ExecutionError

Row = Tuple[Any, ...]


@dataclass(frozen=True)
class ResultTable:
    """Multiset of result rows in execution order"""
    rows: Tuple[Row, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def normalized(self) -> List[Row]:
        """Rows with values sorted, then sorted: compares column-order free, multiplicity kept"""
        return sorted((tuple(sorted(row, key=value_key)) for row in self.rows), key=row_key)


def value_key(value: Any) -> Tuple[int, Any]:
    """Total order over mixed int/float/str values"""
    if isinstance(value, (int, float)):
        return (0, value)
    return (1, str(value))


def row_key(row: Sequence[Any]) -> Tuple:
    return tuple(value_key(v) for v in row)


@dataclass
class _Relation:
    columns: Tuple[str, ...]
    rows: List[Row]

    def index(self, column: str) -> int:
        try:
            return self.columns.index(column)
        except ValueError:
            raise ExecutionError(f"unknown column {column} in relation {list(self.columns)}")


@dataclass
class _Grouped:
    key: str
    source: _Relation
    groups: Dict[Any, List[Row]]


_Value = Union[_Relation, _Grouped, List[Row]]


class Executor:
    """Executes trees against one database"""

    def __init__(self, db: Database):
        self.db = db
        self.schema = db.schema

    def run(self, tree: QueryTree) -> ResultTable:
        result = self._eval(collapse_keep(tree))
        if not isinstance(result, list):
            raise ExecutionError(f"tree does not produce a query result: {tree}")
        return ResultTable(tuple(result))

    # relations

    def _relation(self, tree: QueryTree) -> _Relation:
        value = self._eval(tree)
        if not isinstance(value, _Relation):
            raise ExecutionError(f"expected a relation, got {tree.op}")
        return value

    def _query(self, tree: QueryTree) -> List[Row]:
        value = self._eval(tree)
        if not isinstance(value, list):
            raise ExecutionError(f"expected a query result, got {tree.op}")
        return value

    def _eval(self, tree: QueryTree) -> _Value:
        op = tree.op
        if op == "tab":
            return self._scan(tree.payload)
        if op in ("col", "val", "null"):
            raise ExecutionError(f"bare {op} leaf outside an operator")
        if op == KEEP:
            return self._eval(tree.left)
        if op == "select":
            rel = self._relation(tree.right)
            keep = [row for row in rel.rows if self._predicate(tree.left, rel, row)]
            return _Relation(rel.columns, keep)
        if op == "join":
            return self._join(self._relation(tree.left), self._relation(tree.right))
        if op == "groupby":
            return self._group(tree.left, self._relation(tree.right))
        if op == "project":
            return self._project(tree.left, self._eval(tree.right))
        if op == "distinct":
            seen, out = set(), []
            for row in self._query(tree.left):
                if row not in seen:
                    seen.add(row)
                    out.append(row)
            return out
        if op in ("order_asc", "order_desc"):
            rows = self._query(tree.left)
            self._check_sortable(rows)
            rows = sorted(rows, key=row_key)
            return sorted(rows, key=lambda r: value_key(r[-1]), reverse=(op == "order_desc"))
        if op == "limit1":
            return self._query(tree.left)[:1]
        if op in ("union", "intersect", "except"):
            return self._set_op(op, self._query(tree.left), self._query(tree.right))
        raise ExecutionError(f"operator {op!r} cannot be executed here")

    def _scan(self, table: str) -> _Relation:
        columns = self.schema.tables.get(table)
        if columns is None:
            raise ExecutionError(f"unknown table {table}")
        names = tuple(f"{table}.{c.name}" for c in columns)
        rows = [tuple(row[c.name] for c in columns) for row in self.db.rows.get(table, [])]
        return _Relation(names, rows)

    def _join(self, left: _Relation, right: _Relation) -> _Relation:
        if set(left.columns) & set(right.columns):
            raise ExecutionError("self-join is not supported")
        for src, dst in self.schema.foreign_keys:
            if src in left.columns and dst in right.columns:
                li, ri = left.index(src), right.index(dst)
                break
            if dst in left.columns and src in right.columns:
                li, ri = left.index(dst), right.index(src)
                break
        else:
            raise ExecutionError("no foreign key links the joined relations")
        rows = [lr + rr for lr in left.rows for rr in right.rows if lr[li] == rr[ri]]
        return _Relation(left.columns + right.columns, rows)

    def _group(self, key: QueryTree, rel: _Relation) -> _Grouped:
        if key.op != "col":
            raise ExecutionError("group key must be a column")
        idx = rel.index(key.payload)
        groups: Dict[Any, List[Row]] = {}
        for row in rel.rows:
            groups.setdefault(row[idx], []).append(row)
        return _Grouped(key.payload, rel, groups)

    # predicates and projections

    def _predicate(self, pred: QueryTree, rel: _Relation, row: Row) -> bool:
        if pred.op == "and":
            return self._predicate(pred.left, rel, row) and self._predicate(pred.right, rel, row)
        if pred.op not in COMPARATORS:
            raise ExecutionError(f"{pred.op!r} is not a predicate")
        if pred.left.op != "col" or pred.right.op != "val":
            raise ExecutionError("comparison needs (column, value)")
        column = pred.left.payload
        value = pred.right.payload
        self._check_comparable(column, value)
        cell = row[rel.index(column)]
        if pred.op == "=":
            return cell == value
        if pred.op == "!=":
            return cell != value
        if pred.op == ">":
            return cell > value
        if pred.op == ">=":
            return cell >= value
        if pred.op == "<":
            return cell < value
        return cell <= value

    def _check_comparable(self, column: str, value: Any) -> None:
        col_type = self.schema.column_type(column)
        if col_type is None:
            raise ExecutionError(f"unknown column {column}")
        numeric = isinstance(value, int) and not isinstance(value, bool)
        if (col_type == INT) != numeric or (col_type == TEXT and not isinstance(value, str)):
            raise ExecutionError(f"type mismatch: {column} ({col_type}) compared with {value!r}")

    def _project(self, item: QueryTree, source: Union[_Relation, _Grouped, List[Row]]) -> List[Row]:
        if isinstance(source, list):
            raise ExecutionError("cannot project from a query result")
        if item.op == "col":
            if isinstance(source, _Grouped):
                if item.payload != source.key:
                    raise ExecutionError(f"{item.payload} is not the group key")
                return [(key,) for key in source.groups]
            idx = source.index(item.payload)
            return [(row[idx],) for row in source.rows]
        if item.op in AGGREGATES:
            column = item.left
            if column.op != "col":
                raise ExecutionError("aggregate needs a column")
            rel = source.source if isinstance(source, _Grouped) else source
            idx = rel.index(column.payload)
            col_type = self.schema.column_type(column.payload)
            if isinstance(source, _Grouped):
                rows = []
                for key, members in source.groups.items():
                    value = _aggregate(item.op, [r[idx] for r in members], col_type)
                    if value is not None:
                        rows.append((key, value))
                return rows
            value = _aggregate(item.op, [r[idx] for r in rel.rows], col_type)
            return [] if value is None else [(value,)]
        raise ExecutionError(f"cannot project {item.op!r}")

    def _set_op(self, op: str, left: List[Row], right: List[Row]) -> List[Row]:
        if left and right and len(left[0]) != len(right[0]):
            raise ExecutionError(f"{op} over results of different arity")
        if op == "union":
            return left + right
        counts = Counter(right)
        out = []
        for row in left:
            if op == "intersect" and counts[row] > 0:
                counts[row] -= 1
                out.append(row)
            elif op == "except":
                if counts[row] > 0:
                    counts[row] -= 1
                else:
                    out.append(row)
        return out

    @staticmethod
    def _check_sortable(rows: List[Row]) -> None:
        kinds = {value_key(r[-1])[0] for r in rows}
        if len(kinds) > 1:
            raise ExecutionError("cannot order mixed numeric and text values")


def _aggregate(op: str, values: List[Any], col_type: Optional[str]) -> Optional[Any]:
    """COUNT of nothing is 0; the other aggregates of nothing are empty (None)"""
    if op == "count":
        return len(values)
    if op in ("sum", "avg") and col_type != INT:
        raise ExecutionError(f"{op.upper()} over non-numeric column")
    if not values:
        return None
    if op == "sum":
        return sum(values)
    if op == "avg":
        return sum(values) / len(values)
    if op == "min":
        return min(values)
    return max(values)


def execute(tree: QueryTree, db: Database) -> ResultTable:
    """Execute a query tree on a database"""
    return Executor(db).run(tree)


def results_equal(a: ResultTable, b: ResultTable) -> bool:
    return a.normalized() == b.normalized()
