"""
Slow reference implementations used to cross-check the executor and the
tree edit distance.
"""

from collections import Counter
from functools import lru_cache

from core.grammar import collapse_keep, ted_label


def _scan(db, table):
    return [{f"{table}.{c.name}": row[c.name] for c in db.schema.tables[table]} for row in db.rows[table]]


def _holds(pred, row):
    if pred.op == "and":
        return _holds(pred.left, row) and _holds(pred.right, row)
    cell, value = row[pred.left.payload], pred.right.payload
    return {
        "=": cell == value, "!=": cell != value, ">": cell > value,
        ">=": cell >= value, "<": cell < value, "<=": cell <= value,
    }[pred.op]


def _aggregate(op, values):
    if op == "count":
        return len(values)
    if not values:
        return None
    if op == "sum":
        return sum(values)
    if op == "avg":
        return sum(values) / len(values)
    return min(values) if op == "min" else max(values)


def _eval(tree, db):
    op = tree.op
    if op == "tab":
        return _scan(db, tree.payload)
    if op == "select":
        return [row for row in _eval(tree.right, db) if _holds(tree.left, row)]
    if op == "join":
        left, right = _eval(tree.left, db), _eval(tree.right, db)
        out = []
        for lrow in left:
            for rrow in right:
                linked = any((src in lrow and dst in rrow and lrow[src] == rrow[dst])
                             or (dst in lrow and src in rrow and lrow[dst] == rrow[src])
                             for src, dst in db.schema.foreign_keys)
                if linked:
                    out.append({**lrow, **rrow})
        return out
    if op == "groupby":
        key = tree.left.payload
        groups = {}
        for row in _eval(tree.right, db):
            groups.setdefault(row[key], []).append(row)
        return ("groups", groups)
    if op == "project":
        source = _eval(tree.right, db)
        item = tree.left
        if isinstance(source, tuple):
            groups = source[1]
            if item.op == "col":
                return [(k,) for k in groups]
            column = item.left.payload
            rows = []
            for k, members in groups.items():
                value = _aggregate(item.op, [m[column] for m in members])
                if value is not None:
                    rows.append((k, value))
            return rows
        if item.op == "col":
            return [(row[item.payload],) for row in source]
        value = _aggregate(item.op, [row[item.left.payload] for row in source])
        return [] if value is None else [(value,)]
    if op == "distinct":
        out = []
        for row in _eval(tree.left, db):
            if row not in out:
                out.append(row)
        return out
    if op in ("order_asc", "order_desc"):
        return sorted(sorted(_eval(tree.left, db)), key=lambda r: r[-1], reverse=op == "order_desc")
    if op == "limit1":
        return _eval(tree.left, db)[:1]
    left, right = _eval(tree.left, db), _eval(tree.right, db)
    if op == "union":
        return left + right
    remaining = Counter(right)
    out = []
    for row in left:
        if remaining[row] > 0:
            remaining[row] -= 1
            if op == "intersect":
                out.append(row)
        elif op == "except":
            out.append(row)
    return out


def oracle_rows(tree, db):
    """Result rows of a KEEP-free query tree as a sorted multiset"""
    rows = _eval(collapse_keep(tree), db)
    return sorted(tuple(sorted(row, key=lambda v: (isinstance(v, str), v))) for row in rows)


def _forest(tree):
    return (ted_label(tree), tuple(_forest(c) for c in tree.children()))


def _size(forest):
    return sum(1 + _size(children) for _, children in forest)


@lru_cache(maxsize=None)
def _forest_distance(f, g):
    if not f and not g:
        return 0
    if not f:
        return _size(g)
    if not g:
        return _size(f)
    (v_label, v_children), (w_label, w_children) = f[-1], g[-1]
    return min(
        _forest_distance(f[:-1] + v_children, g) + 1,
        _forest_distance(f, g[:-1] + w_children) + 1,
        _forest_distance(f[:-1], g[:-1]) + _forest_distance(v_children, w_children)
        + (0 if v_label == w_label else 1),
    )


def oracle_ted(a, b):
    """Ordered unit-cost edit distance by plain forest recursion"""
    return _forest_distance((_forest(collapse_keep(a)),), (_forest(collapse_keep(b)),))
