"""
Schema, Database and Example types with their JSON forms.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from core.grammar import QueryTree, parse_sexpr, to_sexpr
from utils.error_handler import DatasetIntegrityError

INT, TEXT = "int", "text"


@dataclass(frozen=True)
class Column:
    name: str
    type: str


@dataclass
class Schema:
    """
    Tables with typed columns, foreign keys and an utterance lexicon.

    Lexicon keys are schema elements (`table` or `table.column`) mapping to
    {"aliases": [...], "synonyms": [...]}; synonyms are the shifted wording
    used for held-out schemas.
    """
    schema_id: str
    tables: Dict[str, List[Column]]
    foreign_keys: List[Tuple[str, str]]
    lexicon: Dict[str, Dict[str, List[str]]] = field(default_factory=dict)
    heldout: bool = False
    lexicon_shift: float = 0.0

    def __post_init__(self):
        for table, columns in self.tables.items():
            names = [c.name for c in columns]
            if len(names) != len(set(names)):
                raise DatasetIntegrityError(f"{self.schema_id}: duplicate column names in {table}")
        known = set(self.qualified_columns())
        for src, dst in self.foreign_keys:
            if src not in known or dst not in known:
                raise DatasetIntegrityError(f"{self.schema_id}: foreign key {src} -> {dst} references unknown columns")

    def table_names(self) -> List[str]:
        return list(self.tables)

    def qualified_columns(self) -> List[str]:
        return [f"{t}.{c.name}" for t, cols in self.tables.items() for c in cols]

    def column_type(self, qualified: str) -> Optional[str]:
        table, _, column = qualified.partition(".")
        for col in self.tables.get(table, []):
            if col.name == column:
                return col.type
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_id": self.schema_id,
            "heldout": self.heldout,
            "lexicon_shift": self.lexicon_shift,
            "tables": {t: [[c.name, c.type] for c in cols] for t, cols in self.tables.items()},
            "foreign_keys": [list(fk) for fk in self.foreign_keys],
            "lexicon": self.lexicon,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Schema":
        return cls(
            schema_id=data["schema_id"],
            tables={t: [Column(n, ty) for n, ty in cols] for t, cols in data["tables"].items()},
            foreign_keys=[tuple(fk) for fk in data["foreign_keys"]],
            lexicon=data.get("lexicon", {}),
            heldout=bool(data.get("heldout", False)),
            lexicon_shift=float(data.get("lexicon_shift", 0.0)),
        )


@dataclass
class Database:
    """Row sets per table; rows map column name to value"""
    schema: Schema
    rows: Dict[str, List[Dict[str, Any]]]

    MAX_ROWS = 200

    def __post_init__(self):
        for table, rows in self.rows.items():
            if table not in self.schema.tables:
                raise DatasetIntegrityError(f"{self.schema.schema_id}: rows for unknown table {table}")
            if len(rows) > self.MAX_ROWS:
                raise DatasetIntegrityError(f"{self.schema.schema_id}.{table}: more than {self.MAX_ROWS} rows")
            columns = self.schema.tables[table]
            for row in rows:
                for col in columns:
                    value = row.get(col.name)
                    ok = isinstance(value, int) and not isinstance(value, bool) if col.type == INT \
                        else isinstance(value, str)
                    if not ok:
                        raise DatasetIntegrityError(
                            f"{self.schema.schema_id}.{table}.{col.name}: value {value!r} is not {col.type}")

    @property
    def schema_id(self) -> str:
        return self.schema.schema_id

    def column_values(self, qualified: str) -> List[Any]:
        table, _, column = qualified.partition(".")
        return [row[column] for row in self.rows.get(table, [])]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_id": self.schema.schema_id,
            "rows": {t: [[row[c.name] for c in self.schema.tables[t]] for row in rows]
                     for t, rows in self.rows.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], schema: Schema) -> "Database":
        rows = {}
        for table, values in data["rows"].items():
            columns = schema.tables.get(table)
            if columns is None:
                raise DatasetIntegrityError(f"{schema.schema_id}: rows for unknown table {table}")
            rows[table] = [{c.name: v for c, v in zip(columns, row)} for row in values]
        return cls(schema=schema, rows=rows)


@dataclass(frozen=True)
class Example:
    example_id: str
    schema_id: str
    utterance: str
    gold: QueryTree
    split: str
    pattern: str = ""

    @property
    def tokens(self) -> List[str]:
        return tokenize(self.utterance)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.example_id,
            "schema_id": self.schema_id,
            "utterance": self.utterance,
            "query": to_sexpr(self.gold),
            "split": self.split,
            "pattern": self.pattern,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Example":
        return cls(
            example_id=data["id"],
            schema_id=data["schema_id"],
            utterance=data["utterance"],
            gold=parse_sexpr(data["query"]),
            split=data["split"],
            pattern=data.get("pattern", ""),
        )


def tokenize(text: str) -> List[str]:
    """Whitespace tokenization with lowercasing"""
    return text.lower().split()
