"""
Dataset I/O
Corpus, split and prediction files. JSON for schemas/databases/splits,
JSONL for examples and predictions; parse failures name the line.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from core.grammar import QueryTree, parse_sexpr, to_sexpr
from data.schema import Database, Example, Schema
from utils.error_handler import DataFormatError, DatasetIntegrityError, MissingArtifactError, TreeParseError
from utils.file_utils import atomic_write, hash_files, read_json, write_json

logger = logging.getLogger(__name__)

SCHEMAS_FILE = "schemas.json"
DATABASES_FILE = "databases.json"
EXAMPLES_FILE = "examples.jsonl"


@dataclass
class Corpus:
    schemas: Dict[str, Schema]
    databases: Dict[str, Database]
    examples: List[Example]
    _by_id: Dict[str, Example] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {ex.example_id: ex for ex in self.examples}
        if len(self._by_id) != len(self.examples):
            raise DatasetIntegrityError("duplicate example ids in corpus")

    def example(self, example_id: str) -> Example:
        try:
            return self._by_id[example_id]
        except KeyError:
            raise DatasetIntegrityError(f"unknown example id {example_id}")

    def by_split(self, split: str) -> List[Example]:
        return [ex for ex in self.examples if ex.split == split]

    def for_schema(self, schema_id: str) -> List[Example]:
        return [ex for ex in self.examples if ex.schema_id == schema_id]

    @property
    def train_schema_ids(self) -> List[str]:
        return [sid for sid, s in self.schemas.items() if not s.heldout]

    @property
    def heldout_schema_ids(self) -> List[str]:
        return [sid for sid, s in self.schemas.items() if s.heldout]


def _jsonl_bytes(records: Iterable[Dict[str, Any]]) -> bytes:
    lines = [json.dumps(r, ensure_ascii=False, sort_keys=True) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def read_jsonl(path: Path, producer: Optional[str] = None) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing file: {path}", producer=producer)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON record ({e.msg})", original_error=e)
            if not isinstance(record, dict):
                raise DataFormatError(f"{path}:{lineno}: record is not an object")
            records.append(record)
    return records


def save_corpus(out_dir: Path, schemas: Dict[str, Schema], databases: Dict[str, Database],
                examples: Sequence[Example]) -> str:
    """Write the corpus files; returns their combined content hash"""
    out_dir = Path(out_dir)
    write_json([s.to_dict() for s in schemas.values()], out_dir / SCHEMAS_FILE)
    write_json([db.to_dict() for db in databases.values()], out_dir / DATABASES_FILE)
    atomic_write(_jsonl_bytes(ex.to_dict() for ex in examples), out_dir / EXAMPLES_FILE)
    return corpus_hash(out_dir)


def corpus_hash(corpus_dir: Path) -> str:
    corpus_dir = Path(corpus_dir)
    return hash_files([corpus_dir / SCHEMAS_FILE, corpus_dir / DATABASES_FILE, corpus_dir / EXAMPLES_FILE])


def load_corpus(corpus_dir: Path, producer: str = "gen-data") -> Corpus:
    corpus_dir = Path(corpus_dir)
    schema_docs = read_json(corpus_dir / SCHEMAS_FILE, producer=producer)
    db_docs = read_json(corpus_dir / DATABASES_FILE, producer=producer)
    try:
        schemas = {d["schema_id"]: Schema.from_dict(d) for d in schema_docs}
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{corpus_dir / SCHEMAS_FILE}: malformed schema entry ({e})", original_error=e)
    databases = {}
    for idx, doc in enumerate(db_docs):
        schema = schemas.get(doc.get("schema_id"))
        if schema is None:
            raise DataFormatError(f"{corpus_dir / DATABASES_FILE}: entry {idx} names unknown schema")
        databases[schema.schema_id] = Database.from_dict(doc, schema)

    examples = []
    path = corpus_dir / EXAMPLES_FILE
    for lineno, record in enumerate(read_jsonl(path, producer=producer), 1):
        try:
            example = Example.from_dict(record)
        except KeyError as e:
            raise DataFormatError(f"{path}:{lineno}: missing field {e}", original_error=e)
        except TreeParseError as e:
            raise DataFormatError(f"{path}:{lineno}: {e.message}", original_error=e)
        if example.schema_id not in schemas:
            raise DataFormatError(f"{path}:{lineno}: unknown schema {example.schema_id}")
        examples.append(example)
    logger.info(f"Loaded corpus: {len(schemas)} schemas, {len(examples)} examples")
    return Corpus(schemas=schemas, databases=databases, examples=examples)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Case/test partition of the held-out schemas for one resplit"""
    split: int
    seed: int
    cases_per_schema: int
    train_schemas: List[str]
    heldout_schemas: List[str]
    cases: Dict[str, List[str]]
    test: Dict[str, List[str]]

    def __post_init__(self):
        overlap = set(self.train_schemas) & set(self.heldout_schemas)
        if overlap:
            raise DatasetIntegrityError(f"schemas both train and held-out: {sorted(overlap)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "split": self.split,
            "seed": self.seed,
            "cases_per_schema": self.cases_per_schema,
            "train_schemas": self.train_schemas,
            "heldout_schemas": self.heldout_schemas,
            "schemas": {sid: {"cases": self.cases[sid], "test": self.test[sid]} for sid in self.heldout_schemas},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitSpec":
        per = data["schemas"]
        return cls(
            split=int(data["split"]),
            seed=int(data["seed"]),
            cases_per_schema=int(data["cases_per_schema"]),
            train_schemas=list(data["train_schemas"]),
            heldout_schemas=list(data["heldout_schemas"]),
            cases={sid: list(v["cases"]) for sid, v in per.items()},
            test={sid: list(v["test"]) for sid, v in per.items()},
        )

    def limited(self, case_count: int) -> "SplitSpec":
        """Same test sets with only the first `case_count` cases per schema"""
        return SplitSpec(self.split, self.seed, case_count, self.train_schemas, self.heldout_schemas,
                         {sid: ids[:case_count] for sid, ids in self.cases.items()}, self.test)


def make_splits(corpus: Corpus, cases_per_schema: int, num_splits: int, seed: int) -> List[SplitSpec]:
    """Random case/test partitions per held-out schema; split n uses seed stream [seed, n]"""
    if cases_per_schema < 0:
        raise DatasetIntegrityError("cases per schema must be non-negative")
    specs = []
    for n in range(num_splits):
        rng = np.random.default_rng([seed, n])
        cases, test = {}, {}
        for sid in corpus.heldout_schema_ids:
            ids = [ex.example_id for ex in corpus.for_schema(sid)]
            if cases_per_schema >= len(ids):
                raise DatasetIntegrityError(
                    f"{sid}: {cases_per_schema} cases leave no test examples out of {len(ids)}")
            order = [ids[int(i)] for i in rng.permutation(len(ids))]
            cases[sid] = order[:cases_per_schema]
            test[sid] = sorted(order[cases_per_schema:])
        specs.append(SplitSpec(n, seed, cases_per_schema, corpus.train_schema_ids,
                               corpus.heldout_schema_ids, cases, test))
    return specs


def split_path(splits_dir: Path, split: int) -> Path:
    return Path(splits_dir) / f"split_{split}.json"


def save_split(splits_dir: Path, spec: SplitSpec) -> Path:
    path = split_path(splits_dir, spec.split)
    write_json(spec.to_dict(), path)
    return path


def load_split(splits_dir: Path, split: int, producer: str = "gen-data") -> SplitSpec:
    path = split_path(splits_dir, split)
    try:
        return SplitSpec.from_dict(read_json(path, producer=producer))
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{path}: malformed split file ({e})", original_error=e)


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    example_id: str
    schema_id: str
    beam: List[QueryTree]
    scores: List[float]

    @property
    def top(self) -> Optional[QueryTree]:
        return self.beam[0] if self.beam else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.example_id,
            "schema_id": self.schema_id,
            "beam": [to_sexpr(t) for t in self.beam],
            "scores": [float(s) for s in self.scores],
        }


def save_predictions(path: Path, predictions: Sequence[Prediction]) -> None:
    atomic_write(_jsonl_bytes(p.to_dict() for p in predictions), path)


def load_predictions(path: Path, test_ids: Optional[Sequence[str]] = None,
                     producer: str = "adapt-eval") -> List[Prediction]:
    """Read predictions; with test_ids, every prediction must join to exactly one test example"""
    out = []
    path = Path(path)
    for lineno, record in enumerate(read_jsonl(path, producer=producer), 1):
        try:
            out.append(Prediction(record["id"], record["schema_id"],
                                  [parse_sexpr(t) for t in record["beam"]],
                                  [float(s) for s in record["scores"]]))
        except KeyError as e:
            raise DataFormatError(f"{path}:{lineno}: missing field {e}", original_error=e)
        except TreeParseError as e:
            raise DataFormatError(f"{path}:{lineno}: {e.message}", original_error=e)
    if test_ids is not None:
        expected = set(test_ids)
        seen = [p.example_id for p in out]
        orphans = sorted(set(seen) - expected)
        missing = sorted(expected - set(seen))
        if orphans or missing or len(seen) != len(set(seen)):
            raise DatasetIntegrityError(
                f"{path}: predictions do not join to the test set "
                f"(orphans={orphans[:3]}, missing={missing[:3]})")
    return out
