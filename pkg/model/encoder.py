"""
Joint Utterance/Schema Encoder
Embeds utterance tokens and schema elements (tables, columns, value literals)
with segment-type embeddings, runs a transformer stack over the joint
sequence and splits the result back into token and schema vectors.
"""

import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.grammar import QueryTree, column_leaf, table_leaf, tree_tokens, value_leaf
from data.schema import INT, Database, Schema
from model.autodiff import Tensor, as_tensor, concat, mean_pool, matmul
from model.layers import Embedding, Module, TransformerStack
from utils.error_handler import DataFormatError, DimensionError
from utils.file_utils import read_json, write_json

logger = logging.getLogger(__name__)

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"
SEG_TOKEN, SEG_TABLE, SEG_COLUMN, SEG_VALUE, SEG_SEP = range(5)
_KIND_SEGMENT = {"tab": SEG_TABLE, "col": SEG_COLUMN, "val": SEG_VALUE}


class Vocabulary:
    """Dense word ids; specials first, then words in sorted order"""

    SPECIALS = (PAD, UNK, SEP)

    def __init__(self, words: Iterable[str] = ()):
        self.words: List[str] = list(self.SPECIALS)
        self.word_to_id: Dict[str, int] = {w: i for i, w in enumerate(self.words)}
        for word in sorted(set(words) - set(self.SPECIALS)):
            self.word_to_id[word] = len(self.words)
            self.words.append(word)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    @property
    def unk_id(self) -> int:
        return self.word_to_id[UNK]

    @property
    def sep_id(self) -> int:
        return self.word_to_id[SEP]

    def id(self, word: str) -> int:
        return self.word_to_id.get(word, self.unk_id)

    def ids(self, words: Sequence[str]) -> List[int]:
        return [self.id(w) for w in words]

    def save(self, path: Union[str, Path]) -> None:
        write_json({"words": self.words}, path)

    @classmethod
    def load(cls, path: Union[str, Path], producer: Optional[str] = None) -> "Vocabulary":
        data = read_json(path, producer=producer)
        words = data.get("words", []) if isinstance(data, dict) else []
        if list(words[:len(cls.SPECIALS)]) != list(cls.SPECIALS):
            raise DataFormatError(f"{path}: vocabulary does not start with the special tokens")
        vocab = cls()
        vocab.words = list(words)
        vocab.word_to_id = {w: i for i, w in enumerate(vocab.words)}
        return vocab


def element_words(kind: str, payload: Union[str, int]) -> Tuple[str, ...]:
    """Name words of a schema element: `employee.department_id` -> employee, department, id"""
    if kind == "val":
        return (str(payload).lower(),)
    return tuple(p for p in re.split(r"[._\s]+", str(payload).lower()) if p)


@dataclass(frozen=True)
class SchemaElement:
    kind: str
    payload: Union[str, int]

    @property
    def words(self) -> Tuple[str, ...]:
        return element_words(self.kind, self.payload)

    @property
    def segment(self) -> int:
        return _KIND_SEGMENT[self.kind]

    def leaf(self) -> QueryTree:
        if self.kind == "tab":
            return table_leaf(self.payload)
        if self.kind == "col":
            return column_leaf(self.payload)
        return value_leaf(self.payload)


def literal_values(tokens: Sequence[str], schema: Schema, db: Database) -> List[Union[int, str]]:
    """DB values mentioned verbatim in the utterance, in utterance order"""
    found: List[Union[int, str]] = []
    seen = set()
    for token in tokens:
        for column in schema.qualified_columns():
            if schema.column_type(column) == INT:
                if not re.fullmatch(r"-?\d+", token):
                    continue
                candidate: Union[int, str] = int(token)
            else:
                candidate = token
            key = (type(candidate).__name__, candidate)
            if key in seen:
                continue
            if candidate in db.column_values(column):
                seen.add(key)
                found.append(candidate)
    return found


def schema_elements(tokens: Sequence[str], schema: Schema, db: Database,
                    sample_per_column: int = 0, sample_key: str = "", seed: int = 0) -> List[SchemaElement]:
    """
    Leaf candidates for one utterance: tables, qualified columns, then values.

    Values are the literals matched in the utterance plus `sample_per_column`
    seeded samples from each text column.
    """
    elements = [SchemaElement("tab", t) for t in schema.table_names()]
    elements += [SchemaElement("col", c) for c in schema.qualified_columns()]
    values = literal_values(tokens, schema, db)
    if sample_per_column > 0:
        rng = np.random.default_rng([seed, zlib.crc32(sample_key.encode("utf-8"))])
        for column in schema.qualified_columns():
            if schema.column_type(column) == INT:
                continue
            pool = sorted(set(db.column_values(column)))
            for idx in rng.permutation(len(pool))[:sample_per_column]:
                if pool[int(idx)] not in values:
                    values.append(pool[int(idx)])
    elements += [SchemaElement("val", v) for v in values]
    return elements


@dataclass
class EncodedInput:
    token_vecs: Tensor
    schema_vecs: Tensor
    pooled: Tensor
    tokens: List[str]
    elements: List[SchemaElement]
    cases_used: int = 0

    @property
    def dim(self) -> int:
        return self.pooled.shape[-1]

    def element_index(self, leaf: QueryTree) -> Optional[int]:
        for idx, element in enumerate(self.elements):
            if element.kind == leaf.op and element.payload == leaf.payload \
                    and type(element.payload) is type(leaf.payload):
                return idx
        return None


class JointEncoder(Module):
    """Word, segment and (token-only) position embeddings, then L transformer blocks"""

    def __init__(self, vocab: Vocabulary, dim: int, heads: int, ff_dim: int, blocks: int,
                 max_tokens: int, rng: np.random.Generator):
        self.vocab = vocab
        self.dim = dim
        self.max_tokens = max_tokens
        self.word_embedding = Embedding(len(vocab), dim, rng)
        self.segment_embedding = Embedding(5, dim, rng)
        self.position_embedding = Embedding(max_tokens, dim, rng)
        self.blocks = TransformerStack(blocks, dim, heads, ff_dim, rng)

    def _embed_sequence(self, ids: Sequence[int], segments: Sequence[int]) -> Tensor:
        n = len(ids)
        if n > self.max_tokens:
            raise DimensionError(f"{n} tokens exceed the position table of {self.max_tokens}")
        return (self.word_embedding(ids) + self.segment_embedding(segments)
                + self.position_embedding(np.arange(n)))

    def _embed_elements(self, elements: Sequence[SchemaElement]) -> Tensor:
        """Mean of each element's word embeddings plus its segment embedding"""
        flat: List[int] = []
        spans: List[Tuple[int, int]] = []
        for element in elements:
            ids = self.vocab.ids(element.words) or [self.vocab.unk_id]
            spans.append((len(flat), len(ids)))
            flat.extend(ids)
        averaging = np.zeros((len(elements), len(flat)))
        for row, (start, count) in enumerate(spans):
            averaging[row, start:start + count] = 1.0 / count
        words = matmul(as_tensor(averaging), self.word_embedding(flat))
        return words + self.segment_embedding([e.segment for e in elements])

    def encode(self, tokens: Sequence[str], elements: Sequence[SchemaElement]) -> EncodedInput:
        """Encode an utterance against its schema elements"""
        return self.encode_with_cases(tokens, elements, ())

    def encode_with_cases(self, tokens: Sequence[str], elements: Sequence[SchemaElement],
                          cases: Sequence[Tuple[Sequence[str], QueryTree]]) -> EncodedInput:
        """
        Encode with retrieved cases appended as `<sep> case tokens <sep> tree tokens`.

        Cases are expected best-first; when the token sequence would not fit,
        cases are dropped from the end. Token vectors cover the utterance only.
        """
        if not tokens:
            raise DataFormatError("cannot encode an empty utterance")
        if not elements:
            raise DataFormatError("cannot encode against an empty schema")
        n = len(tokens)
        cases = list(cases)
        pieces = [self._case_tokens(c) for c in cases]
        while pieces and n + sum(len(p) for p in pieces) > self.max_tokens:
            pieces.pop()
            logger.warning(f"Case concatenation exceeds {self.max_tokens} tokens; dropped the lowest-ranked case")
        sequence = list(tokens) + [w for p in pieces for w in p]
        ids = self.vocab.ids(sequence)
        segments = [SEG_SEP if w == SEP else SEG_TOKEN for w in sequence]
        token_part = self._embed_sequence(ids, segments)
        schema_part = self._embed_elements(elements)
        out = self.blocks(concat([token_part, schema_part], axis=0))
        token_vecs = out[:n]
        schema_vecs = out[len(sequence):]
        return EncodedInput(token_vecs=token_vecs, schema_vecs=schema_vecs, pooled=mean_pool(token_vecs),
                            tokens=list(tokens), elements=list(elements), cases_used=len(pieces))

    @staticmethod
    def _case_tokens(case: Tuple[Sequence[str], QueryTree]) -> List[str]:
        utterance, tree = case
        return [SEP] + list(utterance) + [SEP] + tree_tokens(tree)
