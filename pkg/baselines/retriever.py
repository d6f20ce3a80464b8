"""
Case Retriever
Mean-pooled sentence embeddings trained so that cosine similarity between
utterances follows the structural similarity of their queries, and a flat
index for cosine retrieval over train examples plus adaptation cases.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.grammar import QueryTree, parse_sexpr, to_sexpr, tree_edit_distance
from data.schema import Example
from model.autodiff import Tensor, log_softmax, matmul, mean_pool, no_grad, sqrt, stack, tsum
from model.encoder import Vocabulary
from model.layers import Embedding, Module
from utils.checkpoint import load_parameters, read_checkpoint, save_parameters
from utils.error_handler import DataFormatError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12


class SentenceEncoder(Module):
    """E(x) = mean of token embeddings"""

    def __init__(self, vocab: Vocabulary, dim: int, rng: np.random.Generator):
        self.vocab = vocab
        self.dim = dim
        self.embedding = Embedding(len(vocab), dim, rng)

    def __call__(self, tokens: Sequence[str]) -> Tensor:
        if not tokens:
            raise DataFormatError("cannot embed an empty utterance")
        return mean_pool(self.embedding(self.vocab.ids(tokens)))

    def embed_many(self, sentences: Sequence[Sequence[str]]) -> Tensor:
        return stack([self(tokens) for tokens in sentences], axis=0)

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> str:
        header = {"dim": self.dim}
        header.update(meta or {})
        return save_parameters(path, self.named_parameters(), header)

    @classmethod
    def load(cls, path: str, vocab: Vocabulary, producer: str = "train-baselines") -> "SentenceEncoder":
        header = read_checkpoint(path, producer=producer).get("meta", {})
        encoder = cls(vocab, int(header.get("dim", 64)), np.random.default_rng(0))
        load_parameters(path, encoder.named_parameters(), producer=producer)
        return encoder


def cosine_rows(anchor: Tensor, others: Tensor) -> Tensor:
    """cos(anchor, others[j]) for every row j"""
    dots = matmul(others, anchor)
    norms = sqrt(tsum(others * others, axis=-1) * tsum(anchor * anchor) + COSINE_EPS)
    return dots / norms


def ted_weights(anchor: QueryTree, partners: Sequence[QueryTree]) -> np.ndarray:
    """w_j = softmax_j(1 - 2 * TED(anchor, partner_j))"""
    logits = np.asarray([1.0 - 2.0 * tree_edit_distance(anchor, q) for q in partners], dtype=np.float64)
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def retriever_loss(encoder: SentenceEncoder, anchor: Sequence[str], partners: Sequence[Sequence[str]],
                   weights: np.ndarray) -> Tensor:
    """-sum_j w_j log softmax_j(cos(E(anchor), E(partner_j)))"""
    anchor_vec = encoder(anchor)
    partner_vecs = encoder.embed_many(partners)
    log_probs = log_softmax(cosine_rows(anchor_vec, partner_vecs), axis=-1)
    return -tsum(log_probs * np.asarray(weights, dtype=np.float64))


@dataclass(frozen=True)
class IndexedCase:
    example_id: str
    schema_id: str
    tokens: Tuple[str, ...]
    tree: QueryTree


class RetrievalIndex:
    """Cosine index over utterance embeddings; read-only once built"""

    def __init__(self, items: Sequence[IndexedCase], vectors: np.ndarray):
        self.items = list(items)
        self.vectors = np.asarray(vectors, dtype=np.float64).reshape(len(self.items), -1)
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        self._unit = self.vectors / np.where(norms > 0, norms, 1.0)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def build(cls, encoder: SentenceEncoder, examples: Sequence[Example]) -> "RetrievalIndex":
        items = [IndexedCase(ex.example_id, ex.schema_id, tuple(ex.tokens), ex.gold) for ex in examples]
        if not items:
            return cls([], np.zeros((0, encoder.dim)))
        with no_grad():
            vectors = encoder.embed_many([it.tokens for it in items]).data
        return cls(items, vectors)

    def extended(self, encoder: SentenceEncoder, examples: Sequence[Example]) -> "RetrievalIndex":
        """Index with adaptation cases added; the original is left unchanged"""
        extra = RetrievalIndex.build(encoder, examples)
        if len(self) == 0:
            return extra
        return RetrievalIndex(self.items + extra.items, np.concatenate([self.vectors, extra.vectors], axis=0))

    def retrieve(self, encoder: SentenceEncoder, tokens: Sequence[str], top_r: int,
                 exclude_id: Optional[str] = None) -> List[Tuple[IndexedCase, float]]:
        """Top-r items by cosine, ties broken by index order"""
        if len(self) == 0 or top_r <= 0:
            return []
        with no_grad():
            query = encoder(tokens).data
        norm = np.linalg.norm(query)
        scores = self._unit @ (query / norm if norm > 0 else query)
        order = np.lexsort((np.arange(len(scores)), -scores))
        out = []
        for idx in order:
            item = self.items[int(idx)]
            if exclude_id is not None and item.example_id == exclude_id:
                continue
            out.append((item, float(scores[int(idx)])))
            if len(out) == top_r:
                break
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "items": [{"id": it.example_id, "schema_id": it.schema_id, "tokens": list(it.tokens),
                       "query": to_sexpr(it.tree)} for it in self.items],
            "vectors": [[float(x) for x in row] for row in self.vectors],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RetrievalIndex":
        items = [IndexedCase(d["id"], d["schema_id"], tuple(d["tokens"]), parse_sexpr(d["query"]))
                 for d in data.get("items", [])]
        return cls(items, np.asarray(data.get("vectors", []), dtype=np.float64))
