"""
ConcatCBR
Retrieved (utterance, query) cases are appended to the encoder input. The
parser is trained further this way; at adaptation time only the retrieval
index changes.
"""

import logging
from typing import List, Sequence, Tuple

from core.grammar import QueryTree
from data.dataset_io import Corpus
from data.schema import Example
from model.autodiff import Tensor, no_grad
from model.decoder import DecodedTree
from model.parser import TextToQueryParser
from baselines.retriever import RetrievalIndex, SentenceEncoder

logger = logging.getLogger(__name__)

Case = Tuple[List[str], QueryTree]


class ConcatCbrParser:
    """A parser whose input carries the top-r retrieved cases, best first"""

    def __init__(self, parser: TextToQueryParser, retriever: SentenceEncoder, index: RetrievalIndex,
                 top_r: int = 5):
        self.parser = parser
        self.retriever = retriever
        self.index = index
        self.top_r = top_r

    def cases_for(self, example: Example, exclude_self: bool = True) -> List[Case]:
        hits = self.index.retrieve(self.retriever, example.tokens, self.top_r,
                                   exclude_id=example.example_id if exclude_self else None)
        return [(list(item.tokens), item.tree) for item, _ in hits]

    def loss(self, example: Example, corpus: Corpus) -> Tensor:
        return self.parser.loss(example, corpus, cases=self.cases_for(example))

    def decode(self, example: Example, corpus: Corpus) -> List[DecodedTree]:
        with no_grad():
            encoded = self.parser.encode(example, corpus, cases=self.cases_for(example))
        ranked, _ = self.parser.decode(encoded)
        return ranked

    def adapted(self, cases: Sequence[Example]) -> "ConcatCbrParser":
        """Same parameters, index extended with the adaptation cases"""
        return ConcatCbrParser(self.parser, self.retriever, self.index.extended(self.retriever, cases), self.top_r)
