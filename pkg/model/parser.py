"""
Text-to-Query Parser
Bundles the vocabulary, the joint encoder and the bottom-up decoder (the
theta bank) and prepares per-example schema candidates.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.config_loader import ModelConfig
from core.grammar import SYMBOLS, QueryTree, enumerate_subtrees, tree_tokens
from data.dataset_io import Corpus
from data.schema import Database, Example, Schema
from model.autodiff import Tensor, zero_grads
from model.decoder import DecodedTree, FrontierBooster, SmbopDecoder
from model.encoder import EncodedInput, JointEncoder, SchemaElement, Vocabulary, schema_elements
from utils.checkpoint import load_parameters, parameter_hash, read_checkpoint, save_parameters

logger = logging.getLogger(__name__)


def build_vocabulary(corpus: Corpus) -> Vocabulary:
    """Every word the model can meet: utterances, element names, linearized golds, operator names"""
    words = set(SYMBOLS)
    for example in corpus.examples:
        words.update(example.tokens)
        words.update(tree_tokens(example.gold))
    for schema_id, schema in corpus.schemas.items():
        db = corpus.databases[schema_id]
        for element in schema_elements([], schema, db):
            words.update(element.words)
        for column in schema.qualified_columns():
            words.update(str(v).lower() for v in db.column_values(column))
    return Vocabulary(words)


class TextToQueryParser:
    """The base parser; all of theta lives in `encoder` and `decoder`"""

    def __init__(self, vocab: Vocabulary, config: ModelConfig, seed: int, value_seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.config = config
        self.seed = seed
        self.value_seed = value_seed
        self.encoder = JointEncoder(vocab, config.hidden_size, config.attention_heads, config.feedforward_dim,
                                    config.encoder_blocks, config.max_tokens, rng)
        self.decoder = SmbopDecoder(config.hidden_size, config.attention_heads, config.feedforward_dim,
                                    config.tree_blocks, rng)

    def named_parameters(self) -> Dict[str, Tensor]:
        params = self.encoder.named_parameters("encoder.")
        params.update(self.decoder.named_parameters("decoder."))
        return params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def parameter_hash(self) -> str:
        return parameter_hash(self.named_parameters())

    def zero_grad(self) -> None:
        zero_grads(self.named_parameters().values())

    # -- inputs -----------------------------------------------------------------

    def elements_for(self, example: Example, schema: Schema, db: Database,
                     include_gold: bool = False) -> List[SchemaElement]:
        """
        Leaf candidates of one example.

        With include_gold, gold leaves the literal matcher missed are appended
        so teacher forcing can always reach them (training only).
        """
        elements = schema_elements(example.tokens, schema, db, self.config.value_sample_per_column,
                                   sample_key=example.example_id, seed=self.value_seed)
        if include_gold:
            known = {(e.kind, type(e.payload), e.payload) for e in elements}
            for sub in enumerate_subtrees(example.gold):
                if sub.is_leaf:
                    key = (sub.op, type(sub.payload), sub.payload)
                    if key not in known:
                        known.add(key)
                        elements.append(SchemaElement(sub.op, sub.payload))
        return elements

    def encode(self, example: Example, corpus: Corpus, include_gold: bool = False,
               cases: Sequence[Tuple[Sequence[str], QueryTree]] = ()) -> EncodedInput:
        schema = corpus.schemas[example.schema_id]
        db = corpus.databases[example.schema_id]
        elements = self.elements_for(example, schema, db, include_gold)
        if cases:
            return self.encoder.encode_with_cases(example.tokens, elements, cases)
        return self.encoder.encode(example.tokens, elements)

    # -- decoding and loss ----------------------------------------------------------

    def decode(self, encoded: EncodedInput, booster: Optional[FrontierBooster] = None,
               trace: bool = False) -> Tuple[List[DecodedTree], List[Dict[str, Any]]]:
        return self.decoder.decode(encoded, self.config.beam_size, self.config.max_height, booster=booster,
                                   final_query_only=self.config.final_query_only, trace=trace)

    def loss(self, example: Example, corpus: Corpus,
             cases: Sequence[Tuple[Sequence[str], QueryTree]] = ()) -> Tensor:
        encoded = self.encode(example, corpus, include_gold=True, cases=cases)
        return self.decoder.loss_theta(encoded, example.gold, self.config.beam_size, self.config.max_height,
                                       final_query_only=self.config.final_query_only)

    # -- persistence ----------------------------------------------------------------

    def save(self, path: Union[str, Path], vocab_path: Union[str, Path], meta: Optional[Dict] = None) -> str:
        self.vocab.save(vocab_path)
        header = {"model": self.config.to_dict(), "seed": self.seed, "value_seed": self.value_seed,
                  "vocab": str(Path(vocab_path).name)}
        header.update(meta or {})
        return save_parameters(str(path), self.named_parameters(), header)

    @classmethod
    def load(cls, path: Union[str, Path], vocab_path: Union[str, Path],
             producer: str = "train-base") -> "TextToQueryParser":
        header = read_checkpoint(str(path), producer=producer).get("meta", {})
        vocab = Vocabulary.load(vocab_path, producer=producer)
        config = ModelConfig(**header.get("model", {}))
        parser = cls(vocab, config, int(header.get("seed", 0)), int(header.get("value_seed", 0)))
        load_parameters(str(path), parser.named_parameters(), producer=producer)
        logger.info(f"Loaded parser from {path} ({parser.num_parameters()} parameters)")
        return parser

    def copy(self) -> "TextToQueryParser":
        """Independent clone with identical parameter values"""
        clone = TextToQueryParser(self.vocab, self.config, self.seed, self.value_seed)
        source = self.named_parameters()
        for name, tensor in clone.named_parameters().items():
            tensor.data[...] = source[name].data
        return clone
