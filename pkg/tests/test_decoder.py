import numpy as np
import pytest

from core.grammar import (
    NULL_TREE, SYMBOL_IDS, T_QUERY, OperatorVocab, balance_tree, collapse_keep, enumerate_subtrees, tree_type,
)
from model.decoder import SmbopDecoder, frontier_index, frontier_layout, top_k
from utils.error_handler import ContractViolation, DimensionError


class RecordingBooster:
    """Passes p_theta through and remembers what it saw"""

    def __init__(self):
        self.steps = []
        self.sizes = []

    def rescore(self, view):
        self.steps.append(view.step)
        self.sizes.append(view.frontier.size)
        return view.p_theta


class ShortBooster:
    def rescore(self, view):
        return view.p_theta[:-1]


def _train_example(corpus):
    return corpus.by_split("train")[0]


def test_frontier_layout_blocks_and_index():
    vocab = OperatorVocab.default()
    k = 3
    ops, left, right = frontier_layout(k, vocab.unary_ops, vocab.binary_ops)
    assert len(ops) == vocab.frontier_size(k)
    u = len(vocab.unary_ops)
    assert np.all(right[:u * k] == -1)
    assert np.all(right[u * k:] >= 0)
    for op in (SYMBOL_IDS["keep"], SYMBOL_IDS["count"]):
        for l in range(k):
            slot = frontier_index(vocab, k, op, l)
            assert (ops[slot], left[slot], right[slot]) == (op, l, -1)
    for op in (SYMBOL_IDS["select"], SYMBOL_IDS["except"]):
        for l in range(k):
            for r in range(k):
                slot = frontier_index(vocab, k, op, l, r)
                assert (ops[slot], left[slot], right[slot]) == (op, l, r)


def test_frontier_layout_is_read_only():
    vocab = OperatorVocab.default()
    ops, _, _ = frontier_layout(2, vocab.unary_ops, vocab.binary_ops)
    with pytest.raises(ValueError):
        ops[0] = 5


def test_top_k_prefers_probability_then_lower_index():
    p = np.array([0.2, 0.3, 0.3, 0.1, 0.1])
    admissible = np.array([True, True, True, False, True])
    assert top_k(p, admissible, 3) == [1, 2, 0]
    assert top_k(p, admissible, 10) == [1, 2, 0, 4]
    assert top_k(p, np.zeros(5, dtype=bool), 2) == []


def test_force_gold_evicts_lowest_non_gold():
    p = np.array([0.5, 0.3, 0.1, 0.05, 0.05])
    chosen = SmbopDecoder.force_gold([0, 1, 2], [4], p, 3)
    assert sorted(chosen) == [0, 1, 4]
    assert SmbopDecoder.force_gold([0, 1], [3], p, 3) == [0, 1, 3]
    with pytest.raises(ContractViolation):
        SmbopDecoder.force_gold([0, 1], [2, 3, 4], p, 2)


def test_leaf_frontier_covers_every_schema_element(small_parser, small_corpus):
    example = _train_example(small_corpus)
    encoded = small_parser.encode(example, small_corpus)
    frontier = small_parser.decoder.leaf_frontier(encoded)
    assert frontier.size == len(encoded.elements)
    assert frontier.is_leaf_step
    assert frontier.mask.all()


def test_beam_run_shapes_and_balance(small_parser, small_corpus):
    cfg = small_parser.config
    example = _train_example(small_corpus)
    encoded = small_parser.encode(example, small_corpus)
    booster = RecordingBooster()
    run = small_parser.decoder.run(encoded, cfg.beam_size, cfg.max_height, booster=booster, theta_grad=False)
    assert len(run.beams) == cfg.max_height + 1
    assert booster.steps == list(range(cfg.max_height + 1))
    frontier_size = small_parser.decoder.vocab.frontier_size(cfg.beam_size)
    assert booster.sizes[1:] == [frontier_size] * cfg.max_height
    for step, beam in enumerate(run.beams):
        assert beam.size == cfg.beam_size
        for tree, score in zip(beam.trees, beam.scores):
            if tree is NULL_TREE:
                assert score == -np.inf
            else:
                assert tree.height == step
    for tree in run.beams[-1].trees:
        if tree is not NULL_TREE:
            assert tree_type(tree) == T_QUERY


def test_decode_ranks_and_is_deterministic(small_parser, small_corpus):
    example = _train_example(small_corpus)
    encoded = small_parser.encode(example, small_corpus)
    ranked, trace = small_parser.decode(encoded, trace=True)
    again, _ = small_parser.decode(encoded)
    assert [d.tree for d in ranked] == [d.tree for d in again]
    probs = [d.prob for d in ranked]
    assert probs == sorted(probs, reverse=True)
    assert len(ranked) <= small_parser.config.beam_size
    assert all(d.tree == collapse_keep(d.tree) for d in ranked)
    assert len(trace) == small_parser.config.max_height + 1
    assert trace[0]["step"] == 0 and "trees" in trace[-1]


def test_booster_length_is_checked(small_parser, small_corpus):
    example = _train_example(small_corpus)
    encoded = small_parser.encode(example, small_corpus)
    with pytest.raises(DimensionError):
        small_parser.decode(encoded, booster=ShortBooster())


def test_teacher_forcing_keeps_gold_in_every_beam(small_parser, small_corpus):
    cfg = small_parser.config
    example = _train_example(small_corpus)
    encoded = small_parser.encode(example, small_corpus, include_gold=True)
    run = small_parser.decoder.run(encoded, cfg.beam_size, cfg.max_height, gold=example.gold, collect_loss=True)
    balanced = balance_tree(example.gold, cfg.max_height)
    assert balanced in run.beams[-1].trees
    assert len(run.loss_terms) >= cfg.max_height + 1


def test_loss_theta_is_finite_and_reaches_parameters(small_parser, small_corpus):
    example = _train_example(small_corpus)
    small_parser.zero_grad()
    loss = small_parser.loss(example, small_corpus)
    assert np.isfinite(loss.data) and float(loss.data) > 0.0
    loss.backward()
    params = small_parser.named_parameters()
    assert params["decoder.score_ff.inner.weight"].grad is not None
    assert params["encoder.word_embedding.table"].grad is not None


def test_gold_slots_reject_missing_leaf(small_parser, small_corpus):
    cfg = small_parser.config
    example = next(ex for ex in small_corpus.examples if any(s.op == "val" for s in enumerate_subtrees(ex.gold)))
    schema = small_corpus.schemas[example.schema_id]
    db = small_corpus.databases[example.schema_id]
    elements = [e for e in small_parser.elements_for(example, schema, db) if e.kind != "val"]
    encoded = small_parser.encoder.encode(example.tokens, elements)
    with pytest.raises(ContractViolation):
        small_parser.decoder.run(encoded, cfg.beam_size, cfg.max_height, gold=example.gold)


def test_encode_tree_nodes_covers_distinct_subtrees(small_parser, small_corpus):
    cfg = small_parser.config
    example = _train_example(small_corpus)
    encoded = small_parser.encode(example, small_corpus, include_gold=True)
    balanced = balance_tree(example.gold, cfg.max_height)
    reps = small_parser.decoder.encode_tree_nodes(encoded, balanced)
    assert balanced in reps
    z, zc = reps[balanced]
    assert z.shape == (cfg.hidden_size,) and zc.shape == (cfg.hidden_size,)
