import math

import numpy as np
import pytest

from core.grammar import NULL_TREE, SYMBOL_IDS, balance_tree
from model.autodiff import as_tensor, log_softmax, no_grad
from model.structcbr import (
    CaseMemory, CbrModule, RepresentationCounter, StructCbrBooster, WholeTreeBooster, adapt, build_memory,
    fuse, fused_log_prob, loss_phi, parameter_overhead, score_phi, sim_comp, sim_whole,
)
from utils.error_handler import ContractViolation, DimensionError


class ViewCollector:
    def __init__(self):
        self.views = []

    def rescore(self, view):
        self.views.append(view)
        return view.p_theta


@pytest.fixture
def cbr(small_parser):
    return CbrModule.from_config(small_parser.decoder, small_parser.config, seed=5)


@pytest.fixture
def heldout(small_corpus):
    return small_corpus.for_schema(small_corpus.heldout_schema_ids[0])


def _views(parser, example, corpus):
    collector = ViewCollector()
    encoded = parser.encode(example, corpus)
    with no_grad():
        parser.decoder.run(encoded, parser.config.beam_size, parser.config.max_height, booster=collector)
    return collector.views


def test_joint_rep_shape_and_checks(cbr, small_parser):
    d = small_parser.config.hidden_size
    z = as_tensor(np.ones((3, d)))
    pooled = as_tensor(np.zeros(d))
    reps = cbr.joint_rep(z, z, [SYMBOL_IDS["select"]] * 3, pooled)
    assert reps.shape == (3, d)
    with pytest.raises(DimensionError):
        cbr.joint_rep(z, z, [SYMBOL_IDS["select"]] * 2, pooled)


def test_shared_op_embedding_adds_no_parameters(small_parser):
    shared = CbrModule.from_config(small_parser.decoder, small_parser.config, seed=1)
    assert not any("op_embedding" in name for name in shared.named_parameters())
    assert 0.0 < parameter_overhead(shared, small_parser) < 1.0


def test_memory_has_one_entry_per_balanced_node(cbr, small_parser, small_corpus, heldout):
    cases = heldout[:3]
    memory = build_memory(cbr, small_parser, cases, small_corpus)
    expected = sum(balance_tree(ex.gold, small_parser.config.max_height).size for ex in cases)
    assert len(memory) == expected
    for op, table in memory.tables.items():
        entries = [memory.entries[i] for i in table.entries]
        assert all(e.root_op == op for e in entries)
        assert (table.right is None) == (not entries[0].is_binary)
    assert {e.case_id for e in memory.entries} == {ex.example_id for ex in cases}


def test_build_memory_leaves_parameters_alone(cbr, small_parser, small_corpus, heldout):
    before = cbr.snapshot(small_parser)
    build_memory(cbr, small_parser, heldout[:2], small_corpus)
    assert cbr.snapshot(small_parser) == before


def test_stale_memory_is_rejected(cbr, small_parser, small_corpus, heldout):
    memory = build_memory(cbr, small_parser, heldout[:2], small_corpus)
    adapt(cbr, small_parser, heldout[:2], small_corpus, memory=memory)
    cbr.null_rep.data[0] += 1.0
    with pytest.raises(ContractViolation):
        adapt(cbr, small_parser, heldout[:2], small_corpus, memory=memory)
    with pytest.raises(ContractViolation):
        CaseMemory.from_dict(memory.to_dict(), cbr.snapshot(small_parser))


def test_memory_dict_round_trip(cbr, small_parser, small_corpus, heldout):
    memory = build_memory(cbr, small_parser, heldout[:2], small_corpus)
    restored = CaseMemory.from_dict(memory.to_dict(), memory.snapshot)
    assert len(restored) == len(memory)
    assert np.allclose(restored.reps.data, memory.reps.data)
    assert [e.subtree for e in restored.entries] == [e.subtree for e in memory.entries]


def test_similarities():
    a, b = np.array([0.0, 3.0]), np.array([4.0, 0.0])
    assert sim_whole(a, b) == -5.0
    assert sim_whole(a, a) == 0.0
    with pytest.raises(DimensionError):
        sim_whole(a, np.zeros(3))


def test_sim_comp_requires_matching_operator(cbr, small_parser, small_corpus, heldout):
    memory = build_memory(cbr, small_parser, heldout[:2], small_corpus)
    idx = next(i for i, e in enumerate(memory.entries) if e.is_binary)
    entry = memory.entries[idx]
    _, left, right = memory.entry_vectors(idx)
    assert sim_comp(entry.root_op, left, right, memory, idx) == pytest.approx(0.0)
    other = SYMBOL_IDS["union"] if entry.root_op != SYMBOL_IDS["union"] else SYMBOL_IDS["select"]
    with pytest.raises(ContractViolation):
        sim_comp(other, left, right, memory, idx)


def test_fuse_and_fused_log_prob():
    p_theta = np.array([0.5, 0.5, 0.0])
    p_phi = np.array([0.0, 0.25, 0.75])
    assert np.allclose(fuse(p_theta, p_phi), [0.25, 0.375, 0.375])
    assert fuse(p_theta, None) is not None and np.allclose(fuse(p_theta, None), p_theta)
    with pytest.raises(DimensionError):
        fuse(p_theta, np.ones(2))
    lt = log_softmax(as_tensor(np.log([0.5, 0.5, 1e-300])))
    lp = log_softmax(as_tensor(np.log([1e-300, 0.25, 0.75])))
    assert fused_log_prob(lt, lp, 1).data == pytest.approx(math.log(0.375))


def test_node_step_scores_match_compositional_logsumexp(cbr, small_parser, small_corpus, heldout):
    memory = build_memory(cbr, small_parser, heldout[:3], small_corpus)
    view = _views(small_parser, heldout[5], small_corpus)[2]
    with no_grad():
        phi = score_phi(cbr, small_parser.decoder, view, memory)
        beam = view.beam
        ops = [t.op_id if t is not NULL_TREE else SYMBOL_IDS["null"] for t in beam.trees]
        reps = cbr.joint_rep(beam.z, beam.zc, ops, view.encoded.pooled).data
    rows = [reps[i] if t is not NULL_TREE else cbr.null_rep.data for i, t in enumerate(beam.trees)]
    frontier = view.frontier
    checked = 0
    for slot in np.flatnonzero(frontier.mask):
        op = int(frontier.ops[slot])
        table = memory.table(op)
        if table is None:
            assert phi.s_phi.data[slot] == -np.inf
            continue
        l, r = int(frontier.left[slot]), int(frontier.right[slot])
        sims = [sim_comp(op, rows[l], rows[r] if r >= 0 else None, memory, e) for e in table.entries]
        expected = np.logaddexp.reduce(sims)
        assert phi.s_phi.data[slot] == pytest.approx(expected, rel=1e-6, abs=1e-9)
        checked += 1
    assert checked > 0
    assert np.all(phi.s_phi.data[~frontier.mask] == -np.inf)
    assert phi.p_phi.sum() == pytest.approx(1.0)


def test_empty_memory_falls_back_to_parser(cbr, small_parser, small_corpus, heldout):
    memory = build_memory(cbr, small_parser, [], small_corpus)
    assert len(memory) == 0
    booster = adapt(cbr, small_parser, [], small_corpus, memory=memory)
    encoded = small_parser.encode(heldout[0], small_corpus)
    plain, _ = small_parser.decode(encoded)
    boosted, _ = small_parser.decode(encoded, booster=booster)
    assert [d.tree for d in plain] == [d.tree for d in boosted]
    assert [d.prob for d in plain] == pytest.approx([d.prob for d in boosted])


def test_representation_count_is_beam_plus_one(cbr, small_parser, small_corpus, heldout):
    counter = RepresentationCounter()
    memory = build_memory(cbr, small_parser, heldout[:3], small_corpus)
    booster = StructCbrBooster(cbr, small_parser.decoder, memory, counter=counter)
    small_parser.decode(small_parser.encode(heldout[6], small_corpus), booster=booster)
    assert counter.mean_per_step() == small_parser.config.beam_size + 1
    assert set(counter.per_step) == set(range(small_parser.config.max_height + 1))


def test_whole_tree_ablation_prunes_candidates(cbr, small_parser, small_corpus, heldout):
    counter = RepresentationCounter()
    memory = build_memory(cbr, small_parser, heldout[:3], small_corpus)
    booster = WholeTreeBooster(cbr, small_parser.decoder, memory, small_parser.config.beam_size,
                               prune_factor=2, counter=counter)
    ranked, _ = small_parser.decode(small_parser.encode(heldout[6], small_corpus), booster=booster)
    assert ranked
    assert all(rows <= 2 * small_parser.config.beam_size for per in counter.per_step.values() for rows in per)


def test_boosted_decode_keeps_distribution_normalized(cbr, small_parser, small_corpus, heldout):
    memory = build_memory(cbr, small_parser, heldout[:3], small_corpus)
    booster = StructCbrBooster(cbr, small_parser.decoder, memory)
    for view in _views(small_parser, heldout[7], small_corpus)[1:3]:
        p = booster.rescore(view)
        assert p.sum() == pytest.approx(1.0)
        assert np.all(p[~view.frontier.mask] == 0.0)


def test_loss_phi_trains_only_phi(cbr, small_parser, small_corpus):
    train = small_corpus.for_schema(small_corpus.train_schema_ids[0])
    group = [ex for ex in train if ex.split == "train"][:3]
    theta_before = small_parser.parameter_hash()
    small_parser.zero_grad()
    cbr.zero_grad()
    loss, count = loss_phi(cbr, small_parser, group, small_corpus)
    assert count == 3
    assert np.isfinite(loss.data) and float(loss.data) > 0.0
    loss.backward()
    assert any(p.grad is not None and np.any(p.grad != 0) for p in cbr.named_parameters().values())
    assert all(p.grad is None for p in small_parser.named_parameters().values())
    assert small_parser.parameter_hash() == theta_before


def test_loss_phi_skips_singleton_groups(cbr, small_parser, small_corpus, heldout):
    loss, count = loss_phi(cbr, small_parser, heldout[:1], small_corpus)
    assert count == 0 and float(loss.data) == 0.0


def test_cbr_save_load_round_trip(tmp_path, cbr, small_parser):
    path = tmp_path / "phi.json"
    cbr.save(str(path))
    loaded = CbrModule.load(str(path), small_parser.decoder, small_parser.config)
    assert loaded.snapshot(small_parser) == cbr.snapshot(small_parser)
