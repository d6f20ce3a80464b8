import numpy as np
import pytest

from core.grammar import SYMBOL_IDS, balance_tree, enumerate_subtrees
from baselines.gtm import GtmBooster, GtmMemory, _neighbour_mass, gtm_build, gtm_score, knn_distribution
from model.autodiff import no_grad
from utils.error_handler import ContractViolation, DimensionError


class ViewCollector:
    def __init__(self):
        self.views = []

    def rescore(self, view):
        self.views.append(view)
        return view.p_theta


@pytest.fixture
def heldout(small_corpus):
    return small_corpus.for_schema(small_corpus.heldout_schema_ids[0])


def _views(parser, example, corpus):
    collector = ViewCollector()
    with no_grad():
        parser.decoder.run(parser.encode(example, corpus), parser.config.beam_size, parser.config.max_height,
                           booster=collector)
    return collector.views


def test_memory_has_one_record_per_internal_node(small_parser, small_corpus, heldout):
    cases = heldout[:3]
    memory = gtm_build(small_parser, cases, small_corpus)
    height = small_parser.config.max_height
    internal = sum(1 for ex in cases for s in enumerate_subtrees(balance_tree(ex.gold, height)) if not s.is_leaf)
    assert len(memory) == internal
    assert memory.keys.shape == (internal, 4 * small_parser.config.hidden_size)
    assert memory.snapshot == small_parser.parameter_hash()


def test_memory_round_trip_and_snapshot_check(small_parser, small_corpus, heldout):
    memory = gtm_build(small_parser, heldout[:2], small_corpus)
    restored = GtmMemory.from_dict(memory.to_dict(), memory.snapshot)
    assert np.allclose(restored.keys, memory.keys)
    assert list(restored.values) == list(memory.values)
    with pytest.raises(ContractViolation):
        GtmMemory.from_dict(memory.to_dict(), "other")
    with pytest.raises(DimensionError):
        GtmMemory(np.zeros((2, 4)), [1])


def test_neighbour_mass_uses_k_nearest():
    dist_sq = np.array([[0.0, 1.0, 4.0, 9.0]])
    values = np.array([1, 2, 1, 2])
    mass = _neighbour_mass(dist_sq, values, [1, 2], k=2, tau=1.0)
    assert mass[1][0] == pytest.approx(1.0)
    assert mass[2][0] == pytest.approx(np.exp(-1.0))
    wide = _neighbour_mass(dist_sq, values, [1, 2], k=10, tau=1.0)
    assert wide[1][0] == pytest.approx(1.0 + np.exp(-2.0))


def test_knn_distribution_is_normalized_over_admissible(small_parser, small_corpus, heldout):
    memory = gtm_build(small_parser, heldout[:3], small_corpus)
    views = _views(small_parser, heldout[5], small_corpus)
    assert knn_distribution(views[0], small_parser.decoder, memory, 4, 10.0) is None
    p_knn = knn_distribution(views[1], small_parser.decoder, memory, 4, 10.0)
    assert p_knn is not None
    assert p_knn.sum() == pytest.approx(1.0)
    assert np.all(p_knn[~views[1].frontier.mask] == 0.0)


def test_lambda_interpolation(small_parser, small_corpus, heldout):
    memory = gtm_build(small_parser, heldout[:3], small_corpus)
    view = _views(small_parser, heldout[5], small_corpus)[1]
    decoder = small_parser.decoder
    assert np.array_equal(gtm_score(view, decoder, memory, 4, 10.0, 0.0), view.p_theta)
    p_knn = knn_distribution(view, decoder, memory, 4, 10.0)
    mixed = gtm_score(view, decoder, memory, 4, 10.0, 0.3)
    assert np.allclose(mixed, 0.7 * view.p_theta + 0.3 * p_knn)
    assert mixed.sum() == pytest.approx(1.0)


def test_empty_memory_is_the_base_parser(small_parser, small_corpus, heldout):
    memory = gtm_build(small_parser, [], small_corpus)
    encoded = small_parser.encode(heldout[0], small_corpus)
    plain, _ = small_parser.decode(encoded)
    boosted, _ = small_parser.decode(encoded, booster=GtmBooster(small_parser.decoder, memory, lam=0.5))
    assert [d.tree for d in plain] == [d.tree for d in boosted]


def test_gtm_has_no_trainable_state(small_parser, small_corpus, heldout):
    before = small_parser.parameter_hash()
    memory = gtm_build(small_parser, heldout[:2], small_corpus)
    small_parser.decode(small_parser.encode(heldout[4], small_corpus), booster=GtmBooster(small_parser.decoder, memory))
    assert small_parser.parameter_hash() == before
    assert set(memory.values.tolist()) <= set(SYMBOL_IDS.values())
