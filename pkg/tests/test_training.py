import numpy as np
import pytest

from baselines.retriever import SentenceEncoder
from core.training import (
    TrainingResult, finetune, finetune_updates, same_schema_groups, sample_partners, shuffled_batches, train_base,
    train_cbr, train_retriever,
)
from model.autodiff import parameter
from model.optim import Adam, applied_updates
from model.parser import TextToQueryParser, build_vocabulary
from model.structcbr import CbrModule
from utils.checkpoint import parameter_hash


def test_adam_moves_against_the_gradient_and_clips():
    w = parameter(np.array([1.0, -1.0]))
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.array([2.0, -2.0])
    opt.step()
    assert np.allclose(w.data, [0.9, -0.9])
    assert opt.steps == 1
    clipped = Adam({"w": w}, lr=0.1, clip_norm=1.0)
    w.grad = np.array([30.0, 40.0])
    assert clipped.grad_norm() == pytest.approx(50.0)
    clipped.step()
    assert np.all(np.isfinite(w.data))


def test_applied_updates_counts_steps_of_every_optimizer():
    before = applied_updates()
    a = parameter(np.array([1.0]))
    b = parameter(np.array([2.0]))
    first, second = Adam({"a": a}, lr=0.1), Adam({"b": b}, lr=0.1)
    a.grad = np.array([1.0])
    b.grad = np.array([1.0])
    first.step()
    second.step()
    second.step()
    assert applied_updates() - before == 3


def test_shuffled_batches_cover_every_item_each_pass():
    batches = shuffled_batches(list(range(5)), 2, np.random.default_rng(0))
    first_pass = [next(batches) for _ in range(3)]
    assert sorted(x for b in first_pass for x in b) == [0, 1, 2, 3, 4]
    assert [len(b) for b in first_pass] == [2, 2, 1]
    assert list(shuffled_batches([], 2, np.random.default_rng(0))) == []


def test_same_schema_groups_share_a_schema(small_corpus):
    train = small_corpus.by_split("train")
    groups = same_schema_groups(train, 4, np.random.default_rng(1))
    assert groups
    for group in groups:
        assert 2 <= len(group) <= 4
        assert len({ex.schema_id for ex in group}) == 1
    ids = [ex.example_id for g in groups for ex in g]
    assert len(ids) == len(set(ids))


def test_same_schema_groups_warn_about_a_leftover(small_corpus, caplog):
    train = small_corpus.by_split("train")
    schema_id = train[0].schema_id
    three = [ex for ex in train if ex.schema_id == schema_id][:3]
    assert len(three) == 3
    with caplog.at_level("WARNING", logger="core.training"):
        groups = same_schema_groups(three, 2, np.random.default_rng(0))
    assert [len(g) for g in groups] == [2]
    assert f"schema {schema_id}" in caplog.text


def test_sample_partners_excludes_anchor(small_corpus):
    pool = small_corpus.by_split("train")
    partners = sample_partners(pool[0], pool, 3, np.random.default_rng(2))
    assert len(partners) == 3 and pool[0] not in partners
    assert len(sample_partners(pool[0], pool[:2], 5, np.random.default_rng(2))) == 1


def test_finetune_update_count():
    assert finetune_updates(2, 5, 2) == 6
    assert finetune_updates(3, 0, 8) == 0


def test_training_result_summary():
    result = TrainingResult("x", updates=2, losses=[3.0, 1.0])
    assert result.final_loss == 1.0
    assert result.to_dict()["mean_loss_last10"] == pytest.approx(2.0)
    assert TrainingResult("y").to_dict()["final_loss"] is None


def test_train_base_applies_updates(small_parser, small_corpus):
    before = small_parser.parameter_hash()
    result = train_base(small_parser, small_corpus, small_corpus.by_split("train")[:4], steps=2, batch_size=2,
                        lr=1e-2, seed=0, grad_clip=5.0)
    assert result.updates == 2 and len(result.losses) == 2
    assert small_parser.parameter_hash() != before


def test_train_cbr_keeps_parser_frozen(small_parser, small_corpus):
    cbr = CbrModule.from_config(small_parser.decoder, small_parser.config, seed=3)
    theta = small_parser.parameter_hash()
    phi = parameter_hash(cbr.named_parameters())
    result = train_cbr(cbr, small_parser, small_corpus, small_corpus.by_split("train"), steps=1, batch_size=4,
                       group_size=2, lr=1e-2, seed=0)
    assert result.updates == 1
    assert small_parser.parameter_hash() == theta
    assert parameter_hash(cbr.named_parameters()) != phi


def test_train_retriever_updates_embeddings(small_corpus):
    encoder = SentenceEncoder(build_vocabulary(small_corpus), 8, np.random.default_rng(0))
    before = parameter_hash(encoder.named_parameters())
    result = train_retriever(encoder, small_corpus.by_split("train"), steps=2, batch_size=3, partners=4,
                             lr=1e-2, seed=0)
    assert result.updates == 2
    assert parameter_hash(encoder.named_parameters()) != before


def test_finetune_changes_only_the_copy(small_parser, small_corpus):
    cases = small_corpus.for_schema(small_corpus.heldout_schema_ids[0])[:3]
    original = small_parser.parameter_hash()
    tuned = small_parser.copy()
    assert tuned.parameter_hash() == original
    result = finetune(tuned, small_corpus, cases, epochs=1, batch_size=2, lr=1e-2, seed=0)
    assert result.updates == 2
    assert tuned.parameter_hash() != original
    assert small_parser.parameter_hash() == original


def test_parser_save_load_round_trip(tmp_path, small_parser):
    digest = small_parser.save(tmp_path / "base.json", tmp_path / "vocab.json")
    loaded = TextToQueryParser.load(tmp_path / "base.json", tmp_path / "vocab.json")
    assert loaded.parameter_hash() == digest == small_parser.parameter_hash()
    assert loaded.config == small_parser.config
