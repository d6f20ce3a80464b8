import json

import pytest

from core.grammar import T_QUERY, tree_type
from data.dataset_io import (
    Corpus, Prediction, SplitSpec, load_corpus, load_predictions, load_split, make_splits, read_jsonl,
    save_corpus, save_predictions, save_split,
)
from data.executor import execute
from data.generator import CorpusSettings, generate_corpus
from utils.error_handler import ConfigError, DataFormatError, DatasetIntegrityError, MissingArtifactError


def test_generation_is_deterministic(small_settings, small_corpus):
    again = generate_corpus(small_settings, seed=3)
    assert [ex.to_dict() for ex in again.examples] == [ex.to_dict() for ex in small_corpus.examples]
    other = generate_corpus(small_settings, seed=4)
    assert [ex.utterance for ex in other.examples] != [ex.utterance for ex in small_corpus.examples]


def test_generated_examples_are_usable(small_settings, small_corpus):
    assert len(small_corpus.train_schema_ids) == small_settings.train_schemas
    assert len(small_corpus.heldout_schema_ids) == small_settings.heldout_schemas
    for ex in small_corpus.examples:
        assert tree_type(ex.gold) == T_QUERY
        execute(ex.gold, small_corpus.databases[ex.schema_id])
        assert ex.example_id.startswith(ex.schema_id + "-")
    for sid in small_corpus.heldout_schema_ids:
        assert {ex.split for ex in small_corpus.for_schema(sid)} == {"heldout"}
        assert len(small_corpus.for_schema(sid)) == small_settings.heldout_examples
    train_splits = {ex.split for sid in small_corpus.train_schema_ids for ex in small_corpus.for_schema(sid)}
    assert train_splits <= {"train", "dev"} and "train" in train_splits


def test_generator_rejects_impossible_settings():
    with pytest.raises(ConfigError):
        generate_corpus(CorpusSettings(train_schemas=0), seed=0)
    with pytest.raises(ConfigError):
        generate_corpus(CorpusSettings(train_schemas=50, heldout_schemas=50), seed=0)


def test_corpus_round_trip(tmp_path, small_corpus):
    digest = save_corpus(tmp_path, small_corpus.schemas, small_corpus.databases, small_corpus.examples)
    loaded = load_corpus(tmp_path)
    assert [ex.to_dict() for ex in loaded.examples] == [ex.to_dict() for ex in small_corpus.examples]
    assert loaded.heldout_schema_ids == small_corpus.heldout_schema_ids
    assert len(digest) == 64


def test_corpus_rejects_duplicate_ids(people_example, people_schema, people_db):
    with pytest.raises(DatasetIntegrityError):
        Corpus({"zoo": people_schema}, {"zoo": people_db}, [people_example, people_example])


def test_load_corpus_names_the_bad_line(tmp_path, small_corpus):
    save_corpus(tmp_path, small_corpus.schemas, small_corpus.databases, small_corpus.examples[:2])
    path = tmp_path / "examples.jsonl"
    lines = path.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[1])
    record["query"] = "(project (col"
    path.write_text(lines[0] + "\n" + json.dumps(record) + "\n", encoding="utf-8")
    with pytest.raises(DataFormatError) as info:
        load_corpus(tmp_path)
    assert "examples.jsonl:2" in str(info.value)


def test_read_jsonl_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_jsonl(tmp_path / "none.jsonl", producer="gen-data")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"a": 1}\n[1, 2]\n', encoding="utf-8")
    with pytest.raises(DataFormatError):
        read_jsonl(bad)


def test_make_splits_partition_heldout_examples(small_corpus):
    specs = make_splits(small_corpus, cases_per_schema=3, num_splits=2, seed=11)
    assert [s.split for s in specs] == [0, 1]
    for spec in specs:
        for sid in spec.heldout_schemas:
            ids = {ex.example_id for ex in small_corpus.for_schema(sid)}
            assert len(spec.cases[sid]) == 3
            assert set(spec.cases[sid]).isdisjoint(spec.test[sid])
            assert set(spec.cases[sid]) | set(spec.test[sid]) == ids
    again = make_splits(small_corpus, cases_per_schema=3, num_splits=2, seed=11)
    assert [s.to_dict() for s in again] == [s.to_dict() for s in specs]


def test_make_splits_needs_test_examples(small_corpus, small_settings):
    with pytest.raises(DatasetIntegrityError):
        make_splits(small_corpus, cases_per_schema=small_settings.heldout_examples, num_splits=1, seed=0)
    with pytest.raises(DatasetIntegrityError):
        make_splits(small_corpus, cases_per_schema=-1, num_splits=1, seed=0)


def test_split_file_round_trip_and_limit(tmp_path, small_corpus):
    spec = make_splits(small_corpus, cases_per_schema=4, num_splits=1, seed=2)[0]
    save_split(tmp_path, spec)
    loaded = load_split(tmp_path, 0)
    assert loaded.to_dict() == spec.to_dict()
    short = loaded.limited(2)
    sid = spec.heldout_schemas[0]
    assert short.cases[sid] == spec.cases[sid][:2]
    assert short.test == spec.test
    with pytest.raises(MissingArtifactError):
        load_split(tmp_path, 5)


def test_split_rejects_overlapping_schemas():
    with pytest.raises(DatasetIntegrityError):
        SplitSpec(0, 0, 1, ["a"], ["a"], {"a": []}, {"a": []})


def test_predictions_join_to_test_ids(tmp_path, old_people_query):
    path = tmp_path / "predictions.jsonl"
    predictions = [Prediction("zoo-001", "zoo", [old_people_query], [0.9]),
                   Prediction("zoo-002", "zoo", [], [])]
    save_predictions(path, predictions)
    loaded = load_predictions(path, test_ids=["zoo-001", "zoo-002"])
    assert loaded[0].top == old_people_query
    assert loaded[1].top is None
    with pytest.raises(DatasetIntegrityError):
        load_predictions(path, test_ids=["zoo-001"])
    with pytest.raises(DatasetIntegrityError):
        load_predictions(path, test_ids=["zoo-001", "zoo-002", "zoo-003"])
