import pytest

from core.config_loader import ModelConfig
from data.dataset_io import Corpus
from data.generator import CorpusSettings, generate_corpus
from data.schema import INT, TEXT, Column, Database, Example, Schema
from core.grammar import column_leaf, node, table_leaf, value_leaf
from model.parser import TextToQueryParser, build_vocabulary


@pytest.fixture
def people_schema():
    return Schema(
        schema_id="zoo",
        tables={
            "people": [Column("id", INT), Column("name", TEXT), Column("age", INT), Column("city", TEXT)],
            "pets": [Column("id", INT), Column("owner_id", INT), Column("kind", TEXT), Column("weight", INT)],
        },
        foreign_keys=[("pets.owner_id", "people.id")],
    )


@pytest.fixture
def people_db(people_schema):
    return Database(people_schema, {
        "people": [
            {"id": 1, "name": "ann", "age": 34, "city": "oslo"},
            {"id": 2, "name": "bob", "age": 61, "city": "rome"},
            {"id": 3, "name": "cid", "age": 61, "city": "oslo"},
            {"id": 4, "name": "dee", "age": 19, "city": "lima"},
        ],
        "pets": [
            {"id": 1, "owner_id": 1, "kind": "cat", "weight": 4},
            {"id": 2, "owner_id": 1, "kind": "dog", "weight": 20},
            {"id": 3, "owner_id": 2, "kind": "cat", "weight": 5},
            {"id": 4, "owner_id": 3, "kind": "fish", "weight": 1},
            {"id": 5, "owner_id": 3, "kind": "cat", "weight": 6},
        ],
    })


@pytest.fixture
def old_people_query():
    """names of people older than 60"""
    return node("project", column_leaf("people.name"),
                node("select", node(">", column_leaf("people.age"), value_leaf(60)), table_leaf("people")))


@pytest.fixture
def people_example(old_people_query):
    return Example("zoo-000", "zoo", "names of people older than 60", old_people_query, "heldout", "filter_gt")


@pytest.fixture(scope="session")
def small_settings():
    return CorpusSettings(train_schemas=2, heldout_schemas=1, train_examples=12, heldout_examples=12,
                          parent_rows=4, child_rows=8, lexicon_shift=(0.5,), dev_fraction=0.1,
                          beam_size=8, max_height=6)


@pytest.fixture(scope="session")
def small_corpus(small_settings):
    generated = generate_corpus(small_settings, seed=3)
    return Corpus(generated.schemas, generated.databases, generated.examples)


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(hidden_size=16, attention_heads=2, feedforward_dim=32, encoder_blocks=1, tree_blocks=1,
                       max_tokens=128, value_sample_per_column=1, beam_size=8, max_height=6, cbr_blocks=1)


@pytest.fixture
def small_parser(small_corpus, small_model_config):
    return TextToQueryParser(build_vocabulary(small_corpus), small_model_config, seed=7)
