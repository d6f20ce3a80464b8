import numpy as np
import pytest

from core.grammar import column_leaf, table_leaf, value_leaf
from model.encoder import (
    PAD, SEP, UNK, JointEncoder, SchemaElement, Vocabulary, element_words, literal_values, schema_elements,
)
from utils.error_handler import DataFormatError, MissingArtifactError


def _encoder(words, max_tokens=32):
    return JointEncoder(Vocabulary(words), dim=8, heads=2, ff_dim=16, blocks=1, max_tokens=max_tokens,
                        rng=np.random.default_rng(0))


def test_vocabulary_specials_first_and_unknown_words():
    vocab = Vocabulary(["zebra", "apple", "apple"])
    assert vocab.words[:3] == [PAD, UNK, SEP]
    assert vocab.words[3:] == ["apple", "zebra"]
    assert vocab.id("nope") == vocab.unk_id
    assert "zebra" in vocab and len(vocab) == 5


def test_vocabulary_save_load(tmp_path):
    vocab = Vocabulary(["b", "a"])
    vocab.save(tmp_path / "vocab.json")
    loaded = Vocabulary.load(tmp_path / "vocab.json")
    assert loaded.words == vocab.words


def test_vocabulary_load_missing_names_producer(tmp_path):
    with pytest.raises(MissingArtifactError) as info:
        Vocabulary.load(tmp_path / "absent.json", producer="train-base")
    assert "train-base" in str(info.value)


def test_element_words_split_qualified_names():
    assert element_words("col", "employee.department_id") == ("employee", "department", "id")
    assert element_words("val", "Oslo") == ("oslo",)


def test_schema_elements_order_and_literals(people_schema, people_db):
    tokens = "pets of people from oslo older than 60".split()
    elements = schema_elements(tokens, people_schema, people_db)
    kinds = [e.kind for e in elements]
    assert kinds == sorted(kinds, key=["tab", "col", "val"].index)
    assert SchemaElement("tab", "people") in elements
    assert SchemaElement("col", "pets.owner_id") in elements
    assert SchemaElement("val", "oslo") in elements
    # 60 is not a stored value
    assert SchemaElement("val", 60) not in elements


def test_literal_values_keep_int_and_text_apart(people_schema, people_db):
    found = literal_values(["61", "cat", "61"], people_schema, people_db)
    assert found == [61, "cat"]


def test_value_sampling_is_seeded(people_schema, people_db):
    a = schema_elements(["x"], people_schema, people_db, sample_per_column=1, sample_key="ex-1", seed=5)
    b = schema_elements(["x"], people_schema, people_db, sample_per_column=1, sample_key="ex-1", seed=5)
    assert a == b
    values = [e for e in a if e.kind == "val"]
    assert 1 <= len(values) <= 3


def test_element_leaf_round_trip():
    assert SchemaElement("tab", "people").leaf() == table_leaf("people")
    assert SchemaElement("col", "people.age").leaf() == column_leaf("people.age")
    assert SchemaElement("val", 3).leaf() == value_leaf(3)


def test_encode_shapes_and_element_index(people_schema, people_db):
    tokens = "names of people in oslo".split()
    elements = schema_elements(tokens, people_schema, people_db)
    encoder = _encoder(tokens + ["people", "pets", "name", "oslo"])
    encoded = encoder.encode(tokens, elements)
    assert encoded.token_vecs.shape == (len(tokens), 8)
    assert encoded.schema_vecs.shape == (len(elements), 8)
    assert encoded.pooled.shape == (8,)
    assert encoded.cases_used == 0
    assert encoded.element_index(value_leaf("oslo")) == elements.index(SchemaElement("val", "oslo"))
    assert encoded.element_index(value_leaf("rome")) is None


def test_encode_rejects_empty_inputs(people_schema, people_db):
    encoder = _encoder(["a"])
    elements = schema_elements([], people_schema, people_db)
    with pytest.raises(DataFormatError):
        encoder.encode([], elements)
    with pytest.raises(DataFormatError):
        encoder.encode(["a"], [])


def test_cases_are_dropped_from_the_end_when_too_long(people_schema, people_db, old_people_query):
    tokens = ["who", "is", "old"]
    elements = schema_elements(tokens, people_schema, people_db)
    encoder = _encoder(tokens, max_tokens=40)
    case = (["names", "of", "old", "people"], old_people_query)
    encoded = encoder.encode_with_cases(tokens, elements, [case, case, case])
    assert 0 < encoded.cases_used < 3
    assert encoded.token_vecs.shape[0] == len(tokens)
    roomy = _encoder(tokens, max_tokens=256).encode_with_cases(tokens, elements, [case, case, case])
    assert roomy.cases_used == 3


def test_cases_change_the_encoding(people_schema, people_db, old_people_query):
    tokens = ["who", "is", "old"]
    elements = schema_elements(tokens, people_schema, people_db)
    encoder = _encoder(tokens + ["names", "people"], max_tokens=64)
    plain = encoder.encode(tokens, elements)
    with_case = encoder.encode_with_cases(tokens, elements, [(["names", "of", "people"], old_people_query)])
    assert not np.allclose(plain.pooled.data, with_case.pooled.data)
    assert SEP in encoder.vocab
