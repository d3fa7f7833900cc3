import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itigen.core import (AttributeSet, AttributeSpec, FairTokenTable, HardPhrase, ReferenceSet,
                         combination_from_index, combination_index, enumerate_combinations,
                         load_schema, save_schema)
from itigen.encoders import ToyEncoder
from itigen.errors import SchemaError, SequenceLengthError
from itigen.generation import assemble_prompt


def binary(*names):
    return AttributeSet(AttributeSpec(n, ("c0", "c1")) for n in names)


def sized(sizes):
    return AttributeSet(AttributeSpec(f"a{m}", tuple(f"c{i}" for i in range(k)))
                        for m, k in enumerate(sizes))


def test_enumeration_one_binary():
    assert enumerate_combinations(binary("x")) == [(0,), (1,)]


def test_enumeration_two_binary_order():
    assert enumerate_combinations(binary("x", "y")) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_gender_by_age_has_18_combinations_and_round_trips():
    attrs = sized((2, 9))
    combos = enumerate_combinations(attrs)
    assert len(combos) == 18 == attrs.joint_size
    for k, c in enumerate(combos):
        assert combination_index(attrs, c) == k
        assert combination_from_index(attrs, k) == c


def test_index_examples():
    attrs = binary("x", "y")
    assert combination_index(attrs, (0, 0)) == 0
    assert combination_index(attrs, (1, 1)) == 3


@pytest.mark.parametrize("combo", [(2, 0), (0, -1), (0,), (0, 0, 0)])
def test_index_rejects_invalid(combo):
    with pytest.raises(SchemaError):
        combination_index(binary("x", "y"), combo)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 9), min_size=1, max_size=5))
def test_enumerate_then_index_is_identity(sizes):
    attrs = sized(sizes)
    combos = enumerate_combinations(attrs)
    assert len(combos) == int(np.prod(sizes))
    assert combos == list(itertools.product(*[range(k) for k in sizes]))
    assert [combination_index(attrs, c) for c in combos] == list(range(len(combos)))


def test_attribute_invariants():
    with pytest.raises(SchemaError):
        AttributeSpec("x", ("only",))
    with pytest.raises(SchemaError):
        AttributeSpec("x", ("a", "a"))
    with pytest.raises(SchemaError):
        AttributeSpec("x", ("a", "b"), tokens_per_category=0)
    with pytest.raises(SchemaError):
        AttributeSet([AttributeSpec("x", ("a", "b")), AttributeSpec("x", ("c", "d"))])


def test_schema_round_trip(tmp_path, faces_schema):
    save_schema(faces_schema, tmp_path / "schema.yaml")
    loaded = load_schema(tmp_path / "schema.yaml")
    assert loaded == faces_schema
    assert loaded.schema_hash() == faces_schema.schema_hash()
    assert loaded[0].phrases["female"] == HardPhrase(substitute=("person", "woman"))


def test_token_table_validation_and_round_trip(tmp_path, rng):
    attrs = AttributeSet([AttributeSpec("x", ("a", "b"), 2), AttributeSpec("y", ("a", "b", "c"), 1)])
    entries = [rng.standard_normal((2, 2, 5)), rng.standard_normal((3, 1, 5))]
    table = FairTokenTable(attrs, entries, {"prompt": "p"})
    table.save(tmp_path / "t.itt")
    back = FairTokenTable.load(tmp_path / "t.itt")
    assert back.attr_set == attrs and back.metadata == {"prompt": "p"}
    for a, b in zip(table.entries, back.entries):
        assert np.array_equal(a, b)
    assert table.for_combination((1, 2)).shape == (3, 5)
    with pytest.raises(SchemaError):
        FairTokenTable(attrs, [entries[0], rng.standard_normal((3, 2, 5))])
    bad = entries[0].copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(SchemaError):
        FairTokenTable(attrs, [bad, entries[1]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(2, 4), st.integers(1, 4)), min_size=0, max_size=4),
       st.integers(1, 8), st.integers(0, 10_000))
def test_assembled_length_formula(spec, base_words, seed):
    attrs = AttributeSet(AttributeSpec(f"a{m}", tuple(f"c{i}" for i in range(k)), q)
                         for m, (k, q) in enumerate(spec))
    enc = ToyEncoder(seed=1, d_tok=8, d_emb=4)
    rng = np.random.default_rng(seed)
    table = FairTokenTable(attrs, [rng.standard_normal((k, q, 8)) for k, q in spec])
    T = " ".join(["word"] * base_words)
    for combo in enumerate_combinations(attrs):
        prompt = assemble_prompt(T, table, combo, enc)
        assert len(prompt) == base_words + sum(q for _, q in spec)
        assert np.array_equal(prompt.assembled_tokens[:base_words], prompt.base_tokens)


def test_sequence_length_limit():
    attrs = AttributeSet([AttributeSpec("x", ("a", "b"), 10)])
    enc = ToyEncoder(d_tok=4, d_emb=3, max_sequence_length=12)
    table = FairTokenTable(attrs, [np.ones((2, 10, 4))])
    with pytest.raises(SequenceLengthError, match="12"):
        assemble_prompt("one two three", table, (0,), enc)


def test_reference_set_reports_empty_categories():
    attrs = binary("x")
    ref = ReferenceSet(attrs, {"x": [[], []]})
    assert ref.empty_categories() == [("x", "c0"), ("x", "c1")]
