import pytest
from hypothesis import given, strategies as st

from spatialground.parse import (ALL_RELATIONS, NOUNS, TEMPLATES, Instruction, ParseError, Relation, generate_query,
                                 parse_query, relation_lexicon, relation_phrases)


def test_everyday_examples():
    assert parse_query("Can you find the book that is on the chair?") == Instruction(
        "book", "chair", Relation.parse("Support/SupportedBy"))
    assert parse_query("the mug closest to the laptop") == Instruction(
        "mug", "laptop", Relation.parse("HorizontalProximity/Near"))
    assert parse_query("the box under the table") == Instruction(
        "box", "table", Relation.parse("VerticalProximity/Below"))


def test_lexicon_minimum():
    lex = relation_lexicon()
    expect = {"on": "Support/SupportedBy", "on top of": "Support/SupportedBy", "supported by": "Support/SupportedBy",
              "supporting": "Support/Supporting", "beneath it holding": "Support/Supporting",
              "above": "VerticalProximity/Above", "over": "VerticalProximity/Above",
              "below": "VerticalProximity/Below", "under": "VerticalProximity/Below",
              "beneath": "VerticalProximity/Below", "near": "HorizontalProximity/Near",
              "next to": "HorizontalProximity/Near", "closest to": "HorizontalProximity/Near",
              "far from": "HorizontalProximity/Far", "farthest from": "HorizontalProximity/Far",
              "left of": "Allocentric/Left", "right of": "Allocentric/Right",
              "in front of": "Allocentric/Front", "behind": "Allocentric/Behind"}
    for phrase, rel in expect.items():
        assert str(lex[phrase]) == rel


def test_template_zero():
    ins = Instruction("book", "chair", Relation.parse("Support/SupportedBy"))
    assert generate_query(ins, 0) == "the book that is on the chair"


def test_full_grammar_roundtrip():
    assert len(TEMPLATES) >= 4 and len(NOUNS) >= 50
    n = 0
    for phrase, rel in relation_lexicon().items():
        for t in range(len(TEMPLATES)):
            for k, target in enumerate(NOUNS):
                anchor = NOUNS[(k + 7) % len(NOUNS)]
                ins = Instruction(target, anchor, rel)
                assert parse_query(generate_query(ins, t, phrase)) == ins
                n += 1
    assert n >= len(relation_lexicon()) * 4 * 50


@given(st.sampled_from(NOUNS), st.sampled_from(NOUNS), st.sampled_from(ALL_RELATIONS),
       st.integers(0, len(TEMPLATES) - 1))
def test_roundtrip_property(target, anchor, rel, t):
    if target == anchor and not rel.is_proximity:
        with pytest.raises(ValueError):
            Instruction(target, anchor, rel)
        return
    ins = Instruction(target, anchor, rel)
    for phrase in relation_phrases(rel):
        assert parse_query(generate_query(ins, t, phrase)) == ins


@pytest.mark.parametrize("text,kind", [
    ("the mug and the table", "NoRelation"),
    ("the mug on the table near the lamp", "Ambiguous"),
    ("the zorb on the table", "UnknownConcept"),
    ("the mug on the", "UnknownConcept"),
    ("the mug on the mug", "SameConcept"),
])
def test_typed_errors(text, kind):
    with pytest.raises(ParseError) as e:
        parse_query(text)
    assert e.value.kind == kind


def test_synonyms_and_same_category_proximity():
    assert parse_query("the cup near the cup").target == "mug"
    assert parse_query("find the cup next to the couch").anchor == "sofa"


@given(st.text(max_size=40))
def test_parser_total(text):
    try:
        ins = parse_query(text)
    except ParseError as e:
        assert e.kind in {"NoRelation", "Ambiguous", "UnknownConcept", "SameConcept"}
    else:
        assert ins.target in NOUNS and ins.anchor in NOUNS


def test_relation_validation():
    with pytest.raises(ValueError):
        Relation.parse("Support/Above")
    with pytest.raises(ValueError):
        generate_query(Instruction("mug", "table", Relation.parse("Support/SupportedBy")), len(TEMPLATES))
