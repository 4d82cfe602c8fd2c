"""Template grammar that splits a spatial query into target, anchor and relation."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .embed import DEFAULT_SYNONYMS


class RelationClass(str, Enum):
    HORIZONTAL = "HorizontalProximity"
    VERTICAL = "VerticalProximity"
    SUPPORT = "Support"
    ALLOCENTRIC = "Allocentric"


SUBTYPES = {
    RelationClass.HORIZONTAL: ("Near", "Far"),
    RelationClass.VERTICAL: ("Above", "Below"),
    RelationClass.SUPPORT: ("SupportedBy", "Supporting"),
    RelationClass.ALLOCENTRIC: ("Left", "Right", "Front", "Behind"),
}


@dataclass(frozen=True)
class Relation:
    kind: RelationClass
    subtype: str

    def __post_init__(self):
        object.__setattr__(self, "kind", RelationClass(self.kind))
        if self.subtype not in SUBTYPES[self.kind]:
            raise ValueError(f"{self.subtype!r} is not a {self.kind.value} subtype")

    def __str__(self):
        return f"{self.kind.value}/{self.subtype}"

    @classmethod
    def parse(cls, s: str) -> "Relation":
        kind, _, sub = s.partition("/")
        return cls(RelationClass(kind), sub)

    @property
    def is_proximity(self) -> bool:
        return self.kind is RelationClass.HORIZONTAL


ALL_RELATIONS = tuple(Relation(k, s) for k, subs in SUBTYPES.items() for s in subs)


@dataclass(frozen=True)
class Instruction:
    target: str
    anchor: str
    relation: Relation

    def __post_init__(self):
        if self.target == self.anchor and not self.relation.is_proximity:
            raise ValueError("target and anchor must differ except for proximity relations")

    def to_json(self) -> dict:
        return {"target": self.target, "anchor": self.anchor, "relation": str(self.relation)}

    @classmethod
    def from_json(cls, d: dict) -> "Instruction":
        return cls(d["target"], d["anchor"], Relation.parse(d["relation"]))


class ParseError(ValueError):
    """Typed parse failure; ``kind`` is one of NoRelation, Ambiguous, UnknownConcept, SameConcept."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


NOUNS = (
    "book", "chair", "mug", "laptop", "box", "table", "lamp", "bottle", "plant", "vase",
    "bowl", "plate", "pillow", "sofa", "shelf", "cabinet", "monitor", "keyboard", "phone", "clock",
    "basket", "bag", "shoe", "toy", "candle", "remote", "apple", "banana", "speaker", "printer",
    "stool", "desk", "towel", "jar", "cushion", "pen", "notebook", "ball", "hat", "doll",
    "teapot", "kettle", "pan", "pot", "tray", "mat", "frame", "radio", "camera", "bench",
)

_LEXICON_SPEC = {
    "Support/SupportedBy": ("on", "on top of", "supported by", "resting on", "sitting on"),
    "Support/Supporting": ("supporting", "beneath it holding", "holding up"),
    "VerticalProximity/Above": ("above", "over", "hovering over"),
    "VerticalProximity/Below": ("below", "under", "beneath", "underneath"),
    "HorizontalProximity/Near": ("near", "next to", "closest to", "nearest to", "close to"),
    "HorizontalProximity/Far": ("far from", "farthest from", "furthest from", "far away from"),
    "Allocentric/Left": ("left of", "to the left of", "on the left of"),
    "Allocentric/Right": ("right of", "to the right of", "on the right of"),
    "Allocentric/Front": ("in front of",),
    "Allocentric/Behind": ("behind", "in back of"),
}

TEMPLATES = (
    "the {target} that is {rel} the {anchor}",
    "the {target} {rel} the {anchor}",
    "can you find the {target} that is {rel} the {anchor}?",
    "find the {target} {rel} the {anchor}",
    "where is the {target} which is {rel} the {anchor}?",
    "show me the {target} located {rel} the {anchor}.",
)

FILLERS = frozenset({
    "the", "a", "an", "that", "which", "is", "can", "you", "find", "please", "where", "show",
    "me", "located", "placed", "locate", "one", "thing", "s", "it's", "that's",
})


def relation_lexicon() -> dict[str, Relation]:
    return {phrase: Relation.parse(rel) for rel, phrases in _LEXICON_SPEC.items() for phrase in phrases}


def relation_phrases(relation: Relation) -> tuple[str, ...]:
    return _LEXICON_SPEC[str(relation)]


_LEXICON = relation_lexicon()
_PHRASES = sorted(((tuple(p.split()), r) for p, r in _LEXICON.items()), key=lambda x: -len(x[0]))
_TOKEN = re.compile(r"[a-z]+(?:'[a-z]+)?")


def _tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _find_relations(tokens):
    """Leftmost-longest, non-overlapping relation phrase matches."""
    found = []
    i = 0
    while i < len(tokens):
        for phrase, rel in _PHRASES:
            n = len(phrase)
            if tuple(tokens[i:i + n]) == phrase:
                found.append((i, i + n, rel))
                i += n
                break
        else:
            i += 1
    return found


class QueryParser:
    """Grammar parser over a fixed noun vocabulary with synonym resolution."""

    def __init__(self, nouns=NOUNS, synonyms=None):
        self.synonyms = dict(DEFAULT_SYNONYMS if synonyms is None else synonyms)
        self.nouns = frozenset(nouns)

    def _noun(self, tokens, role, text):
        words = [t for t in tokens if t not in FILLERS]
        if not words:
            raise ParseError("UnknownConcept", f"no {role} noun in {text!r}")
        if len(words) > 1:
            raise ParseError("UnknownConcept", f"unsupported {role} phrase {' '.join(words)!r}")
        word = self.synonyms.get(words[0], words[0])
        if word not in self.nouns:
            raise ParseError("UnknownConcept", f"unknown {role} {words[0]!r}")
        return word

    def parse(self, text: str) -> Instruction:
        tokens = _tokens(text)
        matches = _find_relations(tokens)
        if not matches:
            raise ParseError("NoRelation", f"no relation phrase in {text!r}")
        if len(matches) > 1:
            phrases = [" ".join(tokens[a:b]) for a, b, _ in matches]
            raise ParseError("Ambiguous", f"multiple relation phrases {phrases} in {text!r}")
        start, end, rel = matches[0]
        target = self._noun(tokens[:start], "target", text)
        anchor = self._noun(tokens[end:], "anchor", text)
        if target == anchor and not rel.is_proximity:
            raise ParseError("SameConcept", f"target and anchor are both {target!r}")
        return Instruction(target, anchor, rel)


_DEFAULT_PARSER = QueryParser()


def parse_query(text: str, parser: QueryParser | None = None) -> Instruction:
    return (parser or _DEFAULT_PARSER).parse(text)


def generate_query(instruction: Instruction, template_id: int, phrase: str | None = None) -> str:
    if not 0 <= template_id < len(TEMPLATES):
        raise ValueError(f"template_id must be in [0, {len(TEMPLATES)})")
    phrase = phrase or relation_phrases(instruction.relation)[0]
    if _LEXICON.get(phrase) != instruction.relation:
        raise ValueError(f"{phrase!r} does not express {instruction.relation}")
    return TEMPLATES[template_id].format(target=instruction.target, rel=phrase, anchor=instruction.anchor)
