"""Spatial-relation prompts over a small closed object vocabulary.

The only sentence shape understood here is

    "a(n) <object A> <relation phrase> a(n) <object B>"

with the relation phrase one of "to the left of", "to the right of",
"above", "below", "near". Matching is case-insensitive and multi-word
object names win over shorter prefixes.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence


class PromptError(ValueError):
    """Base class for prompt-text problems."""


class MalformedPromptError(PromptError):
    """The sentence does not fit the template grammar."""


class UnknownObjectError(PromptError):
    """An object slot names something outside the vocabulary."""


class Relation(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    ABOVE = "above"
    BELOW = "below"
    NEAR = "near"


#: Relations used for benchmark generation; NEAR stays available to the parser
#: and the loss but has no unambiguous ground truth, so benches skip it.
DIRECTIONAL_RELATIONS: tuple[Relation, ...] = (
    Relation.LEFT,
    Relation.RIGHT,
    Relation.ABOVE,
    Relation.BELOW,
)

_RELATION_PHRASES: tuple[tuple[tuple[str, ...], Relation], ...] = (
    (("to", "the", "left", "of"), Relation.LEFT),
    (("to", "the", "right", "of"), Relation.RIGHT),
    (("above",), Relation.ABOVE),
    (("below",), Relation.BELOW),
    (("near",), Relation.NEAR),
)

_PHRASE_BY_RELATION = {rel: " ".join(words) for words, rel in _RELATION_PHRASES}

_ARTICLES = ("a", "an")


@dataclass(frozen=True)
class VocabEntry:
    """One drawable object: its name plus the Gaussian stamp that renders it."""

    identifier: str
    template_side: int
    template_sigma: float
    display_name: str = ""

    def __post_init__(self) -> None:
        name = self.identifier.strip().lower()
        if not name or name != self.identifier:
            raise ValueError(f"identifier must be lowercase and stripped, got {self.identifier!r}")
        if self.template_side < 1 or self.template_side % 2 == 0:
            raise ValueError(f"template side must be odd, got {self.template_side}")
        if not self.template_sigma > 0:
            raise ValueError(f"template sigma must be positive, got {self.template_sigma}")
        if not self.display_name:
            object.__setattr__(self, "display_name", self.identifier)
        if self.display_name.strip().lower() != self.display_name:
            raise ValueError(f"display name must be lowercase and stripped, got {self.display_name!r}")

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self.display_name.split())


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple[VocabEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.identifier for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("vocabulary identifiers must be unique")
        if not names:
            raise ValueError("vocabulary must not be empty")

    def identifiers(self) -> tuple[str, ...]:
        return tuple(e.identifier for e in self.entries)

    def __contains__(self, identifier: str) -> bool:
        return any(e.identifier == identifier for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, identifier: str) -> VocabEntry:
        for entry in self.entries:
            if entry.identifier == identifier:
                return entry
        raise UnknownObjectError(f"unknown object {identifier!r}")

    def match_longest(self, tokens: Sequence[str], start: int) -> VocabEntry | None:
        """Longest entry whose tokens appear at tokens[start:]; None if nothing matches."""
        best: VocabEntry | None = None
        for entry in self.entries:
            n = len(entry.tokens)
            if tuple(tokens[start : start + n]) == entry.tokens:
                if best is None or n > len(best.tokens):
                    best = entry
        return best


def default_vocabulary() -> Vocabulary:
    """16 everyday objects with varied stamp footprints.

    Every entry gets a distinct (side, sigma) pair so no two objects share a
    response map exactly.
    """
    spec = [
        ("dog", 7, 1.10),
        ("cat", 7, 1.00),
        ("clock", 5, 0.80),
        ("potted plant", 7, 1.05),
        ("car", 9, 1.20),
        ("bird", 5, 0.85),
        ("chair", 7, 0.95),
        ("table", 9, 1.15),
        ("lamp", 5, 0.90),
        ("book", 5, 0.95),
        ("cup", 5, 1.00),
        ("ball", 5, 1.05),
        ("television", 9, 1.25),
        ("umbrella", 7, 1.15),
        ("guitar", 7, 1.20),
        ("suitcase", 7, 1.25),
    ]
    return Vocabulary(tuple(VocabEntry(n, s, g) for n, s, g in spec))


@dataclass(frozen=True)
class PromptTriplet:
    """Parsed prompt: subject A, relation, object B, plus the source text."""

    object_a: str
    relation: Relation
    object_b: str
    text: str

    def __post_init__(self) -> None:
        if not isinstance(self.relation, Relation):
            raise ValueError(f"relation must be a Relation, got {self.relation!r}")
        if self.object_a == self.object_b:
            raise ValueError("object_a and object_b must differ")

    def to_json_dict(self) -> dict:
        return {
            "a": self.object_a,
            "r": self.relation.value,
            "b": self.object_b,
            "text": self.text,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "PromptTriplet":
        try:
            return cls(
                object_a=payload["a"],
                relation=Relation(payload["r"]),
                object_b=payload["b"],
                text=payload["text"],
            )
        except KeyError as exc:
            raise ValueError(f"triplet JSON missing key {exc}") from exc


def _article_for(name: str) -> str:
    return "an" if name[0] in "aeiou" else "a"


def render_prompt(object_a: str, relation: Relation, object_b: str, vocab: Vocabulary) -> str:
    """Canonical sentence for a triplet, with articles chosen by first letter."""
    a = vocab.get(object_a)
    b = vocab.get(object_b)
    phrase = _PHRASE_BY_RELATION[Relation(relation)]
    return (
        f"{_article_for(a.display_name)} {a.display_name} {phrase} "
        f"{_article_for(b.display_name)} {b.display_name}"
    )


def _find_relation(tokens: Sequence[str]) -> tuple[int, int, Relation] | None:
    """Leftmost relation phrase, longest first at each position: (start, length, relation)."""
    for start in range(len(tokens)):
        for words, rel in sorted(_RELATION_PHRASES, key=lambda wr: -len(wr[0])):
            if tuple(tokens[start : start + len(words)]) == words:
                return start, len(words), rel
    return None


def _parse_object_span(tokens: Sequence[str], vocab: Vocabulary, side: str) -> str:
    if not tokens:
        raise MalformedPromptError(f"missing {side} object phrase")
    if tokens[0] not in _ARTICLES:
        raise MalformedPromptError(
            f"{side} object phrase must start with 'a' or 'an', got {tokens[0]!r}"
        )
    span = tokens[1:]
    if not span:
        raise MalformedPromptError(f"{side} object phrase names no object")
    entry = vocab.match_longest(span, 0)
    if entry is None or len(entry.tokens) != len(span):
        raise UnknownObjectError(f"unknown object {' '.join(span)!r}")
    return entry.identifier


def parse_prompt(text: str, vocab: Vocabulary) -> PromptTriplet:
    """Parse one sentence of the template grammar into a triplet.

    Raises MalformedPromptError when the sentence shape is wrong and
    UnknownObjectError when an object slot is not in the vocabulary.
    """
    tokens = text.lower().split()
    if not tokens:
        raise MalformedPromptError("empty prompt")
    found = _find_relation(tokens)
    if found is None:
        raise MalformedPromptError(f"no relation phrase in {text!r}")
    start, length, relation = found
    object_a = _parse_object_span(tokens[:start], vocab, "left")
    object_b = _parse_object_span(tokens[start + length :], vocab, "right")
    if object_a == object_b:
        raise MalformedPromptError(f"objects must differ, both are {object_a!r}")
    return PromptTriplet(object_a=object_a, relation=relation, object_b=object_b, text=text)


def generate_benchmark(vocab: Vocabulary, pair_count: int, seed: int) -> list[PromptTriplet]:
    """Sample unordered object pairs and emit all four directional prompts per pair.

    Output is pair-major: the four relations of a pair stay adjacent, in the
    fixed order left, right, above, below. The same seed always yields the
    same list.
    """
    all_pairs = list(combinations(vocab.identifiers(), 2))
    if pair_count < 1:
        raise ValueError(f"pair_count must be >= 1, got {pair_count}")
    if pair_count > len(all_pairs):
        raise ValueError(
            f"pair_count {pair_count} exceeds the {len(all_pairs)} distinct pairs available"
        )
    rng = random.Random(seed)
    pairs = rng.sample(all_pairs, pair_count)
    triplets = []
    for a, b in pairs:
        for relation in DIRECTIONAL_RELATIONS:
            triplets.append(
                PromptTriplet(
                    object_a=a,
                    relation=relation,
                    object_b=b,
                    text=render_prompt(a, relation, b, vocab),
                )
            )
    return triplets


def write_triplets_jsonl(triplets: Iterable[PromptTriplet], path: str | Path) -> None:
    lines = [
        json.dumps(t.to_json_dict(), sort_keys=True, separators=(",", ":")) for t in triplets
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_triplets_jsonl(path: str | Path) -> list[PromptTriplet]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(PromptTriplet.from_json_dict(json.loads(line)))
    return out
