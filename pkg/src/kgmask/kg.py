"""Fact triple store with a bidirectional (entity, relation) index.

The graph answers one query: given an entity e and a relation r, which
entities t satisfy (e, r, t) or (t, r, e)? Target sets for answer masking are
unions of those neighbor sets over candidate entity/relation pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .errors import ParseError

Normalizer = Callable[[str], str]


@dataclass(frozen=True, order=True)
class Triple:
    """One fact: (head entity, relation, tail entity). All fields non-empty."""

    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not (self.head and self.relation and self.tail):
            raise ValueError(f"triple fields must be non-empty, got {self!r}")


class KnowledgeGraph:
    """Deduplicated triple set with entity/relation vocabularies and an index.

    The index maps (entity, relation) to the set of entities reachable through
    a triple in either direction, so one lookup serves both orientations.
    Instances are meant to be immutable after construction; concurrent reads
    are safe.
    """

    def __init__(self, triples: Iterable[Triple] = ()):
        self.triples: set[Triple] = set()
        self.entity_vocab: set[str] = set()
        self.relation_vocab: set[str] = set()
        self._index: dict[tuple[str, str], set[str]] = {}
        for triple in triples:
            self.add(triple)

    def add(self, triple: Triple) -> None:
        """Insert a triple (idempotent). Construction-time use only."""
        if triple in self.triples:
            return
        self.triples.add(triple)
        self.entity_vocab.add(triple.head)
        self.entity_vocab.add(triple.tail)
        self.relation_vocab.add(triple.relation)
        self._index.setdefault((triple.head, triple.relation), set()).add(triple.tail)
        self._index.setdefault((triple.tail, triple.relation), set()).add(triple.head)

    def neighbors(self, entity: str, relation: str) -> set[str]:
        """Entities t with (entity, relation, t) or (t, relation, entity) in the graph.

        Unknown entities or relations yield the empty set rather than an error:
        top-k candidates at inference may name tokens absent from the graph.
        """
        return set(self._index.get((entity, relation), ()))

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.triples)

    def __contains__(self, triple: Triple) -> bool:
        return triple in self.triples


def target_set(kg: KnowledgeGraph, c_ent: Iterable[str], c_rel: Iterable[str]) -> set[str]:
    """Union of kg.neighbors(e, r) over all candidate entity/relation pairs."""
    out: set[str] = set()
    c_rel = list(c_rel)
    for e in c_ent:
        for r in c_rel:
            out |= kg.neighbors(e, r)
    return out


def load_triples(path: str | Path, normalize: Normalizer | None = None) -> KnowledgeGraph:
    """Load a tab-separated triple file into an indexed graph.

    Format: UTF-8 text, one `head<TAB>relation<TAB>tail` per line, lines
    starting with `#` ignored, trailing whitespace stripped. Duplicate lines
    are deduplicated; an empty file yields an empty graph. Tokens are passed
    through `normalize` (the packaged lemmatizer's phrase normalization by
    default) so graph lookups match the disambiguated sample vocabulary.
    """
    if normalize is None:
        from .embeddings import default_lemmatizer

        normalize = default_lemmatizer().normalize_phrase
    kg = KnowledgeGraph()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            head, relation, tail = (normalize(f) for f in fields)
            if not (head and relation and tail):
                raise ParseError(path, lineno, "empty field after normalization")
            kg.add(Triple(head, relation, tail))
    return kg


def save_triples(kg: KnowledgeGraph, path: str | Path) -> None:
    """Write the graph in load_triples format, sorted for reproducible output."""
    lines = [f"{t.head}\t{t.relation}\t{t.tail}" for t in sorted(kg.triples)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
