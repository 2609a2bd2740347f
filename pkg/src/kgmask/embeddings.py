"""Frozen token embeddings, phrase pooling, and surface-form normalization.

The embedding file format is the usual text layout: one token per line
followed by whitespace-separated decimals. Surface forms are folded with a
small rule-based lemmatizer (suffix stripping guarded by a base-form word
list, plus an irregular alias table) and disambiguated against a vocabulary
with minimum edit distance.
"""

from __future__ import annotations

import re
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ParseError

_TOKEN_RE = re.compile(r"[a-z0-9']+")

# (suffix, replacement) pairs tried in order; a candidate is accepted only
# when the resulting stem is in the base-form dictionary.
_SUFFIX_RULES = (
    ("ies", "y"),
    ("es", ""),
    ("s", ""),
    ("ing", ""),
    ("ed", ""),
)


def tokenize(text: str) -> list[str]:
    """Casefold and split into alphanumeric word tokens."""
    return _TOKEN_RE.findall(text.casefold())


class Lemmatizer:
    """Rule-based lemmatizer: suffix rules guarded by a base-form word list.

    A suffix rule only fires when the stripped stem (possibly after undoing
    consonant doubling or restoring a silent 'e') is present in the base-form
    dictionary; otherwise the token is returned casefolded and untouched.
    Irregular forms are handled by an explicit alias table applied first.
    """

    def __init__(self, base_forms: Iterable[str], aliases: Mapping[str, str] | None = None):
        self.base_forms = frozenset(w.casefold() for w in base_forms)
        raw = {k.casefold(): v.casefold() for k, v in (aliases or {}).items()}
        self.aliases = {k: self._chase(raw, k) for k in raw}

    @staticmethod
    def _chase(mapping: Mapping[str, str], start: str) -> str:
        # Resolve alias chains so that alias targets are fixed points.
        seen = {start}
        cur = mapping[start]
        while cur in mapping and cur not in seen:
            seen.add(cur)
            cur = mapping[cur]
        return cur

    def normalize(self, token: str) -> str:
        """Normalize a single word to its base form."""
        token = token.casefold()
        if token in self.aliases:
            return self.aliases[token]
        if token in self.base_forms:
            return token
        for suffix, repl in _SUFFIX_RULES:
            if not token.endswith(suffix) or len(token) <= len(suffix):
                continue
            stem = token[: -len(suffix)] + repl
            if stem in self.base_forms:
                return stem
            if suffix in ("ing", "ed"):
                # running -> runn -> run; stopped -> stopp -> stop
                if len(stem) >= 2 and stem[-1] == stem[-2] and stem[:-1] in self.base_forms:
                    return stem[:-1]
                # making -> mak -> make; baked -> bak -> bake
                if stem + "e" in self.base_forms:
                    return stem + "e"
        return token

    def normalize_phrase(self, text: str) -> str:
        """Normalize each whitespace-separated word and rejoin."""
        words = text.casefold().split()
        return " ".join(self.normalize(w) for w in words)

    @classmethod
    def load(cls, base_forms_path: str | Path, aliases_path: str | Path | None = None) -> "Lemmatizer":
        """Load from a word list (one word per line) and an optional alias file
        (`surface<TAB>canonical` per line). `#` lines are ignored in both."""
        words = []
        for line in Path(base_forms_path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                words.append(line)
        aliases = {}
        if aliases_path is not None:
            for lineno, line in enumerate(Path(aliases_path).read_text(encoding="utf-8").splitlines(), 1):
                line = line.rstrip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(aliases_path, lineno, "expected 2 tab-separated fields")
                aliases[parts[0].strip()] = parts[1].strip()
        return cls(words, aliases)


_DEFAULT_LEMMATIZER: Lemmatizer | None = None


def default_lemmatizer() -> Lemmatizer:
    """The packaged lemmatizer (shared word list and alias table), cached."""
    global _DEFAULT_LEMMATIZER
    if _DEFAULT_LEMMATIZER is None:
        res = importlib_resources.files("kgmask.resources")
        with importlib_resources.as_file(res / "base_forms.txt") as base, \
                importlib_resources.as_file(res / "aliases.txt") as alias:
            _DEFAULT_LEMMATIZER = Lemmatizer.load(base, alias)
    return _DEFAULT_LEMMATIZER


def normalize_token(token: str, lemmatizer: Lemmatizer | None = None) -> str:
    """Casefold and lemmatize a single token (packaged lemmatizer by default)."""
    return (lemmatizer or default_lemmatizer()).normalize(token)


class EmbeddingTable:
    """Immutable token -> dense vector map with a fixed dimensionality."""

    def __init__(self, dim: int, vectors: Mapping[str, np.ndarray]):
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        self.dim = int(dim)
        self._vectors: dict[str, np.ndarray] = {}
        for token, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dim,):
                raise ValueError(f"vector for token '{token}' has shape {arr.shape}, expected ({self.dim},)")
            self._vectors[token] = arr

    def __contains__(self, token: str) -> bool:
        return token in self._vectors

    def __getitem__(self, token: str) -> np.ndarray:
        return self._vectors[token]

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, token: str, default=None):
        return self._vectors.get(token, default)

    def tokens(self) -> Iterable[str]:
        return self._vectors.keys()


def load_embeddings(path: str | Path, dim: int) -> EmbeddingTable:
    """Parse a text embedding file into an EmbeddingTable.

    Each line is `token v1 ... v_dim`, whitespace separated. Duplicate tokens
    keep the first occurrence. A line whose vector is not exactly `dim` floats
    raises ParseError naming the line.
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ParseError(path, lineno, f"expected {dim} values for token '{token}', got {len(values)}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, lineno, f"bad float in vector for token '{token}': {exc}") from None
            if token not in vectors:
                vectors[token] = vec
    return EmbeddingTable(dim, vectors)


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write the table in the text format accepted by load_embeddings."""
    lines = []
    for token in sorted(table.tokens()):
        values = " ".join(repr(float(v)) for v in table[token])
        lines.append(f"{token} {values}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def phrase_vector(
    table: EmbeddingTable,
    phrase: str,
    lemmatizer: Lemmatizer | None = None,
) -> tuple[np.ndarray, bool]:
    """Mean-pool the embeddings of a phrase's in-vocabulary tokens.

    Tokens are normalized before lookup. Returns `(vector, oov)` where `oov`
    is True when no token was in vocabulary, in which case the vector is zero.
    An empty phrase (no tokens at all) raises ValueError.
    """
    words = tokenize(phrase)
    if not words:
        raise ValueError(f"phrase {phrase!r} contains no tokens")
    lem = lemmatizer or default_lemmatizer()
    found = [table[w] for w in (lem.normalize(t) for t in words) if w in table]
    if not found:
        return np.zeros(table.dim, dtype=np.float64), True
    return np.mean(found, axis=0), False


def med(a: str, b: str) -> int:
    """Minimum edit (Levenshtein) distance with unit insert/delete/substitute costs."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def resolve_concept(
    token: str,
    vocab: Iterable[str],
    lemmatizer: Lemmatizer | None = None,
    threshold: int = 2,
) -> str | None:
    """Map a surface form onto a vocabulary token, or None.

    Exact match after normalization wins; otherwise the vocabulary token with
    the smallest edit distance is returned when that distance is within
    `threshold` (ties broken lexicographically). Never invents tokens.
    """
    vocab = set(vocab)
    if not vocab:
        raise ValueError("vocab must be non-empty")
    norm = normalize_token(token, lemmatizer)
    if norm in vocab:
        return norm
    dist, best = min((med(norm, v), v) for v in vocab)
    return best if dist <= threshold else None
