"""Dataset ingestion, answer pools, zero-shot splits, statistics, and the
built-in synthetic benchmark.

File formats:
  samples   JSON lines, one object per sample:
            {"id", "img_id", "question", "answer", "fact": {"h","r","t"}?}
  features  first line `#dim D`, then one `img_id v1 ... vD` record per line
  manifest  JSON with the split kind, seed, repeat index, seen/unseen answer
            sets, and the sample-id routing
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingTable, Lemmatizer, default_lemmatizer
from .errors import ParseError
from .kg import KnowledgeGraph, Triple


@dataclass(frozen=True)
class Sample:
    """One (image feature, question, answer) item with an optional gold fact.

    When a fact is present the answer is one of its endpoints; the other
    endpoint is the sample's support entity.
    """

    id: str
    image_feature_id: str
    question: str
    answer: str
    fact: Triple | None = None

    def support_entity(self) -> str | None:
        """The gold fact endpoint that is not the answer, or None."""
        if self.fact is None:
            return None
        if self.answer == self.fact.head:
            return self.fact.tail
        if self.answer == self.fact.tail:
            return self.fact.head
        return None


@dataclass
class Dataset:
    samples: list[Sample]
    image_features: dict[str, np.ndarray]

    def feature(self, sample: Sample) -> np.ndarray:
        return self.image_features[sample.image_feature_id]

    @property
    def feature_dim(self) -> int:
        if not self.image_features:
            raise ValueError("dataset has no image features")
        return len(next(iter(self.image_features.values())))

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, samples: Sequence[Sample]) -> "Dataset":
        """New dataset restricted to `samples` and the features they reference."""
        ids = {s.image_feature_id for s in samples}
        return Dataset(list(samples), {k: v for k, v in self.image_features.items() if k in ids})


@dataclass
class LoadReport:
    """Samples rejected at load time, as (sample id or line tag, reason) pairs."""

    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.rejected)

    def to_dict(self) -> dict:
        return {"n_rejected": len(self.rejected), "rejected": [list(r) for r in self.rejected]}


def load_features(path: str | Path) -> dict[str, np.ndarray]:
    """Parse an image feature file. The `#dim D` header fixes the vector size."""
    features: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if dim is None:
                if parts[0] != "#dim" or len(parts) != 2:
                    raise ParseError(path, lineno, "expected header line '#dim D'")
                try:
                    dim = int(parts[1])
                except ValueError:
                    raise ParseError(path, lineno, f"bad dimension {parts[1]!r}") from None
                if dim < 1:
                    raise ParseError(path, lineno, "dimension must be positive")
                continue
            img_id, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ParseError(path, lineno, f"expected {dim} values for '{img_id}', got {len(values)}")
            try:
                features[img_id] = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, lineno, f"bad float for '{img_id}': {exc}") from None
    if dim is None:
        raise ParseError(path, 1, "missing '#dim D' header")
    return features


def _parse_fact(obj, path, lineno, normalize) -> Triple | None:
    if obj is None:
        return None
    if not isinstance(obj, dict) or set(obj) < {"h", "r", "t"}:
        raise ParseError(path, lineno, "fact must be an object with keys h, r, t")
    return Triple(normalize(str(obj["h"])), normalize(str(obj["r"])), normalize(str(obj["t"])))


def load_dataset(
    samples_path: str | Path,
    features_path: str | Path,
    lemmatizer: Lemmatizer | None = None,
) -> tuple[Dataset, LoadReport]:
    """Load samples and features; reject inconsistent samples with a report.

    Rejection reasons: unresolvable image feature id, duplicate sample id, and
    gold facts that do not contain the sample's answer as an endpoint. Answer
    and fact tokens are normalized; malformed lines raise ParseError.
    """
    normalize = (lemmatizer or default_lemmatizer()).normalize_phrase
    features = load_features(features_path)
    samples: list[Sample] = []
    report = LoadReport()
    seen_ids: set[str] = set()
    with open(samples_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(samples_path, lineno, f"bad JSON: {exc.msg}") from None
            missing = {"id", "img_id", "question", "answer"} - set(obj)
            if missing:
                raise ParseError(samples_path, lineno, f"missing keys: {sorted(missing)}")
            sid = str(obj["id"])
            fact = _parse_fact(obj.get("fact"), samples_path, lineno, normalize)
            sample = Sample(
                id=sid,
                image_feature_id=str(obj["img_id"]),
                question=str(obj["question"]),
                answer=normalize(str(obj["answer"])),
                fact=fact,
            )
            if sid in seen_ids:
                report.rejected.append((sid, "duplicate sample id"))
                continue
            if sample.image_feature_id not in features:
                report.rejected.append((sid, f"unknown image feature id '{sample.image_feature_id}'"))
                continue
            if fact is not None and sample.support_entity() is None:
                report.rejected.append((sid, "answer is not an endpoint of its fact"))
                continue
            seen_ids.add(sid)
            samples.append(sample)
    used = {s.image_feature_id for s in samples}
    return Dataset(samples, {k: v for k, v in features.items() if k in used}), report


def save_dataset(dataset: Dataset, samples_path: str | Path, features_path: str | Path) -> None:
    """Write a dataset back out in load_dataset formats (round-trip safe)."""
    lines = []
    for s in dataset.samples:
        obj = {"id": s.id, "img_id": s.image_feature_id, "question": s.question, "answer": s.answer}
        if s.fact is not None:
            obj["fact"] = {"h": s.fact.head, "r": s.fact.relation, "t": s.fact.tail}
        lines.append(json.dumps(obj, sort_keys=True))
    Path(samples_path).parent.mkdir(parents=True, exist_ok=True)
    Path(samples_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    dim = dataset.feature_dim
    rows = [f"#dim {dim}"]
    for img_id in sorted(dataset.image_features):
        values = " ".join(repr(float(v)) for v in dataset.image_features[img_id])
        rows.append(f"{img_id} {values}")
    Path(features_path).parent.mkdir(parents=True, exist_ok=True)
    Path(features_path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def top_k_answers(dataset: Dataset, k: int) -> list[str]:
    """The k most frequent answer tokens, frequency descending then lexicographic.

    Increasing k extends the pool without reordering it; k beyond the number
    of distinct answers returns all of them.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counts: dict[str, int] = {}
    for s in dataset.samples:
        counts[s.answer] = counts.get(s.answer, 0) + 1
    ranked = sorted(counts, key=lambda a: (-counts[a], a))
    return ranked[:k]


def filter_to_pool(dataset: Dataset, pool: Iterable[str]) -> tuple[Dataset, list[str]]:
    """Drop samples whose answer is outside the pool; return (kept, dropped ids)."""
    pool = set(pool)
    kept = [s for s in dataset.samples if s.answer in pool]
    dropped = [s.id for s in dataset.samples if s.answer not in pool]
    return dataset.subset(kept), dropped


@dataclass(frozen=True)
class AnswerSplit:
    """Seen/unseen answer partition for one repeat. seen and unseen are disjoint
    and together cover the filtered answer pool; a standard (non-zero-shot)
    split has an empty unseen set."""

    seen: frozenset[str]
    unseen: frozenset[str]
    repeat_index: int

    def __post_init__(self):
        if self.seen & self.unseen:
            raise ValueError("seen and unseen answer sets must be disjoint")

    @property
    def pool(self) -> frozenset[str]:
        return self.seen | self.unseen


SplitTriple = tuple[Dataset, Dataset, AnswerSplit]


def zero_shot_split(
    dataset: Dataset,
    pool: Iterable[str],
    seed: int,
    repeats: int = 5,
) -> list[SplitTriple]:
    """Generate answer-disjoint train/test splits.

    Per repeat the pool is shuffled under a generator seeded by (seed, repeat),
    the first half becomes the seen answers (the extra one on odd sizes), the
    rest unseen; every pooled sample is routed to train when its answer is
    seen, else to test. Samples outside the pool are dropped first.
    """
    ordered = sorted(set(pool))
    if not ordered:
        raise ValueError("answer pool must be non-empty")
    pooled, _ = filter_to_pool(dataset, ordered)
    out: list[SplitTriple] = []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, rep])
        perm = rng.permutation(len(ordered))
        n_seen = (len(ordered) + 1) // 2
        seen = frozenset(ordered[i] for i in perm[:n_seen])
        unseen = frozenset(ordered[i] for i in perm[n_seen:])
        train = [s for s in pooled.samples if s.answer in seen]
        test = [s for s in pooled.samples if s.answer in unseen]
        out.append((pooled.subset(train), pooled.subset(test), AnswerSplit(seen, unseen, rep)))
    return out


def standard_split(
    dataset: Dataset,
    pool: Iterable[str],
    seed: int,
    repeats: int = 1,
    train_fraction: float = 0.5,
) -> list[SplitTriple]:
    """Generate image-disjoint train/test splits with a shared answer pool.

    Samples are grouped by image feature id and images are shuffled under a
    seeded generator, so the same image never appears on both sides. The
    returned AnswerSplit carries the whole pool as seen and no unseen answers.
    """
    ordered = sorted(set(pool))
    if not ordered:
        raise ValueError("answer pool must be non-empty")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    pooled, _ = filter_to_pool(dataset, ordered)
    images = sorted({s.image_feature_id for s in pooled.samples})
    out: list[SplitTriple] = []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, rep, 1])
        perm = rng.permutation(len(images))
        n_train = max(1, min(len(images) - 1, round(len(images) * train_fraction)))
        train_imgs = {images[i] for i in perm[:n_train]}
        train = [s for s in pooled.samples if s.image_feature_id in train_imgs]
        test = [s for s in pooled.samples if s.image_feature_id not in train_imgs]
        split = AnswerSplit(frozenset(ordered), frozenset(), rep)
        out.append((pooled.subset(train), pooled.subset(test), split))
    return out


def save_split_manifest(path: str | Path, split: AnswerSplit, train: Dataset, test: Dataset,
                        seed: int, kind: str = "zsl") -> None:
    from .util import atomic_write_json

    atomic_write_json(path, {
        "kind": kind,
        "seed": seed,
        "repeat_index": split.repeat_index,
        "seen": sorted(split.seen),
        "unseen": sorted(split.unseen),
        "train_ids": [s.id for s in train.samples],
        "test_ids": [s.id for s in test.samples],
    })


def load_split_manifest(path: str | Path, dataset: Dataset) -> SplitTriple:
    """Rebuild (train, test, AnswerSplit) from a manifest against a dataset."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    by_id = {s.id: s for s in dataset.samples}
    missing = [i for i in obj["train_ids"] + obj["test_ids"] if i not in by_id]
    if missing:
        raise ValueError(f"manifest {path} names sample ids absent from the dataset: {missing[:5]}")
    split = AnswerSplit(frozenset(obj["seen"]), frozenset(obj["unseen"]), int(obj["repeat_index"]))
    train = dataset.subset([by_id[i] for i in obj["train_ids"]])
    test = dataset.subset([by_id[i] for i in obj["test_ids"]])
    return train, test, split


@dataclass(frozen=True)
class ColumnStats:
    """Distinct-class counts per side, their intersection, and the number of
    test instances whose value also occurs in training."""

    train_classes: int
    test_classes: int
    class_overlap: int
    instance_overlap: int


@dataclass(frozen=True)
class SplitStats:
    n_train: int
    n_test: int
    images: ColumnStats
    questions: ColumnStats
    answers: ColumnStats
    support_entities: ColumnStats

    def to_dict(self) -> dict:
        out: dict = {"n_train": self.n_train, "n_test": self.n_test}
        for name in ("images", "questions", "answers", "support_entities"):
            col: ColumnStats = getattr(self, name)
            out[name] = {
                "train_classes": col.train_classes,
                "test_classes": col.test_classes,
                "class_overlap": col.class_overlap,
                "instance_overlap": col.instance_overlap,
            }
        return out


def split_stats(train: Dataset, test: Dataset) -> SplitStats:
    """Class and instance overlap statistics between the two sides of a split."""

    def column(getter) -> ColumnStats:
        tr = [v for s in train.samples if (v := getter(s)) is not None]
        te = [v for s in test.samples if (v := getter(s)) is not None]
        tr_set, te_set = set(tr), set(te)
        return ColumnStats(
            train_classes=len(tr_set),
            test_classes=len(te_set),
            class_overlap=len(tr_set & te_set),
            instance_overlap=sum(1 for v in te if v in tr_set),
        )

    return SplitStats(
        n_train=len(train.samples),
        n_test=len(test.samples),
        images=column(lambda s: s.image_feature_id),
        questions=column(lambda s: s.question),
        answers=column(lambda s: s.answer),
        support_entities=column(lambda s: s.support_entity()),
    )


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated benchmark.

    Entities split into answer entities and support entities; every generated
    fact is (support, relation, answer) and no (support, relation) pair is
    reused, so each sample's answer is recoverable by exact graph lookup.
    """

    n_entities: int = 400
    n_relations: int = 20
    n_answers: int = 200
    n_samples: int = 4000
    feature_dim: int = 64
    noise: float = 0.3
    seed: int = 0
    embedding_dim: int = 32
    facts_per_answer: int = 3
    answer_jitter: float = 0.25


_QUESTION_TEMPLATE = "which thing is {relation} of it"


def gen_synthetic(spec: SynthSpec) -> tuple[Dataset, KnowledgeGraph, EmbeddingTable]:
    """Deterministically generate a (dataset, graph, embeddings) benchmark.

    Image features are a per-support-entity prototype plus Gaussian noise, the
    question template names the gold relation, and each answer token's vector
    is correlated with the entity/relation vectors of its supporting facts
    (plus jitter), so alignment is learnable but not trivial.
    """
    if min(spec.n_entities, spec.n_relations, spec.n_answers, spec.n_samples) < 1:
        raise ValueError("all synthetic counts must be >= 1")
    if spec.n_answers >= spec.n_entities:
        raise ValueError("n_answers must be smaller than n_entities (supports are the remainder)")
    if spec.facts_per_answer < 1:
        raise ValueError("facts_per_answer must be >= 1")
    n_support = spec.n_entities - spec.n_answers
    n_pairs = spec.n_answers * spec.facts_per_answer
    if n_pairs > n_support * spec.n_relations:
        raise ValueError("not enough (support, relation) pairs for the requested facts")

    rng = np.random.default_rng(spec.seed)
    answers = [f"answer{i:04d}" for i in range(spec.n_answers)]
    supports = [f"object{i:04d}" for i in range(n_support)]
    relations = [f"rel{i:03d}" for i in range(spec.n_relations)]

    # Unique (support, relation) pairs, facts_per_answer of them per answer.
    total = n_support * spec.n_relations
    if n_pairs > total // 2:
        flat = rng.permutation(total)[:n_pairs]
        pair_ids = [(int(p) // spec.n_relations, int(p) % spec.n_relations) for p in flat]
    else:
        used: set[tuple[int, int]] = set()
        pair_ids = []
        while len(pair_ids) < n_pairs:
            cand = (int(rng.integers(n_support)), int(rng.integers(spec.n_relations)))
            if cand not in used:
                used.add(cand)
                pair_ids.append(cand)
    pairs_of: list[list[tuple[int, int]]] = [
        pair_ids[i * spec.facts_per_answer:(i + 1) * spec.facts_per_answer]
        for i in range(spec.n_answers)
    ]
    kg = KnowledgeGraph()
    for a_idx, pairs in enumerate(pairs_of):
        for s_idx, r_idx in pairs:
            kg.add(Triple(supports[s_idx], relations[r_idx], answers[a_idx]))

    scale = 1.0 / np.sqrt(spec.embedding_dim)
    emb_support = rng.standard_normal((n_support, spec.embedding_dim)) * scale
    emb_rel = rng.standard_normal((spec.n_relations, spec.embedding_dim)) * scale
    vectors: dict[str, np.ndarray] = {}
    for i, tok in enumerate(supports):
        vectors[tok] = emb_support[i]
    for i, tok in enumerate(relations):
        vectors[tok] = emb_rel[i]
    for a_idx, tok in enumerate(answers):
        base = np.mean([(emb_support[s] + emb_rel[r]) / 2.0 for s, r in pairs_of[a_idx]], axis=0)
        vectors[tok] = base + spec.answer_jitter * rng.standard_normal(spec.embedding_dim) * scale
    lem = default_lemmatizer()
    for word in sorted(set(_QUESTION_TEMPLATE.replace("{relation}", "").split())):
        vectors.setdefault(lem.normalize(word), rng.standard_normal(spec.embedding_dim) * scale)
    table = EmbeddingTable(spec.embedding_dim, vectors)

    prototypes = rng.standard_normal((n_support, spec.feature_dim))
    samples: list[Sample] = []
    features: dict[str, np.ndarray] = {}
    for j in range(spec.n_samples):
        a_idx = j % spec.n_answers
        s_idx, r_idx = pairs_of[a_idx][int(rng.integers(spec.facts_per_answer))]
        img_id = f"img{j:05d}"
        features[img_id] = prototypes[s_idx] + spec.noise * rng.standard_normal(spec.feature_dim)
        samples.append(Sample(
            id=f"s{j:05d}",
            image_feature_id=img_id,
            question=_QUESTION_TEMPLATE.format(relation=relations[r_idx]),
            answer=answers[a_idx],
            fact=Triple(supports[s_idx], relations[r_idx], answers[a_idx]),
        ))
    return Dataset(samples, features), kg, table
