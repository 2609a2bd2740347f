"""Candidate retrieval and knowledge-based answer masking.

The pipeline per sample: fuse the same (image feature, question) input
through each space's own network, take the top-k_r relations and top-k_e
entities by raw compatibility, collect the target set of graph neighbors over
those pairs, then add the mask score to the temperature-scaled compatibility
of every answer candidate inside the target set. A score large enough to
dominate the candidate pool's score span acts as a hard mask; smaller scores
merely bias the ranking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Sample
from .kg import KnowledgeGraph, Triple, target_set
from .spaces import Featurizer, SpaceBundle, SpaceModel, fuse, rank_tokens, raw_scores

MODES = ("standard", "zsl", "gzsl")


@dataclass(frozen=True)
class MaskConfig:
    """Masking and evaluation-mode settings: candidate set sizes, mask score,
    temperature, and the candidate-pool mode."""

    k_r: int = 3
    k_e: int = 1
    score_s: float = 10.0
    tau: float = 0.01
    mode: str = "standard"

    def __post_init__(self):
        if self.k_r < 1 or self.k_e < 1:
            raise ValueError("k_r and k_e must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.score_s < 0:
            raise ValueError("mask score must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")


# Operating points used throughout the experiments: a soft mask for the
# standard setting and a hard mask for generalized zero-shot ranking.
SOFT_MASK = MaskConfig(k_r=3, k_e=1, score_s=10.0, tau=0.01, mode="standard")
HARD_MASK = MaskConfig(k_r=25, k_e=1, score_s=100.0, tau=0.01, mode="gzsl")


def top_k_tokens(space: SpaceModel, fused: np.ndarray, k: int) -> list[str]:
    """Top-k vocabulary tokens by raw compatibility, ties lexicographic.

    k larger than the vocabulary is clamped to return every token.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = raw_scores(space, fused, space.vocab)
    k = min(k, len(space.vocab))
    order = sorted(range(len(space.vocab)), key=lambda i: (-scores[i], space.vocab[i]))
    return [space.vocab[i] for i in order[:k]]


def candidate_relations(space_rel: SpaceModel, fused_rel: np.ndarray, k_r: int) -> list[str]:
    """Most compatible relations for a fused feature, best first."""
    return top_k_tokens(space_rel, fused_rel, k_r)


def candidate_entities(space_ent: SpaceModel, fused_ent: np.ndarray, k_e: int) -> list[str]:
    """Most compatible support entities for a fused feature, best first."""
    return top_k_tokens(space_ent, fused_ent, k_e)


def masked_scores(space_ans: SpaceModel, fused_ans: np.ndarray, candidates: Sequence[str],
                  c_tar: set[str], config: MaskConfig) -> np.ndarray:
    """Temperature-scaled compatibilities with the mask score added inside c_tar.

    score(a) = dot(fused, target(a)) / tau, plus score_s when a is in the
    target set. Returned in candidate order.
    """
    scores = raw_scores(space_ans, fused_ans, candidates) / config.tau
    if config.score_s != 0.0 and c_tar:
        boost = np.fromiter((t in c_tar for t in candidates), dtype=bool, count=len(candidates))
        scores = scores + config.score_s * boost
    return scores


def find_witness(kg: KnowledgeGraph, c_ent: Sequence[str], c_rel: Sequence[str],
                 answer: str) -> Triple | None:
    """First triple (by candidate rank order) connecting the answer to a
    candidate entity through a candidate relation, in either direction."""
    for e in c_ent:
        for r in c_rel:
            forward = Triple(e, r, answer)
            if forward in kg:
                return forward
            backward = Triple(answer, r, e)
            if backward in kg:
                return backward
    return None


@dataclass(frozen=True)
class RankedAnswer:
    token: str
    score: float
    masked: bool
    witness: Triple | None = None

    def to_dict(self) -> dict:
        out: dict = {"token": self.token, "score": self.score, "masked": self.masked}
        out["witness"] = (
            None if self.witness is None
            else {"h": self.witness.head, "r": self.witness.relation, "t": self.witness.tail}
        )
        return out


@dataclass(frozen=True)
class Prediction:
    """Masked ranking for one sample with retrieval provenance."""

    sample_id: str
    c_rel: tuple[str, ...]
    c_ent: tuple[str, ...]
    c_tar: frozenset[str]
    answers: tuple[RankedAnswer, ...]

    def ranking(self) -> list[str]:
        return [a.token for a in self.answers]

    def to_dict(self, top: int | None = None) -> dict:
        answers = self.answers if top is None else self.answers[:top]
        return {
            "id": self.sample_id,
            "c_rel": list(self.c_rel),
            "c_ent": list(self.c_ent),
            "answers": [a.to_dict() for a in answers],
        }


def predict(bundle: SpaceBundle, kg: KnowledgeGraph, sample: Sample, featurizer: Featurizer,
            candidates: Sequence[str], config: MaskConfig) -> Prediction:
    """Run the full masking pipeline for one sample.

    All three fused features come from the same raw input through each space's
    own network. Boosted answers record one witnessing triple each.
    """
    x, _ = featurizer.encode(sample)
    img, qvec = x[:featurizer.feature_dim], x[featurizer.feature_dim:]
    fused_a = fuse(bundle.answer.fusion, img, qvec)
    fused_r = fuse(bundle.relation.fusion, img, qvec)
    fused_e = fuse(bundle.entity.fusion, img, qvec)

    c_rel = candidate_relations(bundle.relation, fused_r, config.k_r)
    c_ent = candidate_entities(bundle.entity, fused_e, config.k_e)
    c_tar = target_set(kg, c_ent, c_rel)

    candidates = list(candidates)
    scores = masked_scores(bundle.answer, fused_a, candidates, c_tar, config)
    ranked = rank_tokens(candidates, scores)
    answers = tuple(
        RankedAnswer(
            token=token,
            score=score,
            masked=token in c_tar,
            witness=find_witness(kg, c_ent, c_rel, token) if token in c_tar else None,
        )
        for token, score in ranked
    )
    return Prediction(sample.id, tuple(c_rel), tuple(c_ent), frozenset(c_tar), answers)
