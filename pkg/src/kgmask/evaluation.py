"""Rank metrics and mode-aware evaluation over trained spaces.

The candidate pool follows the mode: the full answer pool for standard runs,
only unseen answers for zsl, and their union for gzsl. Samples whose gold
answer falls outside the mode's pool are excluded and counted rather than
silently dropped.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import AnswerSplit, Dataset
from .kg import KnowledgeGraph, target_set
from .masking import MaskConfig, top_k_tokens
from .spaces import Featurizer, SpaceBundle


@dataclass
class EvalReport:
    """Metric bundle for one evaluation run (or the mean across splits)."""

    mode: str = ""
    n_samples: int = 0
    n_excluded: int = 0
    hit1: float = 0.0
    hit3: float = 0.0
    hit10: float = 0.0
    mrr: float = 0.0
    mr: float = 0.0
    per_split: list["EvalReport"] | None = None

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "hit1": self.hit1,
            "hit3": self.hit3,
            "hit10": self.hit10,
            "mrr": self.mrr,
            "mr": self.mr,
        }
        if self.per_split is not None:
            out["per_split"] = [r.to_dict() for r in self.per_split]
        return out


def rank_of_gold(ranking: Sequence[str], gold: str) -> int:
    """1-based position of the gold token in a ranking; absence is an error."""
    try:
        return ranking.index(gold) + 1
    except ValueError:
        raise ValueError(f"gold token {gold!r} is not in the ranking") from None


def metrics(ranks: Sequence[int]) -> EvalReport:
    """Hit@{1,3,10}, mean reciprocal rank, and mean rank from 1-based ranks."""
    if len(ranks) == 0:
        raise ValueError("ranks must be non-empty")
    n = len(ranks)
    report = EvalReport(n_samples=n)
    report.hit1 = sum(1 for r in ranks if r <= 1) / n
    report.hit3 = sum(1 for r in ranks if r <= 3) / n
    report.hit10 = sum(1 for r in ranks if r <= 10) / n
    report.mrr = math.fsum(1.0 / r for r in ranks) / n
    report.mr = math.fsum(float(r) for r in ranks) / n
    return report


def mode_pool(split: AnswerSplit, mode: str) -> list[str]:
    """Sorted candidate pool for a mode: unseen answers under zsl, the whole
    pool otherwise."""
    if mode == "zsl":
        return sorted(split.unseen)
    if mode in ("standard", "gzsl"):
        return sorted(split.seen | split.unseen)
    raise ValueError(f"unknown mode '{mode}'")


def _rank_rows(bundle: SpaceBundle, kg: KnowledgeGraph, config: MaskConfig,
               fused_a, fused_r, fused_e, ans_dots, cand_arr, col_of, golds,
               rows: range) -> list[int]:
    ranks = []
    for i in rows:
        c_rel = top_k_tokens(bundle.relation, fused_r[i], config.k_r)
        c_ent = top_k_tokens(bundle.entity, fused_e[i], config.k_e)
        c_tar = target_set(kg, c_ent, c_rel)
        scores = ans_dots[i] / config.tau
        if config.score_s != 0.0:
            boost_cols = [col_of[t] for t in c_tar if t in col_of]
            if boost_cols:
                scores = scores.copy()
                scores[boost_cols] += config.score_s
        g = golds[i]
        gscore = scores[col_of[g]]
        # gold itself never satisfies cand_arr < g, so it is not counted
        better = int(np.sum(scores > gscore))
        tied_before = int(np.sum((scores == gscore) & (cand_arr < g)))
        ranks.append(better + tied_before + 1)
    return ranks


def evaluate(bundle: SpaceBundle, kg: KnowledgeGraph, test: Dataset, split: AnswerSplit,
             config: MaskConfig, featurizer: Featurizer, threads: int = 1) -> EvalReport:
    """Score every evaluable test sample through the masking pipeline.

    Ranks use the shared deterministic tie-break (score descending, then
    token). `threads` parallelizes sample scoring; chunk results are joined in
    order, so the report does not depend on the thread count.
    """
    pool = mode_pool(split, config.mode)
    pool_set = set(pool)
    usable = [s for s in test.samples if s.answer in pool_set]
    excluded = len(test.samples) - len(usable)
    if not usable:
        raise ValueError(f"no test samples have answers inside the {config.mode} pool")

    X = featurizer.encode_batch(usable)
    fused_a = bundle.answer.fusion.forward(X)
    fused_r = bundle.relation.fusion.forward(X)
    fused_e = bundle.entity.fusion.forward(X)
    ans_dots = fused_a @ bundle.answer.target_matrix(pool).T
    cand_arr = np.array(pool)
    col_of = {t: i for i, t in enumerate(pool)}
    golds = [s.answer for s in usable]

    def work(rows: range) -> list[int]:
        return _rank_rows(bundle, kg, config, fused_a, fused_r, fused_e,
                          ans_dots, cand_arr, col_of, golds, rows)

    n = len(usable)
    if threads <= 1:
        ranks = work(range(n))
    else:
        chunk = max(1, (n + threads - 1) // threads)
        pieces = [range(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            parts = list(pool_exec.map(work, pieces))
        ranks = [r for part in parts for r in part]

    report = metrics(ranks)
    report.mode = config.mode
    report.n_excluded = excluded
    return report


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Unweighted metric mean across split reports, keeping them attached."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = EvalReport(
        mode=reports[0].mode,
        n_samples=sum(r.n_samples for r in reports),
        n_excluded=sum(r.n_excluded for r in reports),
        per_split=list(reports),
    )
    n = len(reports)
    for name in ("hit1", "hit3", "hit10", "mrr", "mr"):
        setattr(out, name, math.fsum(getattr(r, name) for r in reports) / n)
    return out


def sweep_scores(bundle: SpaceBundle, kg: KnowledgeGraph, test: Dataset, split: AnswerSplit,
                 base: MaskConfig, scores: Sequence[float],
                 featurizer: Featurizer) -> list[tuple[float, EvalReport]]:
    """Evaluate a range of mask scores, reusing retrieval work across scores.

    Candidate sets and target sets depend only on k_r/k_e, so they are
    computed once per sample and each score only re-ranks.
    """
    pool = mode_pool(split, base.mode)
    pool_set = set(pool)
    usable = [s for s in test.samples if s.answer in pool_set]
    excluded = len(test.samples) - len(usable)
    if not usable:
        raise ValueError(f"no test samples have answers inside the {base.mode} pool")

    X = featurizer.encode_batch(usable)
    fused_a = bundle.answer.fusion.forward(X)
    fused_r = bundle.relation.fusion.forward(X)
    fused_e = bundle.entity.fusion.forward(X)
    base_scores = (fused_a @ bundle.answer.target_matrix(pool).T) / base.tau
    cand_arr = np.array(pool)
    col_of = {t: i for i, t in enumerate(pool)}

    boosts: list[list[int]] = []
    for i in range(len(usable)):
        c_rel = top_k_tokens(bundle.relation, fused_r[i], base.k_r)
        c_ent = top_k_tokens(bundle.entity, fused_e[i], base.k_e)
        c_tar = target_set(kg, c_ent, c_rel)
        boosts.append([col_of[t] for t in c_tar if t in col_of])

    results: list[tuple[float, EvalReport]] = []
    for s in scores:
        ranks = []
        for i, sample in enumerate(usable):
            row = base_scores[i]
            if s != 0.0 and boosts[i]:
                row = row.copy()
                row[boosts[i]] += s
            gscore = row[col_of[sample.answer]]
            better = int(np.sum(row > gscore))
            tied_before = int(np.sum((row == gscore) & (cand_arr < sample.answer)))
            ranks.append(better + tied_before + 1)
        report = metrics(ranks)
        report.mode = base.mode
        report.n_excluded = excluded
        results.append((float(s), report))
    return results


def sweep_grid(bundle: SpaceBundle, kg: KnowledgeGraph, test: Dataset, split: AnswerSplit,
               base: MaskConfig, k_rs: Sequence[int], k_es: Sequence[int],
               featurizer: Featurizer) -> list[tuple[int, int, EvalReport]]:
    """Evaluate every (k_r, k_e) combination at the base config's mask score."""
    results = []
    for k_r in k_rs:
        for k_e in k_es:
            config = MaskConfig(k_r=k_r, k_e=k_e, score_s=base.score_s, tau=base.tau, mode=base.mode)
            results.append((k_r, k_e, evaluate(bundle, kg, test, split, config, featurizer)))
    return results
