"""Alignment prediction and evaluation over joint embeddings.

Ranking is unconstrained (several sources may prefer one target) and backs
the Hits@n / MRR metrics; greedy one-to-one matching is a separate prediction
mode. All similarity is cosine with zero-norm rows scoring 0, and ties break
toward the smaller candidate id so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import cosine_similarity_matrix
from .errors import ConfigError


@dataclass(frozen=True)
class RankingResult:
    """Per-source candidate orderings plus ground-truth ranks when known."""

    candidate_ids: np.ndarray   # target entity ids being ranked
    order: np.ndarray           # (n_src, n_cand) candidate positions, best first
    ranks: np.ndarray | None    # 1-based rank of the true target per source

    def ordered_candidates(self, row: int) -> np.ndarray:
        return self.candidate_ids[self.order[row]]


@dataclass(frozen=True)
class MatchResult:
    """Partial one-to-one matching produced by the greedy strategy."""

    matches: list[tuple[int, int, float]]
    unmatched_src: list[int]
    unmatched_tgt: list[int]


def rank_all(src_rows: np.ndarray, tgt_rows: np.ndarray,
             candidate_ids=None, true_positions=None) -> RankingResult:
    """Rank every candidate for every source row by descending cosine.

    true_positions, when given, holds each source's ground-truth candidate
    position (an index into tgt_rows) and fills in ranks.
    """
    src_rows = np.atleast_2d(np.asarray(src_rows, dtype=np.float64))
    tgt_rows = np.atleast_2d(np.asarray(tgt_rows, dtype=np.float64))
    if tgt_rows.shape[0] == 0:
        raise ConfigError("rank_all: empty candidate set")
    if candidate_ids is None:
        candidate_ids = np.arange(tgt_rows.shape[0])
    candidate_ids = np.asarray(candidate_ids, dtype=np.int64)

    sims = cosine_similarity_matrix(src_rows, tgt_rows)
    order = np.empty_like(sims, dtype=np.int64)
    for i in range(sims.shape[0]):
        order[i] = np.lexsort((candidate_ids, -sims[i]))

    ranks = None
    if true_positions is not None:
        true_positions = np.asarray(true_positions, dtype=np.int64)
        ranks = np.empty(len(true_positions), dtype=np.int64)
        for i, true_pos in enumerate(true_positions):
            ranks[i] = int(np.flatnonzero(order[i] == true_pos)[0]) + 1
    return RankingResult(candidate_ids=candidate_ids, order=order, ranks=ranks)


def greedy_match(src_rows: np.ndarray, tgt_rows: np.ndarray,
                 src_ids=None, tgt_ids=None) -> MatchResult:
    """Confidence-first greedy one-to-one matching over cosine similarity."""
    sims = cosine_similarity_matrix(np.atleast_2d(np.asarray(src_rows, dtype=np.float64)),
                                    np.atleast_2d(np.asarray(tgt_rows, dtype=np.float64)))
    return greedy_match_sims(sims, src_ids, tgt_ids)


def greedy_match_sims(sims: np.ndarray, src_ids=None, tgt_ids=None) -> MatchResult:
    """Greedy matching over an explicit similarity matrix.

    Repeatedly claims the highest-similarity still-available (source, target)
    pair, which is equivalent to processing sources in descending order of
    their best available similarity and recomputing after every claim.
    """
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    n_src, n_tgt = sims.shape
    src_ids = np.arange(n_src) if src_ids is None else np.asarray(src_ids)
    tgt_ids = np.arange(n_tgt) if tgt_ids is None else np.asarray(tgt_ids)

    flat = sims.reshape(-1)
    rows = np.repeat(np.arange(n_src), n_tgt)
    cols = np.tile(np.arange(n_tgt), n_src)
    ranked = np.lexsort((cols, rows, -flat))

    src_used = np.zeros(n_src, dtype=bool)
    tgt_used = np.zeros(n_tgt, dtype=bool)
    matches = []
    budget = min(n_src, n_tgt)
    for pos in ranked:
        if len(matches) == budget:
            break
        i, j = rows[pos], cols[pos]
        if not src_used[i] and not tgt_used[j]:
            src_used[i] = tgt_used[j] = True
            matches.append((int(src_ids[i]), int(tgt_ids[j]), float(sims[i, j])))
    return MatchResult(
        matches=matches,
        unmatched_src=[int(s) for s in src_ids[~src_used]],
        unmatched_tgt=[int(t) for t in tgt_ids[~tgt_used]],
    )


def hits_at_n(ranks, n: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ConfigError("hits_at_n: empty ranks")
    return float((ranks <= n).mean())


def mean_reciprocal_rank(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ConfigError("mean_reciprocal_rank: empty ranks")
    return float((1.0 / ranks).mean())


@dataclass(frozen=True)
class MetricsReport:
    src_to_tgt: dict
    tgt_to_src: dict
    mean: dict
    n_test: int

    def to_dict(self) -> dict:
        return {"src_to_tgt": self.src_to_tgt, "tgt_to_src": self.tgt_to_src,
                "mean": self.mean, "n_test": self.n_test}


def _direction_metrics(query_rows, pool_rows, pool_ids, true_positions) -> dict:
    ranking = rank_all(query_rows, pool_rows, pool_ids, true_positions)
    return {
        "hits1": hits_at_n(ranking.ranks, 1),
        "hits10": hits_at_n(ranking.ranks, 10),
        "mrr": mean_reciprocal_rank(ranking.ranks),
    }


def evaluate(src_joint: np.ndarray, tgt_joint: np.ndarray, test_pairs,
             candidate_pool: str = "test") -> MetricsReport:
    """Rank-based evaluation over test pairs, both directions averaged.

    candidate_pool 'test' ranks each query against the opposite side's test
    entities (standard protocol); 'all' ranks against every entity.
    """
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ConfigError("evaluate: empty test pairs")
    if candidate_pool not in ("test", "all"):
        raise ConfigError(f"evaluate: unknown candidate pool {candidate_pool!r}")
    src_ids, tgt_ids = pairs[:, 0], pairs[:, 1]

    if candidate_pool == "test":
        fwd = _direction_metrics(src_joint[src_ids], tgt_joint[tgt_ids], tgt_ids,
                                 np.arange(len(pairs)))
        bwd = _direction_metrics(tgt_joint[tgt_ids], src_joint[src_ids], src_ids,
                                 np.arange(len(pairs)))
    else:
        fwd = _direction_metrics(src_joint[src_ids], tgt_joint,
                                 np.arange(tgt_joint.shape[0]), tgt_ids)
        bwd = _direction_metrics(tgt_joint[tgt_ids], src_joint,
                                 np.arange(src_joint.shape[0]), src_ids)
    mean = {k: (fwd[k] + bwd[k]) / 2.0 for k in fwd}
    return MetricsReport(src_to_tgt=fwd, tgt_to_src=bwd, mean=mean, n_test=len(pairs))
