"""Retrieval evaluation: pairwise distance matrices, MAP / MT@10 / MR1,
theoretical optima, the oracle combiner and per-feature contribution shares.

Queries are exactly the tracks with at least one other version; a track with
no versions (a distractor) appears in rankings but is never scored.  Rankings
sort by ascending distance with ties broken by ascending track index, and the
query itself is removed from its own ranking.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

TOP_K = 10


@dataclass(frozen=True)
class EvalReport:
    map: float
    mt10: float
    mr1: float
    n_queries: int


def embedding_distance_matrix(embeddings: np.ndarray, block: int = 512) -> np.ndarray:
    """Exact pairwise Euclidean distances, computed in row blocks."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty n x dim embedding matrix")
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty((n, n))
    for start in range(0, n, block):
        stop = min(start + block, n)
        g = x[start:stop] @ x.T
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * g
        np.maximum(d2, 0.0, out=d2)
        out[start:stop] = np.sqrt(d2)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return out


def fused_distance_matrix(per_feature: dict, mask) -> np.ndarray:
    """Quadratic mean of the per-feature distance matrices over the mask."""
    mats = [np.asarray(per_feature[k], dtype=np.float64) for k in mask]
    if not mats:
        raise ValueError("mask selects no feature matrices")
    acc = np.zeros_like(mats[0])
    for m in mats:
        if m.shape != acc.shape:
            raise ValueError("feature distance matrices disagree in shape")
        acc += m * m
    return np.sqrt(acc / len(mats))


def pairwise_distances(embeddings, mask=None) -> np.ndarray:
    """Distance matrix from an (n, dim) array or a kind -> (n, dim) map.

    With a map, per-feature matrices are fused as their quadratic mean over
    `mask` (all present kinds when omitted).
    """
    if isinstance(embeddings, dict):
        kinds = tuple(mask) if mask else tuple(embeddings)
        per_feature = {k: embedding_distance_matrix(embeddings[k]) for k in kinds}
        return fused_distance_matrix(per_feature, kinds)
    return embedding_distance_matrix(np.asarray(embeddings))


def average_precision(sorted_relevance) -> float:
    """Mean over relevant ranks k of (relevant count up to k) / k."""
    hits = 0
    total = 0.0
    for rank, rel in enumerate(sorted_relevance, start=1):
        if rel:
            hits += 1
            total += hits / rank
    if hits == 0:
        raise ValueError("no relevant item in the ranking")
    return total / hits


def _ranking(dist_row, query, n):
    order = np.lexsort((np.arange(n), dist_row))
    return order[order != query]


def evaluate(dist: np.ndarray, works) -> EvalReport:
    """Score a distance matrix against work (clique) labels."""
    dist = np.asarray(dist)
    works = np.asarray(works)
    n = dist.shape[0]
    if dist.shape != (n, n) or len(works) != n:
        raise ValueError("distance matrix and labels disagree")
    counts = Counter(works.tolist())
    queries = [i for i in range(n) if counts[works[i]] >= 2]
    if not queries:
        raise ValueError("no track has another version: nothing to evaluate")
    ap_values = []
    top10_counts = []
    first_ranks = []
    for q in queries:
        ranked = _ranking(dist[q], q, n)
        rel = works[ranked] == works[q]
        ap_values.append(average_precision(rel))
        top10_counts.append(int(rel[:TOP_K].sum()))
        first_ranks.append(int(np.flatnonzero(rel)[0]) + 1)
    return EvalReport(
        map=sum(ap_values) / len(queries),
        mt10=sum(top10_counts) / len(queries),
        mr1=sum(first_ranks) / len(queries),
        n_queries=len(queries),
    )


def optimal_metrics(works) -> EvalReport:
    """Best achievable report: MAP and MR1 are 1, MT@10 is capacity-limited."""
    works = np.asarray(works)
    counts = Counter(works.tolist())
    queries = [w for w in works if counts[w] >= 2]
    if not queries:
        raise ValueError("no track has another version: nothing to evaluate")
    mt10 = sum(min(counts[w] - 1, TOP_K) for w in queries) / len(queries)
    return EvalReport(map=1.0, mt10=mt10, mr1=1.0, n_queries=len(queries))


def oracle_distances(feature_dists, works) -> np.ndarray:
    """Per pair, the friendliest feature distance given ground truth.

    Version pairs take the minimum distance over features, non-version
    pairs the maximum.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in feature_dists]
    if len(mats) < 2:
        raise ValueError("oracle needs at least two feature matrices")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValueError("feature distance matrices disagree in shape")
    works = np.asarray(works)
    same = works[:, None] == works[None, :]
    out = np.where(same, np.minimum.reduce(mats), np.maximum.reduce(mats))
    np.fill_diagonal(out, 0.0)
    return out


def oracle_contributions(feature_dists, works):
    """Fraction of pairs each feature wins for the oracle, per pair class.

    Positive (same-work) pairs count the features attaining the minimum,
    negative pairs the maximum; exact ties share equally.  Each class sums
    to 1.  Returns {'positive': shares, 'negative': shares}.
    """
    mats = np.stack([np.asarray(m, dtype=np.float64) for m in feature_dists])
    works = np.asarray(works)
    n = mats.shape[1]
    iu, ju = np.triu_indices(n, k=1)
    pair_d = mats[:, iu, ju]  # features x pairs
    positive = works[iu] == works[ju]
    out = {}
    for label, selector, pick in (
        ("positive", positive, np.min),
        ("negative", ~positive, np.max),
    ):
        subset = pair_d[:, selector]
        if subset.shape[1] == 0:
            out[label] = np.full(mats.shape[0], np.nan)
            continue
        best = pick(subset, axis=0)
        winners = subset == best
        shares = winners / winners.sum(axis=0)
        out[label] = shares.mean(axis=1)
    return out


def pair_report(track_a: int, track_b: int, feature_dists: dict, masks=()) -> dict:
    """Per-feature and fused distances for one pair of track indices."""
    rows = {}
    n = None
    for kind, mat in feature_dists.items():
        mat = np.asarray(mat)
        n = mat.shape[0]
        if not (0 <= track_a < n and 0 <= track_b < n):
            raise ValueError(f"track index out of range for {kind} matrix")
        rows[kind] = float(mat[track_a, track_b])
    for mask in masks:
        d = np.array([rows[k] for k in mask])
        rows["+".join(mask)] = float(np.sqrt(np.mean(d**2)))
    return rows
