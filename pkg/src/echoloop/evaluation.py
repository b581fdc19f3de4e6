"""Measurement protocols: content diversity and its temporal change,
top-k ranking metrics with sampled and extrapolated-rank variants, the
greedy diversity re-ranker, and the boredom-exit satisfaction simulation
on a synthetic fully observed interest matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .errors import ValidationError


def content_diversity(item_embeddings) -> float:
    """Mean pairwise Euclidean distance over a list of embeddings."""
    X = np.asarray(item_embeddings, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("need at least 2 embeddings")
    n = X.shape[0]
    total = 0.0
    for i in range(n - 1):
        total += float(np.sum(np.linalg.norm(X[i + 1 :] - X[i], axis=1)))
    return total / (n * (n - 1) / 2)


@dataclass(frozen=True)
class DiversityReport:
    """Per-phase mean diversity and pairwise phase deltas."""

    per_phase_diversity: dict[int, float]
    deltas: dict[tuple[int, int], float]
    skipped_users: dict[int, int]  # phase -> users with < 2 recommendations


def diversity_change(
    recs_by_phase: dict[int, dict[int, list[int]]],
    embeddings_by_phase: dict[int, dict[int, np.ndarray]],
) -> DiversityReport:
    """Mean per-user diversity per phase, using that phase's own item
    embeddings, and the antisymmetric delta table diversity(i) - diversity(j).
    """
    if len(recs_by_phase) < 2:
        raise ValidationError("need at least 2 phases")
    per_phase: dict[int, float] = {}
    skipped: dict[int, int] = {}
    for phase, user_recs in sorted(recs_by_phase.items()):
        emb = embeddings_by_phase[phase]
        values = []
        n_skipped = 0
        for user in sorted(user_recs):
            items = user_recs[user]
            if len(items) < 2:
                n_skipped += 1
                continue
            values.append(content_diversity([emb[v] for v in items]))
        if not values:
            raise ValidationError(f"phase {phase} has no user with >= 2 recommendations")
        per_phase[phase] = float(np.mean(values))
        skipped[phase] = n_skipped
    phases = sorted(per_phase)
    deltas = {
        (i, j): per_phase[i] - per_phase[j]
        for i in phases
        for j in phases
        if i != j
    }
    return DiversityReport(per_phase_diversity=per_phase, deltas=deltas,
                           skipped_users=skipped)


@dataclass(frozen=True)
class RankingMetrics:
    """Per-user ranking metrics at a cutoff, sampled and extrapolated."""

    hit_at_k: float
    ndcg_at_k: float
    u_hit_at_k: float
    u_ndcg_at_k: float


def corrected_rank(rank: int, n_negatives: int, catalog_size: int) -> float:
    """Extrapolate a sampled rank to the full catalog:
    R_hat = 1 + (rank - 1) * (catalog_size - 1) / n_negatives."""
    return 1.0 + (rank - 1) * (catalog_size - 1) / n_negatives


def ranking_metrics(
    rank: int, k: int, n_negatives: int, catalog_size: int
) -> RankingMetrics:
    """hit@k and nDCG@k from the target's rank among n_negatives + 1
    sampled candidates, plus variants computed at the extrapolated rank."""
    if rank < 1 or rank > n_negatives + 1:
        raise ValidationError(
            f"rank must lie in 1..{n_negatives + 1}, got {rank}"
        )
    hit = 1.0 if rank <= k else 0.0
    ndcg = 1.0 / math.log2(rank + 1) if rank <= k else 0.0
    r_hat = corrected_rank(rank, n_negatives, catalog_size)
    u_hit = 1.0 if r_hat <= k else 0.0
    u_ndcg = 1.0 / math.log2(r_hat + 1) if r_hat <= k else 0.0
    return RankingMetrics(hit, ndcg, u_hit, u_ndcg)


def mmr_rerank(
    candidates: list[tuple[int, float]],
    item_embeddings: dict[int, np.ndarray],
    lam: float,
    k: int,
) -> list[int]:
    """Greedy relevance/diversity re-ranking.

    At each step pick argmax of lam * relevance - (1 - lam) * max dot-product
    similarity to the already selected items; the first pick is the pure
    relevance argmax.  Ties break by ascending item id.
    """
    if not candidates:
        raise ValidationError("empty candidate list")
    if not (0.0 <= lam <= 1.0):
        raise ValidationError("lambda must lie in [0, 1]")
    if k > len(candidates):
        raise ValidationError("k exceeds candidate count")
    remaining = sorted(candidates, key=lambda t: t[0])
    selected: list[int] = []
    while remaining and len(selected) < k:
        best = None
        for item, rel in remaining:
            if selected:
                div = max(
                    float(item_embeddings[item] @ item_embeddings[s])
                    for s in selected
                )
            else:
                div = 0.0
            val = lam * rel - (1.0 - lam) * div
            if best is None or val > best[0] or (val == best[0] and item < best[1]):
                best = (val, item)
        selected.append(best[1])
        remaining = [(i, r) for i, r in remaining if i != best[1]]
    return selected


@dataclass(frozen=True)
class InterestMatrix:
    """Fully observed user-item interest table with item attributes."""

    values: np.ndarray  # (|U|, |I|) in [0, 1]
    attributes: dict[int, frozenset[int]]

    def __post_init__(self):
        if np.any(~np.isfinite(self.values)):
            raise ValidationError("interest matrix must be fully observed")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValidationError("interests must lie in [0, 1]")
        for item, attrs in self.attributes.items():
            if not attrs:
                raise ValidationError(f"item {item} has no attributes")

    @property
    def n_users(self) -> int:
        return self.values.shape[0]

    @property
    def n_items(self) -> int:
        return self.values.shape[1]


def synth_interest_matrix(
    n_users: int, n_items: int, n_clusters: int, seed: int = 0,
    n_tags: int = 50,
) -> InterestMatrix:
    """Latent-factor interest matrix with clustered items.

    interest(u, i) = logistic(<g_u, g_i>) where item factors sit around
    cluster centers; attributes are the cluster label plus one random tag
    from a pool large enough that cross-cluster tag collisions are rare.
    """
    if n_clusters > n_items or n_clusters < 1:
        raise ValidationError("need 1 <= n_clusters <= n_items")
    rng = np.random.default_rng(seed)
    dim = 8
    centers = rng.normal(0.0, 1.5, (n_clusters, dim))
    labels = np.arange(n_items) % n_clusters
    item_factors = centers[labels] + rng.normal(0.0, 0.3, (n_items, dim))
    user_factors = rng.normal(0.0, 0.5, (n_users, dim))
    values = 1.0 / (1.0 + np.exp(-user_factors @ item_factors.T))
    attributes = {}
    tags = rng.integers(0, n_tags, n_items)
    for i in range(n_items):
        attributes[i] = frozenset({int(labels[i]), n_clusters + int(tags[i])})
    return InterestMatrix(values=values, attributes=attributes)


@dataclass(frozen=True)
class SatisfactionOutcome:
    """Result of one user's interaction simulation."""

    cumulative_satisfaction: float
    interaction_length: int
    trace: list[dict]  # per round: item, interest, exited


def simulate_satisfaction(
    policy,
    interests: InterestMatrix,
    u: int,
    horizon: int,
    N: int = 1,
    N_q: int = 1,
    temperature: float = 1.0,
    seed: int = 0,
) -> SatisfactionOutcome:
    """Softmax-sampled interaction loop with a boredom exit.

    Each round the policy scores every item for (u, history of recommended
    items); scores are standardized and softmax-sampled at the given
    temperature.  The process exits when at least N_q of the previous
    min(N, rounds so far) recommended items share an attribute with the
    sampled item; the exit round contributes 0 satisfaction.

    ``policy(u, history_items) -> array of per-item scores``.
    """
    if horizon < 1 or N < 1 or N_q > N or N_q < 1:
        raise ValidationError("need horizon >= 1 and 1 <= N_q <= N")
    n_items = interests.n_items
    if n_items == 0:
        raise ValidationError("empty item set")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    rng = Generator(Philox(key=seed))
    history: list[int] = []
    trace: list[dict] = []
    satisfaction = 0.0
    for _round in range(horizon):
        scores = np.asarray(policy(u, list(history)), dtype=float)
        if scores.shape != (n_items,):
            raise ValidationError("policy must score every item")
        std = scores.std()
        z = (scores - scores.mean()) / (std if std > 0 else 1.0)
        z = z / temperature
        z -= z.max()
        probs = np.exp(z)
        probs /= probs.sum()
        item = int(rng.choice(n_items, p=probs))
        recent = history[-N:]
        shared = sum(
            1 for r in recent
            if interests.attributes[r] & interests.attributes[item]
        )
        exited = bool(recent) and shared >= N_q
        interest = float(interests.values[u, item])
        trace.append({"item": item, "interest": interest, "exited": exited})
        if exited:
            break
        satisfaction += interest
        history.append(item)
    return SatisfactionOutcome(
        cumulative_satisfaction=satisfaction,
        interaction_length=len(trace),
        trace=trace,
    )
