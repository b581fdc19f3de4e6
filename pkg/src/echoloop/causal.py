"""Counterfactually adjusted preference scoring.

The adjusted score is a convex combination of the base scorer evaluated
under the observed history and under n minimally edited counterfactual
histories: the observed weight alpha and per-counterfactual weight beta
satisfy alpha + n*beta = 1 with alpha > beta > 0.  Counterfactual
histories differ from the observed one only in the most recent entry:
either the recorded preference is flipped, or the item is swapped for one
of the least similar items and marked liked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    EmbeddingModel,
    InteractionHistory,
    score,
    score_many,
    similarity,
)
from .errors import ValidationError

FLIP_PREFERENCE = "flip_preference"
SWAP_ITEM = "swap_item"

ALLOCATIONS = ("flip+swap", "swap-only")


@dataclass(frozen=True)
class CounterfactualEdit:
    """Minimal edit applied to the final history entry."""

    kind: str  # FLIP_PREFERENCE | SWAP_ITEM
    replaced_item: int
    replaced_feedback: int


@dataclass(frozen=True)
class CounterfactualBundle:
    """Factual history, its counterfactual variants and mixture weights."""

    factual: InteractionHistory
    counterfactuals: tuple[InteractionHistory, ...]
    edits: tuple[CounterfactualEdit, ...]
    alpha: float
    beta: float

    def __post_init__(self):
        n = len(self.counterfactuals)
        if n == 0:
            if self.alpha != 1.0:
                raise ValidationError("alpha must be 1 when there are no counterfactuals")
        else:
            if abs(self.alpha + n * self.beta - 1.0) > 1e-12:
                raise ValidationError("weights must satisfy alpha + n*beta = 1")
            if not (self.alpha > self.beta > 0.0):
                raise ValidationError("weights must satisfy alpha > beta > 0")
        for cf in self.counterfactuals:
            if cf.entries[:-1] != self.factual.entries[:-1]:
                raise ValidationError("counterfactual must share the factual prefix")
            if cf.entries[-1] == self.factual.entries[-1]:
                raise ValidationError("counterfactual must edit the final entry")

    @property
    def n(self) -> int:
        return len(self.counterfactuals)

    def histories(self) -> list[InteractionHistory]:
        return [self.factual, *self.counterfactuals]

    def weights(self) -> list[float]:
        return [self.alpha] + [self.beta] * self.n


def assign_weights(n: int, alpha: float) -> tuple[float, float]:
    """Solve alpha + n*beta = 1 for beta, enforcing alpha > beta > 0."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    if n == 0:
        return 1.0, 0.0
    if not (0.0 < alpha < 1.0):
        raise ValidationError(
            f"alpha must lie in ({1.0 / (n + 1):.6g}, 1) for n={n}; got {alpha}"
        )
    beta = (1.0 - alpha) / n
    if alpha <= beta:
        raise ValidationError(
            f"alpha={alpha} gives beta={beta:.6g} >= alpha; "
            f"alpha must exceed 1/(n+1) = {1.0 / (n + 1):.6g}"
        )
    return alpha, beta


def least_similar_items(
    model: EmbeddingModel, v_star: int, count: int, candidates: set[int] | list[int]
) -> list[int]:
    """The ``count`` candidates minimizing dot-product similarity to
    v_star, ascending by similarity, ties by ascending item id."""
    pool = sorted(set(candidates))
    if v_star in pool:
        raise ValidationError("candidates must exclude the reference item")
    if not pool:
        raise ValidationError("empty candidate set")
    if count > len(pool):
        raise ValidationError(f"requested {count} items from {len(pool)} candidates")
    scored = [(similarity(model, v, v_star), v) for v in pool]
    scored.sort()
    return [v for _s, v in scored[:count]]


def generate_counterfactuals(
    model: EmbeddingModel,
    factual: InteractionHistory,
    n: int,
    candidates: set[int] | list[int] | None = None,
    alpha: float = 0.3,
    allocation: str = "flip+swap",
) -> CounterfactualBundle:
    """Build the counterfactual bundle for a factual history.

    Default allocation: one flipped-preference variant plus n-1 swaps to
    the least similar items (liked).  "swap-only" uses n swaps.  The swap
    candidate pool defaults to every item not present in the factual
    history.
    """
    if len(factual) == 0:
        raise ValidationError("factual history must be non-empty")
    if n < 0:
        raise ValidationError("n must be >= 0")
    if allocation not in ALLOCATIONS:
        raise ValidationError(f"allocation must be one of {ALLOCATIONS}")
    alpha, beta = assign_weights(n, alpha if n else 1.0)
    if n == 0:
        return CounterfactualBundle(
            factual=factual, counterfactuals=(), edits=(), alpha=1.0, beta=0.0
        )

    last_item, last_fb, last_ts = factual.entries[-1]
    prefix = factual.entries[:-1]
    cfs: list[InteractionHistory] = []
    edits: list[CounterfactualEdit] = []

    n_swaps = n - 1 if allocation == "flip+swap" else n
    if allocation == "flip+swap":
        flipped = 1 - last_fb
        cfs.append(
            InteractionHistory(
                entries=prefix + ((last_item, flipped, last_ts),),
                capacity=factual.capacity,
            )
        )
        edits.append(CounterfactualEdit(FLIP_PREFERENCE, last_item, flipped))

    if n_swaps > 0:
        if candidates is None:
            hist_items = set(factual.items())
            candidates = [v for v in model.item_ids if v not in hist_items]
        else:
            candidates = [v for v in candidates if v != last_item]
        if n_swaps > len(candidates):
            raise ValidationError(
                f"need {n_swaps} swap candidates but only {len(candidates)} available"
            )
        for v in least_similar_items(model, last_item, n_swaps, candidates):
            cfs.append(
                InteractionHistory(
                    entries=prefix + ((v, 1, last_ts),),
                    capacity=factual.capacity,
                )
            )
            edits.append(CounterfactualEdit(SWAP_ITEM, v, 1))

    return CounterfactualBundle(
        factual=factual,
        counterfactuals=tuple(cfs),
        edits=tuple(edits),
        alpha=alpha,
        beta=beta,
    )


def adjusted_score(
    base, model: EmbeddingModel, u: int, v: int, bundle: CounterfactualBundle
) -> float:
    """alpha * base(factual) + beta * sum over counterfactual scores."""
    value = bundle.alpha * base(model, u, v, bundle.factual)
    for cf in bundle.counterfactuals:
        value += bundle.beta * base(model, u, v, cf)
    return value


def adjusted_score_many(
    model: EmbeddingModel, u: int, v_indices: np.ndarray, bundle: CounterfactualBundle
) -> np.ndarray:
    """Vectorized :func:`adjusted_score` over item table rows."""
    preds = bundle.alpha * score_many(model, u, v_indices, bundle.factual)
    for cf in bundle.counterfactuals:
        preds += bundle.beta * score_many(model, u, v_indices, cf)
    return preds


def adjusted_recommend(
    model: EmbeddingModel,
    u: int,
    factual: InteractionHistory,
    n: int,
    alpha: float,
    k: int,
    exclude: set[int] | None = None,
    candidates: list[int] | None = None,
    base=score,
    allocation: str = "flip+swap",
) -> list[int]:
    """Top-k items by adjusted score with one shared bundle per history.

    With n=0 (or an empty factual history) this reduces to the base
    ranking.  Ties break by ascending item id.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    exclude = exclude or set()
    pool = sorted(candidates) if candidates is not None else list(model.item_ids)
    pool = [v for v in pool if v not in exclude]
    if not pool:
        return []
    idx = np.array([model._vidx(v) for v in pool])
    if n == 0 or len(factual) == 0:
        if base is score:
            scores = score_many(model, u, idx, factual)
        else:
            scores = [base(model, u, v, factual) for v in pool]
    else:
        bundle = generate_counterfactuals(model, factual, n, alpha=alpha,
                                          allocation=allocation)
        if base is score:
            scores = adjusted_score_many(model, u, idx, bundle)
        else:
            scores = [adjusted_score(base, model, u, v, bundle) for v in pool]
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i]))
    return [pool[i] for i in order[:k]]


def counterfactual_prediction_fn(n: int, alpha: float, allocation: str = "flip+swap"):
    """Adapter for :func:`echoloop.engine.train`: returns the mixture
    components (history, weight) used for each training record.

    With n=0 the components are identical to the base path, so training is
    bit-for-bit the same as the unadjusted model.
    """
    if n == 0:
        return None

    def components(model, u, v, h):
        if len(h) == 0:
            return [(h, 1.0)]
        bundle = generate_counterfactuals(model, h, n, alpha=alpha,
                                          allocation=allocation)
        return list(zip(bundle.histories(), bundle.weights()))

    return components
