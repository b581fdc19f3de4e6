"""Base recommendation model: user/item embeddings with a liked-history
encoder, SGD training, item similarity, k-means grouping and top-k ranking.

The scorer is deliberately small: score(u, v | h) =
logistic(<user_vec(u) + mean of liked item vectors in h, item_vec(v)>).
It exposes exactly the probability interface the counterfactual adjustment
in :mod:`echoloop.causal` wraps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UnknownIdError, ValidationError

CHECKPOINT_VERSION = 1

DEFAULT_HYPER = {
    "k": 64,
    "learning_rate": 0.001,
    "l2_weight": 1e-6,
    "epochs": 5,
    "seed": 0,
    "history_cap": 10,
    "negatives_per_positive": 4,
}

_PRED_EPS = 1e-7


@dataclass(frozen=True)
class InteractionHistory:
    """Bounded chronological sequence of (item, feedback, timestamp)."""

    entries: tuple[tuple[int, int, float], ...] = ()
    capacity: int = 10

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError("history capacity must be >= 1")
        if len(self.entries) > self.capacity:
            raise ValidationError("history exceeds capacity")
        ts = [e[2] for e in self.entries]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValidationError("history entries must be time-ordered")
        for _, fb, _ in self.entries:
            if fb not in (0, 1):
                raise ValidationError("feedback must be 0 or 1")

    def append(self, item: int, feedback: int, timestamp: float) -> "InteractionHistory":
        entries = self.entries + ((item, int(feedback), float(timestamp)),)
        if len(entries) > self.capacity:
            entries = entries[-self.capacity :]
        return replace(self, entries=entries)

    def items(self) -> tuple[int, ...]:
        return tuple(e[0] for e in self.entries)

    def liked_items(self) -> tuple[int, ...]:
        return tuple(e[0] for e in self.entries if e[1] == 1)

    def __len__(self) -> int:
        return len(self.entries)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@dataclass
class EmbeddingModel:
    """Frozen-after-training embedding tables plus id maps."""

    user_ids: list[int]
    item_ids: list[int]
    user_vecs: np.ndarray  # (|U|, k)
    item_vecs: np.ndarray  # (|I|, k)
    hyper: dict
    user_index: dict[int, int] = field(default_factory=dict)
    item_index: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        if not self.item_index:
            self.item_index = {v: i for i, v in enumerate(self.item_ids)}
        if not np.all(np.isfinite(self.user_vecs)) or not np.all(
            np.isfinite(self.item_vecs)
        ):
            raise ValidationError("embedding tables contain non-finite values")

    @property
    def k(self) -> int:
        return self.user_vecs.shape[1]

    def _uidx(self, u: int) -> int:
        try:
            return self.user_index[u]
        except KeyError:
            raise UnknownIdError(f"unknown user id {u}") from None

    def _vidx(self, v: int) -> int:
        try:
            return self.item_index[v]
        except KeyError:
            raise UnknownIdError(f"unknown item id {v}") from None

    def encode_history(self, u: int, h: InteractionHistory | None) -> np.ndarray:
        """User representation: user vector plus mean of liked history
        item vectors (zero vector when no liked items)."""
        f = self.user_vecs[self._uidx(u)].copy()
        if h is not None:
            liked = [self._vidx(v) for v in h.liked_items()]
            if liked:
                f += self.item_vecs[liked].mean(axis=0)
        return f


def score(model: EmbeddingModel, u: int, v: int, h: InteractionHistory | None) -> float:
    """Preference probability for user u on item v given history h."""
    f = model.encode_history(u, h)
    return _sigmoid(float(f @ model.item_vecs[model._vidx(v)]))


def score_many(
    model: EmbeddingModel, u: int, v_indices: np.ndarray, h: InteractionHistory | None
) -> np.ndarray:
    """Vectorized :func:`score` over item table rows."""
    f = model.encode_history(u, h)
    z = model.item_vecs[v_indices] @ f
    return 1.0 / (1.0 + np.exp(-z))


def similarity(model: EmbeddingModel, v1: int, v2: int) -> float:
    """Dot product between two item embeddings (symmetric)."""
    return float(model.item_vecs[model._vidx(v1)] @ model.item_vecs[model._vidx(v2)])


def init_model(
    user_ids: list[int], item_ids: list[int], hyper: dict | None = None
) -> EmbeddingModel:
    """Seeded Gaussian initialization (mean 0, std 0.1)."""
    hp = dict(DEFAULT_HYPER)
    if hyper:
        hp.update(hyper)
    rng = np.random.default_rng(hp["seed"])
    k = hp["k"]
    user_vecs = rng.normal(0.0, 0.1, (len(user_ids), k))
    item_vecs = rng.normal(0.0, 0.1, (len(item_ids), k))
    return EmbeddingModel(
        user_ids=list(user_ids),
        item_ids=list(item_ids),
        user_vecs=user_vecs,
        item_vecs=item_vecs,
        hyper=hp,
    )


def train(
    records: list[tuple[int, int, int, float]],
    hyper: dict | None = None,
    init: EmbeddingModel | None = None,
    prediction_fn=None,
) -> tuple[EmbeddingModel, list[float]]:
    """SGD training on (user, item, feedback, timestamp) records.

    Each record contributes one sample with its observed feedback; each
    positive additionally contributes uniformly sampled non-interacted
    negatives.  Histories are rebuilt chronologically every epoch so the
    encoder always sees the pre-interaction state.

    ``prediction_fn(model, u_idx, v_idx, history) -> (pred, grads)`` can
    replace the plain sigmoid prediction; the counterfactual adjustment
    hooks in here.  ``grads`` is a list of (history, weight, z) triples
    describing the mixture components (see :func:`_base_components`).

    Returns the trained model and the per-epoch mean losses.
    """
    if not records:
        raise ValidationError("training data must be non-empty")
    hp = dict(DEFAULT_HYPER)
    if hyper:
        hp.update(hyper)

    ordered = sorted(records, key=lambda r: (r[3], r[0], r[1]))
    if init is None:
        user_ids = sorted({r[0] for r in ordered})
        item_ids = sorted({r[1] for r in ordered})
        model = init_model(user_ids, item_ids, hp)
    else:
        known_items = set(init.item_ids)
        known_users = set(init.user_ids)
        new_users = sorted({r[0] for r in ordered} - known_users)
        new_items = sorted({r[1] for r in ordered} - known_items)
        rng0 = np.random.default_rng(hp["seed"] + 1)
        user_vecs = init.user_vecs
        item_vecs = init.item_vecs
        if new_users:
            user_vecs = np.vstack(
                [user_vecs, rng0.normal(0.0, 0.1, (len(new_users), init.k))]
            )
        if new_items:
            item_vecs = np.vstack(
                [item_vecs, rng0.normal(0.0, 0.1, (len(new_items), init.k))]
            )
        model = EmbeddingModel(
            user_ids=init.user_ids + new_users,
            item_ids=init.item_ids + new_items,
            user_vecs=user_vecs.copy(),
            item_vecs=item_vecs.copy(),
            hyper=hp,
        )

    U = model.user_vecs
    V = model.item_vecs
    lr = hp["learning_rate"]
    l2 = hp["l2_weight"]
    cap = hp["history_cap"]
    n_neg = hp["negatives_per_positive"]
    n_items = len(model.item_ids)

    interacted: dict[int, set[int]] = {}
    for u, v, _, _ in ordered:
        interacted.setdefault(model._uidx(u), set()).add(model._vidx(v))

    neg_rng = np.random.default_rng([hp["seed"], 0xBEEF])
    epoch_losses: list[float] = []
    for _epoch in range(hp["epochs"]):
        histories: dict[int, InteractionHistory] = {}
        total_loss = 0.0
        n_samples = 0
        for u, v, fb, ts in ordered:
            ui = model._uidx(u)
            vi = model._vidx(v)
            h = histories.get(ui, InteractionHistory(capacity=cap))

            samples = [(vi, float(fb))]
            if fb == 1 and n_neg > 0:
                pool = interacted[ui]
                draws = neg_rng.integers(0, n_items, size=4 * n_neg + 8)
                negs = [int(j) for j in draws if int(j) not in pool][:n_neg]
                samples.extend((j, 0.0) for j in negs)

            if prediction_fn is None:
                components = [(h, 1.0)]
            else:
                components = prediction_fn(model, u, v, h)

            # encoder outputs per mixture component, fixed for this record
            F = np.empty((len(components), model.k))
            liked_lists = []
            for c, (hist, _w) in enumerate(components):
                liked = [model._vidx(x) for x in hist.liked_items()]
                liked_lists.append(liked)
                F[c] = U[ui]
                if liked:
                    F[c] += V[liked].mean(axis=0)
            weights = np.array([w for _h, w in components])

            gu = np.zeros(model.k)
            ghist = np.zeros((len(components), model.k))
            for vj, y in samples:
                vvec = V[vj]
                z = F @ vvec
                sig = 1.0 / (1.0 + np.exp(-z))
                pred = float(weights @ sig)
                pred_c = min(max(pred, _PRED_EPS), 1.0 - _PRED_EPS)
                total_loss += -(y * np.log(pred_c) + (1.0 - y) * np.log(1.0 - pred_c))
                n_samples += 1
                dpred = (pred_c - y) / (pred_c * (1.0 - pred_c))
                g = dpred * weights * sig * (1.0 - sig)  # per component
                V[vj] = vvec - lr * (F.T @ g + l2 * vvec)
                gu += g.sum() * vvec
                ghist += np.outer(g, vvec)
            U[ui] -= lr * (gu + l2 * U[ui])
            for c, liked in enumerate(liked_lists):
                if liked:
                    V[liked] -= lr * (ghist[c] / len(liked))

            histories[ui] = h.append(v, fb, ts)
        epoch_losses.append(total_loss / max(n_samples, 1))
    return model, epoch_losses


@dataclass(frozen=True)
class Grouping:
    """Item-to-group assignment produced by k-means over item embeddings."""

    assignment: dict[int, int]
    centroids: np.ndarray
    d: int


def group_items(model: EmbeddingModel, d: int, seed: int = 0) -> Grouping:
    """Cluster item embeddings into d groups.

    Seeded farthest-point initialization, at most 50 Lloyd iterations,
    ties broken toward the lower centroid index / lower item id so the
    result is deterministic.
    """
    n = len(model.item_ids)
    if d > n:
        raise ValidationError(f"cannot form {d} groups from {n} items")
    if d < 1:
        raise ValidationError("d must be >= 1")
    X = model.item_vecs
    rng = np.random.default_rng(seed)
    first = int(rng.integers(0, n))
    centers = [first]
    dist2 = np.sum((X - X[first]) ** 2, axis=1)
    for _ in range(d - 1):
        nxt = int(np.argmax(dist2))
        centers.append(nxt)
        dist2 = np.minimum(dist2, np.sum((X - X[nxt]) ** 2, axis=1))
    centroids = X[centers].copy()

    labels = np.zeros(n, dtype=int)
    for _ in range(50):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels) and _ > 0:
            break
        labels = new_labels
        for c in range(d):
            members = X[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)

    # keep group ids dense even if a cluster emptied out
    used = sorted(set(labels.tolist()))
    remap = {c: i for i, c in enumerate(used)}
    assignment = {
        model.item_ids[i]: remap[int(labels[i])] for i in range(n)
    }
    centroids = centroids[used]
    return Grouping(assignment=assignment, centroids=centroids, d=len(used))


def recommend(
    model: EmbeddingModel,
    u: int,
    h: InteractionHistory | None,
    k: int,
    exclude: set[int] | None = None,
    candidates: list[int] | None = None,
) -> list[int]:
    """Top-k items by score, excluding ``exclude``; ties by ascending id."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    exclude = exclude or set()
    pool = sorted(candidates) if candidates is not None else model.item_ids
    pool = [v for v in pool if v not in exclude]
    if not pool:
        return []
    f = model.encode_history(u, h)
    idx = [model._vidx(v) for v in pool]
    z = model.item_vecs[idx] @ f
    order = sorted(range(len(pool)), key=lambda i: (-z[i], pool[i]))
    return [pool[i] for i in order[:k]]


def save_checkpoint(model: EmbeddingModel, path) -> None:
    """Write a JSON checkpoint that round-trips bit-exactly."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "k": model.k,
        "hyper": model.hyper,
        "user_ids": model.user_ids,
        "item_ids": model.item_ids,
        "user_vecs": [[float(x).hex() for x in row] for row in model.user_vecs],
        "item_vecs": [[float(x).hex() for x in row] for row in model.item_vecs],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path) -> EmbeddingModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    user_vecs = np.array(
        [[float.fromhex(x) for x in row] for row in payload["user_vecs"]]
    ).reshape(len(payload["user_ids"]), payload["k"])
    item_vecs = np.array(
        [[float.fromhex(x) for x in row] for row in payload["item_vecs"]]
    ).reshape(len(payload["item_ids"]), payload["k"])
    return EmbeddingModel(
        user_ids=payload["user_ids"],
        item_ids=payload["item_ids"],
        user_vecs=user_vecs,
        item_vecs=item_vecs,
        hyper=payload["hyper"],
    )


def export_grouping(grouping: Grouping, path) -> None:
    """CSV export: item-id,group-id."""
    with open(path, "w") as fh:
        fh.write("item_id,group_id\n")
        for item in sorted(grouping.assignment):
            fh.write(f"{item},{grouping.assignment[item]}\n")
