"""Rating-log ingestion, feedback binarization, chronological phase
splitting, leave-one-out evaluation splits and synthetic clustered
dataset generation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class RatingRecord:
    user: int
    item: int
    rating: float
    timestamp: float

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise ValidationError("timestamp must be finite")


@dataclass(frozen=True)
class IngestResult:
    records: list[RatingRecord]
    errors: list[tuple[int, str]]  # (line number, message)


DEFAULT_SCHEMA = {"user": 0, "item": 1, "rating": 2, "timestamp": 3}


def ingest(
    path,
    delimiter: str = "::",
    schema: dict[str, int] | None = None,
    max_malformed_fraction: float = 0.1,
) -> IngestResult:
    """Parse a delimited rating log.

    Malformed lines are collected with their line numbers; ingestion fails
    only when more than ``max_malformed_fraction`` of non-empty lines are
    malformed.
    """
    schema = schema or DEFAULT_SCHEMA
    for col in ("user", "item", "rating", "timestamp"):
        if col not in schema:
            raise ValidationError(f"schema missing column {col!r}")
    records: list[RatingRecord] = []
    errors: list[tuple[int, str]] = []
    n_lines = 0
    try:
        fh = open(path)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            n_lines += 1
            parts = line.split(delimiter)
            try:
                records.append(
                    RatingRecord(
                        user=int(parts[schema["user"]]),
                        item=int(parts[schema["item"]]),
                        rating=float(parts[schema["rating"]]),
                        timestamp=float(parts[schema["timestamp"]]),
                    )
                )
            except (IndexError, ValueError) as exc:
                errors.append((lineno, f"{exc}: {line!r}"))
    if n_lines and len(errors) / n_lines > max_malformed_fraction:
        raise ValidationError(
            f"{len(errors)}/{n_lines} lines malformed (first: line "
            f"{errors[0][0]}: {errors[0][1]})"
        )
    return IngestResult(records=records, errors=errors)


@dataclass(frozen=True)
class Interaction:
    """Binarized record: feedback 1 = like, 0 = dislike."""

    user: int
    item: int
    feedback: int
    timestamp: float

    def as_tuple(self) -> tuple[int, int, int, float]:
        return (self.user, self.item, self.feedback, self.timestamp)


def binarize(
    records: list[RatingRecord],
    like_threshold: float = 4.0,
    dislike_threshold: float = 3.0,
) -> list[Interaction]:
    """Ratings >= like_threshold become likes, <= dislike_threshold
    dislikes.  Ratings strictly between the thresholds are dropped."""
    if like_threshold <= dislike_threshold:
        raise ValidationError("like_threshold must exceed dislike_threshold")
    out = []
    for r in records:
        if r.rating >= like_threshold:
            out.append(Interaction(r.user, r.item, 1, r.timestamp))
        elif r.rating <= dislike_threshold:
            out.append(Interaction(r.user, r.item, 0, r.timestamp))
    return out


def _phase_stats(records: list[Interaction]) -> dict:
    return {
        "users": len({r.user for r in records}),
        "items": len({r.item for r in records}),
        "interactions": len(records),
    }


@dataclass(frozen=True)
class PhaseSplit:
    phases: list[list[Interaction]]
    boundaries: tuple[float, float]
    stats: list[dict]


def parse_boundary(value) -> float:
    """Accept epoch seconds or an ISO-8601 date (UTC midnight)."""
    if isinstance(value, (int, float)):
        return float(value)
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def phase_split(records: list[Interaction], boundaries) -> PhaseSplit:
    """Three chronological phases: t < b1, b1 <= t < b2, t >= b2."""
    if len(boundaries) != 2:
        raise ValidationError("exactly two boundaries required")
    b1, b2 = (parse_boundary(b) for b in boundaries)
    if not b1 < b2:
        raise ValidationError(f"boundaries must be strictly increasing: {b1} >= {b2}")
    phases: list[list[Interaction]] = [[], [], []]
    for r in records:
        if r.timestamp < b1:
            phases[0].append(r)
        elif r.timestamp < b2:
            phases[1].append(r)
        else:
            phases[2].append(r)
    return PhaseSplit(
        phases=phases,
        boundaries=(b1, b2),
        stats=[_phase_stats(p) for p in phases],
    )


@dataclass(frozen=True)
class EvalSplit:
    train: list[Interaction]
    validation: dict[int, Interaction]  # per eval user
    test: dict[int, Interaction]
    excluded_users: list[int]  # users with < 3 positives, train-only


def leave_one_out(records: list[Interaction]) -> EvalSplit:
    """Per user: chronologically last positive to test, second-to-last to
    validation, everything else to train.  Timestamp ties break by higher
    item id = later.  Users with fewer than 3 positives stay train-only.
    """
    by_user: dict[int, list[Interaction]] = {}
    for r in records:
        by_user.setdefault(r.user, []).append(r)
    train: list[Interaction] = []
    validation: dict[int, Interaction] = {}
    test: dict[int, Interaction] = {}
    excluded: list[int] = []
    for user in sorted(by_user):
        recs = sorted(by_user[user], key=lambda r: (r.timestamp, r.item))
        positives = [r for r in recs if r.feedback == 1]
        if len(positives) < 3:
            train.extend(recs)
            excluded.append(user)
            continue
        test_r, val_r = positives[-1], positives[-2]
        test[user] = test_r
        validation[user] = val_r
        train.extend(r for r in recs if r is not test_r and r is not val_r)
    train.sort(key=lambda r: (r.timestamp, r.user, r.item))
    return EvalSplit(train=train, validation=validation, test=test,
                     excluded_users=excluded)


def synth_dataset(
    n_users: int = 200,
    n_items: int = 300,
    n_clusters: int = 3,
    interactions_per_user: int = 30,
    horizon: float = 3.0e6,
    seed: int = 0,
    sharpness: float = 3.0,
) -> list[Interaction]:
    """Clustered synthetic rating log.

    Each user has a home cluster; items are drawn with probability
    proportional to exp(sharpness * affinity), and the drawn item is liked
    with probability rising in affinity.  Timestamps spread uniformly over
    the horizon so the phase split applies.
    """
    if n_clusters > n_items or n_clusters < 1:
        raise ValidationError("need 1 <= n_clusters <= n_items")
    if n_users < 1 or interactions_per_user < 1:
        raise ValidationError("need users and interactions")
    rng = np.random.default_rng(seed)
    item_cluster = np.arange(n_items) % n_clusters
    user_cluster = rng.integers(0, n_clusters, n_users)
    records: list[Interaction] = []
    for u in range(n_users):
        affinity = np.where(item_cluster == user_cluster[u], 1.0, 0.0)
        # mild idiosyncratic taste so users are not cluster-identical
        affinity = affinity + rng.normal(0.0, 0.15, n_items)
        w = np.exp(sharpness * affinity)
        probs = w / w.sum()
        items = rng.choice(n_items, size=interactions_per_user, replace=False,
                           p=probs)
        times = np.sort(rng.uniform(0.0, horizon, interactions_per_user))
        for v, t in zip(items, times):
            p_like = 1.0 / (1.0 + np.exp(-sharpness * (affinity[v] - 0.3)))
            fb = 1 if rng.random() < p_like else 0
            records.append(Interaction(int(u), int(v), fb, float(t)))
    records.sort(key=lambda r: (r.timestamp, r.user, r.item))
    return records


def export_interactions(records: list[Interaction], path) -> None:
    """Canonical TSV: user, item, feedback, timestamp."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.user}\t{r.item}\t{r.feedback}\t{r.timestamp!r}\n")


def import_interactions(path) -> list[Interaction]:
    out = []
    with open(path) as fh:
        for line in fh:
            u, v, fb, ts = line.rstrip("\n").split("\t")
            out.append(Interaction(int(u), int(v), int(fb), float(ts)))
    return out


def write_stats_sidecar(records: list[Interaction], path) -> None:
    with open(path, "w") as fh:
        json.dump(_phase_stats(records), fh, sort_keys=True)
