"""Markov-chain model of recommendation feedback loops over item groups.

States are length-m sequences of group labels (d groups).  A user
interaction appends the new item's group and evicts the oldest, so every
positive transition goes to a "shifted" successor.  Three behavior types
are supported:

* type1 -- the user only consumes recommendations; the new group is drawn
  from a distribution supported on the groups already in the history,
  which makes the constant sequences absorbing states.
* type2 -- the user ignores recommendations; the new group is drawn from a
  strictly positive free-choice distribution, so no state is absorbing.
* type3 -- with probability p the user follows recommendations (type1
  mass), otherwise the free-choice distribution applies (type2 mass).

Exact analysis (dense powers, fundamental matrix) is limited to
d^m <= EXACT_STATE_CAP states; beyond that only simulation applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.random import Generator, Philox

from .errors import (
    NotAbsorbingChain,
    NumericalError,
    StateSpaceOverflow,
    ValidationError,
)

EXACT_STATE_CAP = 1 << 16

ROW_SUM_TOL = 1e-12

EMPTY_SLOT = -1

# distribution over the next group, given the current group sequence
RecGroupDist = Callable[[tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class GroupState:
    """A length-m sequence of group labels; empty slots form a prefix."""

    groups: tuple[int, ...]
    d: int

    def __post_init__(self):
        if len(self.groups) == 0:
            raise ValidationError("group sequence must be non-empty")
        for g in self.groups:
            if g != EMPTY_SLOT and not (0 <= g < self.d):
                raise ValidationError(f"group id {g} outside 0..{self.d - 1}")
        n_empty = sum(1 for g in self.groups if g == EMPTY_SLOT)
        if n_empty and any(g != EMPTY_SLOT for g in self.groups[:n_empty]):
            raise ValidationError("empty slots must form a prefix")

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def is_full(self) -> bool:
        return EMPTY_SLOT not in self.groups

    def is_constant(self) -> bool:
        return self.is_full and len(set(self.groups)) == 1


def state_index(groups: Sequence[int], d: int) -> int:
    """Lexicographic index of a full group sequence (base-d digits)."""
    idx = 0
    for g in groups:
        if not (0 <= g < d):
            raise ValidationError(f"group id {g} outside 0..{d - 1}")
        idx = idx * d + g
    return idx


def state_tuple(index: int, d: int, m: int) -> tuple[int, ...]:
    groups = []
    for _ in range(m):
        groups.append(index % d)
        index //= d
    return tuple(reversed(groups))


def _frequency_dist(d: int) -> RecGroupDist:
    """Default recommendation-group distribution: frequency of each group
    within the current history."""
    def dist(groups: tuple[int, ...]) -> np.ndarray:
        p = np.zeros(d)
        for g in groups:
            p[g] += 1.0
        return p / p.sum()

    return dist


@dataclass(frozen=True)
class TransitionModel:
    """Row-stochastic transition structure over the d^m group sequences.

    ``probs[i, g]`` is the probability of moving from state i to its
    shifted successor ending in group g; the successor index is
    ``(i mod d^(m-1)) * d + g``.  ``rows`` exposes the same data as a
    sparse map for inspection.
    """

    d: int
    m: int
    behavior_type: str  # "type1" | "type2" | "type3"
    probs: np.ndarray  # (d^m, d), row sums 1
    p: float | None = None
    free_group_dist: np.ndarray | None = None

    def __post_init__(self):
        n = self.d**self.m
        if self.probs.shape != (n, self.d):
            raise ValidationError("probs shape mismatch")
        sums = self.probs.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValidationError("transition rows must sum to 1")
        self.probs.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.d**self.m

    def successor_indices(self, i: int) -> np.ndarray:
        base = (i % self.d ** (self.m - 1)) * self.d
        return base + np.arange(self.d)

    @property
    def rows(self) -> dict[int, list[tuple[int, float]]]:
        out: dict[int, list[tuple[int, float]]] = {}
        for i in range(self.n_states):
            succ = self.successor_indices(i)
            row = [(int(s), float(p)) for s, p in zip(succ, self.probs[i]) if p > 0.0]
            out[i] = row
        return out

    def dense(self) -> np.ndarray:
        n = self.n_states
        P = np.zeros((n, n))
        for i in range(n):
            P[i, self.successor_indices(i)] = self.probs[i]
        return P


def _check_cap(d: int, m: int) -> None:
    if d < 1 or m < 1:
        raise ValidationError("d and m must be >= 1")
    if d**m > EXACT_STATE_CAP:
        raise StateSpaceOverflow(
            f"d^m = {d ** m} exceeds the exact-mode cap {EXACT_STATE_CAP}; "
            "use Monte-Carlo simulation"
        )


def _type1_masses(d: int, m: int, rec_group_dist: RecGroupDist | None) -> np.ndarray:
    """Per-state next-group masses restricted to history groups, renormalized."""
    dist = rec_group_dist if rec_group_dist is not None else _frequency_dist(d)
    n = d**m
    out = np.zeros((n, d))
    for i in range(n):
        groups = state_tuple(i, d, m)
        p = np.asarray(dist(groups), dtype=float)
        if p.shape != (d,) or np.any(p < 0):
            raise ValidationError("rec_group_dist must return a length-d nonnegative vector")
        mask = np.zeros(d)
        mask[list(set(groups))] = 1.0
        masses = mask * p
        total = masses.sum()
        if total <= 0.0:
            raise ValidationError(
                f"degenerate recommendation distribution at state {groups}: "
                "no mass on history groups"
            )
        out[i] = masses / total
    return out


def build_type1(
    d: int, m: int, rec_group_dist: RecGroupDist | None = None
) -> TransitionModel:
    """Chain for users that only interact with recommended items.

    The next group must already appear in the history; mass outside the
    history is zeroed and the remainder renormalized.  Default
    distribution: proportional to group frequency within the history.
    """
    _check_cap(d, m)
    probs = _type1_masses(d, m, rec_group_dist)
    return TransitionModel(d=d, m=m, behavior_type="type1", probs=probs)


def build_type2(d: int, m: int, free_group_dist: Sequence[float]) -> TransitionModel:
    """Chain for users that ignore recommendations entirely."""
    _check_cap(d, m)
    free = np.asarray(free_group_dist, dtype=float)
    if free.shape != (d,):
        raise ValidationError("free_group_dist must have length d")
    if np.any(free <= 0.0):
        raise ValidationError("free_group_dist must be strictly positive")
    if abs(free.sum() - 1.0) > 1e-9:
        raise ValidationError("free_group_dist must sum to 1")
    probs = np.tile(free, (d**m, 1))
    return TransitionModel(
        d=d, m=m, behavior_type="type2", probs=probs, free_group_dist=free
    )


def build_type3(
    d: int,
    m: int,
    rec_group_dist: RecGroupDist | None,
    free_group_dist: Sequence[float],
    p: float,
) -> TransitionModel:
    """Mixture chain: follow recommendations with probability p, free
    choice otherwise."""
    if not (0.0 < p < 1.0):
        raise ValidationError(
            "p must lie strictly in (0,1); use build_type1 for p=1 or "
            "build_type2 for p=0"
        )
    _check_cap(d, m)
    free = np.asarray(free_group_dist, dtype=float)
    if free.shape != (d,) or np.any(free <= 0.0):
        raise ValidationError("free_group_dist must be strictly positive, length d")
    if abs(free.sum() - 1.0) > 1e-9:
        raise ValidationError("free_group_dist must sum to 1")
    rec = _type1_masses(d, m, rec_group_dist)
    probs = p * rec + (1.0 - p) * free[None, :]
    return TransitionModel(
        d=d,
        m=m,
        behavior_type="type3",
        probs=probs,
        p=p,
        free_group_dist=free,
    )


@dataclass(frozen=True)
class AbsorbingDecomposition:
    """Block form of an absorbing chain and its fundamental matrix."""

    transient_states: list[int]
    absorbing_states: list[int]
    Q: np.ndarray
    R: np.ndarray
    N: np.ndarray  # (I - Q)^-1
    B: np.ndarray  # N @ R, absorption probabilities


def decompose_absorbing(model: TransitionModel) -> AbsorbingDecomposition:
    """Classify states and compute absorption probabilities.

    A state is absorbing iff its entire mass sits on itself.  Raises
    NotAbsorbingChain when no state qualifies and NumericalError when
    (I - Q) is numerically singular.
    """
    n = model.n_states
    absorbing, transient = [], []
    for i in range(n):
        succ = model.successor_indices(i)
        self_pos = np.where(succ == i)[0]
        if self_pos.size and abs(model.probs[i, self_pos[0]] - 1.0) <= ROW_SUM_TOL:
            absorbing.append(i)
        else:
            transient.append(i)
    if not absorbing:
        raise NotAbsorbingChain(
            f"{model.behavior_type} chain (d={model.d}, m={model.m}) has no "
            "absorbing state"
        )
    P = model.dense()
    Q = P[np.ix_(transient, transient)]
    R = P[np.ix_(transient, absorbing)]
    I = np.eye(len(transient))
    A = I - Q
    cond = np.linalg.cond(A) if len(transient) else 1.0
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(
            f"(I - Q) is numerically singular (condition number {cond:.3e}); "
            "some transient state may never reach an absorbing state"
        )
    try:
        N = np.linalg.solve(A, I)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - cond check first
        raise NumericalError(f"(I - Q) inversion failed: {exc}") from exc
    B = N @ R
    return AbsorbingDecomposition(
        transient_states=transient,
        absorbing_states=absorbing,
        Q=Q,
        R=R,
        N=N,
        B=B,
    )


def k_step(model: TransitionModel, k: int) -> np.ndarray:
    """k-step transition matrix by repeated squaring (exact mode only)."""
    if k < 0:
        raise ValidationError("k must be >= 0")
    _check_cap(model.d, model.m)
    n = model.n_states
    result = np.eye(n)
    base = model.dense()
    e = k
    while e:
        if e & 1:
            result = result @ base
        base = base @ base
        e >>= 1
    return result


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Seeded Monte-Carlo trajectories through the chain's state indices."""

    states: np.ndarray  # (n_traj, horizon + 1) int32
    seed: int
    horizon: int

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    def final_states(self) -> np.ndarray:
        return self.states[:, -1]

    def state_frequencies(self, step: int, n_states: int) -> np.ndarray:
        return np.bincount(self.states[:, step], minlength=n_states) / self.n_traj


def simulate(
    model: TransitionModel,
    start: GroupState | Sequence[int],
    horizon: int,
    n_traj: int,
    seed: int,
) -> TrajectoryEnsemble:
    """Run seeded trajectories from a common start state.

    Trajectory i consumes row i of a counter-based uniform table derived
    from the seed, so results are identical regardless of execution order
    or thread count.  Sampling is inverse-CDF over the fixed lexicographic
    successor ordering.
    """
    if horizon < 1 or n_traj < 1:
        raise ValidationError("horizon and n_traj must be >= 1")
    if isinstance(start, GroupState):
        if start.d != model.d or start.m != model.m or not start.is_full:
            raise ValidationError("start state inconsistent with model (d, m)")
        groups = start.groups
    else:
        groups = tuple(start)
        if len(groups) != model.m:
            raise ValidationError("start state inconsistent with model (d, m)")
    start_idx = state_index(groups, model.d)

    cdf = np.cumsum(model.probs, axis=1)
    succ_base = (
        np.arange(model.n_states) % model.d ** (model.m - 1)
    ) * model.d

    uniforms = Generator(Philox(seed)).random((n_traj, horizon))
    traj = np.empty((n_traj, horizon + 1), dtype=np.int32)
    traj[:, 0] = start_idx
    current = np.full(n_traj, start_idx, dtype=np.int64)
    for t in range(horizon):
        rows = cdf[current]
        cols = np.minimum(
            (rows < uniforms[:, t, None]).sum(axis=1), model.d - 1
        )
        current = succ_base[current] + cols
        traj[:, t + 1] = current
    return TrajectoryEnsemble(states=traj, seed=seed, horizon=horizon)


def chain_from_spec(spec: dict) -> TransitionModel:
    """Build a TransitionModel from a chain-spec mapping.

    Expected keys: d, m, behavior_type ("type1"|"type2"|"type3"),
    optional p, free_group_dist, rec_dist_mode ("history-frequency").
    """
    try:
        d = int(spec["d"])
        m = int(spec["m"])
        behavior = str(spec["behavior_type"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid chain spec: {exc}") from exc
    mode = spec.get("rec_dist_mode", "history-frequency")
    if mode != "history-frequency":
        raise ValidationError(f"unknown rec_dist_mode {mode!r}")
    free = spec.get("free_group_dist")
    if free is None:
        free = [1.0 / d] * d
    if behavior == "type1":
        return build_type1(d, m)
    if behavior == "type2":
        return build_type2(d, m, free)
    if behavior == "type3":
        if "p" not in spec:
            raise ValidationError("type3 chain spec requires p")
        return build_type3(d, m, None, free, float(spec["p"]))
    raise ValidationError(f"unknown behavior_type {behavior!r}")


def analyze_chain(
    model: TransitionModel,
    k_for_limit: int | None = None,
    mc_trajectories: int = 0,
    mc_horizon: int = 64,
    mc_seed: int = 0,
) -> dict:
    """Full analysis report used by the CLI: classification, absorption
    matrix, limit matrix and optional Monte-Carlo agreement statistics."""
    n = model.n_states
    report: dict = {
        "d": model.d,
        "m": model.m,
        "behavior_type": model.behavior_type,
        "n_states": n,
        "states": [list(state_tuple(i, model.d, model.m)) for i in range(n)],
    }
    try:
        dec = decompose_absorbing(model)
        report["classification"] = "absorbing"
        report["absorbing_states"] = dec.absorbing_states
        report["transient_states"] = dec.transient_states
        report["B"] = dec.B.tolist()
        limit = np.zeros((n, n))
        for r, i in enumerate(dec.transient_states):
            limit[i, dec.absorbing_states] = dec.B[r]
        for i in dec.absorbing_states:
            limit[i, i] = 1.0
        report["limit_matrix"] = limit.tolist()
    except NotAbsorbingChain:
        dec = None
        report["classification"] = "NotAbsorbingChain"
        Pm = k_step(model, model.m)
        report["irreducible_at_m_steps"] = bool(np.all(Pm > 0))
    if k_for_limit is not None:
        report["k"] = k_for_limit
        report["k_step_matrix"] = k_step(model, k_for_limit).tolist()
    if mc_trajectories > 0 and dec is not None and dec.transient_states:
        start = state_tuple(dec.transient_states[0], model.d, model.m)
        ens = simulate(model, start, mc_horizon, mc_trajectories, mc_seed)
        freqs = ens.state_frequencies(mc_horizon, n)
        expected = np.zeros(n)
        expected[dec.absorbing_states] = dec.B[0]
        report["mc"] = {
            "start_state": list(start),
            "trajectories": mc_trajectories,
            "horizon": mc_horizon,
            "seed": mc_seed,
            "absorption_frequencies": freqs[dec.absorbing_states].tolist(),
            "max_abs_error": float(np.max(np.abs(freqs - expected))),
        }
    return report
