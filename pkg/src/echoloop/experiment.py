"""End-to-end experiment driver.

Reproduces the three-phase protocol at desk scale: train a shared phase-1
base model, then per arm (base / counterfactually adjusted / MMR) continue
training on phases 2 and 3, recommend top-k per user, and measure content
diversity change, ranking metrics and boredom-exit satisfaction.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import data as dp
from . import engine, evaluation
from .causal import (
    adjusted_score_many,
    counterfactual_prediction_fn,
    generate_counterfactuals,
)
from .engine import EmbeddingModel, InteractionHistory, score_many
from .errors import ValidationError

SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "dataset": {
        "path": None,
        "delimiter": "::",
        "like_threshold": 4.0,
        "dislike_threshold": 3.0,
        "synth": {
            "n_users": 200,
            "n_items": 300,
            "n_clusters": 3,
            "interactions_per_user": 30,
            "horizon": 3.0e6,
            "seed": 0,
        },
    },
    "boundaries": None,  # default: thirds of the synth horizon
    "hyper": {
        "k": 64,
        "learning_rate": 0.001,
        "l2_weight": 1e-6,
        "epochs": 5,
        "seed": 0,
        "history_cap": 10,
        "negatives_per_positive": 4,
    },
    "ctf": {"n": 9, "alpha": 0.3, "allocation": "flip+swap"},
    "eval": {
        "k": 10,
        "n_negatives": 100,
        "mmr_lambda": 0.5,
    },
    "satisfaction": {
        "n_users": 40,
        "n_items": 100,
        "n_clusters": 4,
        "interactions_per_user": 30,
        "interest_threshold": 0.5,
        "N": 1,
        "N_q": 1,
        "temperature": 1.0,
        "horizon": 100,
        "seed": 0,
    },
    "markov": {"d": 2, "m": 2, "behavior_type": "type1", "p": None},
    "arms": ["base", "dccf"],
}

VALID_ARMS = ("base", "dccf", "mmr")


def make_config(overrides: dict | None = None) -> dict:
    """Deep-merge overrides into the default configuration and validate."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst, src):
        for key, val in src.items():
            if isinstance(val, dict) and isinstance(dst.get(key), dict):
                merge(dst[key], val)
            else:
                dst[key] = val

    if overrides:
        merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for arm in cfg["arms"]:
        if arm not in VALID_ARMS:
            raise ValidationError(f"unknown arm {arm!r}; valid: {VALID_ARMS}")
    ctf = cfg["ctf"]
    if ctf["n"] < 0:
        raise ValidationError("ctf.n must be >= 0")
    if ctf["n"] > 0:
        from .causal import assign_weights

        assign_weights(ctf["n"], ctf["alpha"])
    ev = cfg["eval"]
    if ev["k"] < 1 or ev["n_negatives"] < 1:
        raise ValidationError("eval.k and eval.n_negatives must be >= 1")
    if not (0.0 <= ev["mmr_lambda"] <= 1.0):
        raise ValidationError("eval.mmr_lambda must lie in [0, 1]")
    sat = cfg["satisfaction"]
    if not (1 <= sat["N_q"] <= sat["N"]):
        raise ValidationError("need 1 <= satisfaction.N_q <= satisfaction.N")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:16]


def load_dataset(cfg: dict) -> list[dp.Interaction]:
    ds = cfg["dataset"]
    if ds["path"]:
        result = dp.ingest(ds["path"], delimiter=ds["delimiter"])
        return dp.binarize(
            result.records, ds["like_threshold"], ds["dislike_threshold"]
        )
    return dp.synth_dataset(**ds["synth"])


def dataset_boundaries(cfg: dict) -> tuple[float, float]:
    if cfg["boundaries"]:
        return tuple(cfg["boundaries"])
    horizon = cfg["dataset"]["synth"]["horizon"]
    return (horizon / 3.0, 2.0 * horizon / 3.0)


def _user_histories(
    train: list[dp.Interaction], cap: int
) -> dict[int, InteractionHistory]:
    """Chronological per-user history over a phase's training records."""
    hist: dict[int, InteractionHistory] = {}
    for r in train:
        h = hist.get(r.user, InteractionHistory(capacity=cap))
        hist[r.user] = h.append(r.item, r.feedback, r.timestamp)
    return hist


def _arm_scores(
    arm: str,
    cfg: dict,
    model: EmbeddingModel,
    u: int,
    idx: np.ndarray,
    h: InteractionHistory,
    alpha: float | None = None,
) -> np.ndarray:
    """Per-candidate preference scores under one experiment arm.

    The base and MMR arms use the plain scorer; the adjusted arm mixes the
    counterfactual components.  n=0 routes through the identical base
    path so the reduction to the base arm is bit-exact.
    """
    n = cfg["ctf"]["n"] if arm == "dccf" else 0
    if n == 0 or len(h) == 0:
        return score_many(model, u, idx, h)
    bundle = generate_counterfactuals(
        model,
        h,
        n,
        alpha=alpha if alpha is not None else cfg["ctf"]["alpha"],
        allocation=cfg["ctf"]["allocation"],
    )
    return adjusted_score_many(model, u, idx, bundle)


def _rank_of_target(
    scores: np.ndarray, items: list[int], target: int
) -> int:
    """1-based rank under descending score, ties by ascending item id."""
    order = sorted(range(len(items)), key=lambda i: (-scores[i], items[i]))
    for pos, i in enumerate(order):
        if items[i] == target:
            return pos + 1
    raise ValidationError("target not among candidates")


def _phase_evaluation(
    arm: str,
    cfg: dict,
    model: EmbeddingModel,
    split: dp.EvalSplit,
    phase_no: int,
    alpha: float | None = None,
) -> dict:
    """Recommendations, diversity inputs and ranking metrics for one
    (arm, phase) cell."""
    ev = cfg["eval"]
    cap = cfg["hyper"]["history_cap"]
    seed = cfg["hyper"]["seed"]
    histories = _user_histories(split.train, cap)
    liked_by_user: dict[int, set[int]] = {}
    interacted: dict[int, set[int]] = {}
    for r in split.train:
        interacted.setdefault(r.user, set()).add(r.item)
        if r.feedback == 1:
            liked_by_user.setdefault(r.user, set()).add(r.item)

    catalog = [v for v in model.item_ids]
    catalog_idx = {v: i for i, v in enumerate(model.item_ids)}
    recs: dict[int, list[int]] = {}
    metrics: list[evaluation.RankingMetrics] = []

    for user in sorted(split.test):
        if user not in model.user_index:
            continue
        h = histories.get(user, InteractionHistory(capacity=cap))
        exclude = interacted.get(user, set())
        pool = [v for v in catalog if v not in exclude]
        if not pool:
            continue
        idx = np.array([catalog_idx[v] for v in pool])
        scores = _arm_scores(arm, cfg, model, user, idx, h, alpha)
        if arm == "mmr":
            emb = {v: model.item_vecs[catalog_idx[v]] for v in pool}
            recs[user] = evaluation.mmr_rerank(
                list(zip(pool, scores.tolist())),
                emb,
                ev["mmr_lambda"],
                min(ev["k"], len(pool)),
            )
        else:
            order = sorted(
                range(len(pool)), key=lambda i: (-scores[i], pool[i])
            )
            recs[user] = [pool[i] for i in order[: ev["k"]]]

        # ranking on the held-out positive against sampled negatives
        target = split.test[user].item
        if target not in catalog_idx:
            continue
        liked = liked_by_user.get(user, set())
        neg_pool = [v for v in catalog if v != target and v not in liked]
        rng = np.random.default_rng([seed, phase_no, user])
        n_neg = min(ev["n_negatives"], len(neg_pool))
        negs = list(rng.choice(np.array(neg_pool), size=n_neg, replace=False))
        cand = [target] + [int(v) for v in negs]
        cidx = np.array([catalog_idx[v] for v in cand])
        cscores = _arm_scores(arm, cfg, model, user, cidx, h, alpha)
        if arm == "mmr":
            emb = {v: model.item_vecs[catalog_idx[v]] for v in cand}
            ordering = evaluation.mmr_rerank(
                list(zip(cand, cscores.tolist())), emb, ev["mmr_lambda"], len(cand)
            )
            rank = ordering.index(target) + 1
        else:
            rank = _rank_of_target(cscores, cand, target)
        metrics.append(
            evaluation.ranking_metrics(rank, ev["k"], n_neg, len(catalog))
        )

    summary = {}
    if metrics:
        for name in ("hit_at_k", "ndcg_at_k", "u_hit_at_k", "u_ndcg_at_k"):
            summary[name] = float(np.mean([getattr(m, name) for m in metrics]))
        summary["n_users"] = len(metrics)
    return {"recs": recs, "ranking": summary}


def run_experiment(cfg: dict, alpha_override: float | None = None) -> dict:
    """Run every configured arm over the three phases.

    ``alpha_override`` swaps the adjusted arm's factual weight without
    touching the rest of the config (used by the sensitivity sweep).
    """
    records = load_dataset(cfg)
    phases = dp.phase_split(records, dataset_boundaries(cfg))
    splits = [dp.leave_one_out(p) for p in phases.phases]
    for i, s in enumerate(splits):
        if not s.train:
            raise ValidationError(f"phase {i + 1} has no training data")

    hyper = cfg["hyper"]
    alpha = alpha_override if alpha_override is not None else cfg["ctf"]["alpha"]
    model_p1, losses_p1 = engine.train(
        [r.as_tuple() for r in splits[0].train], hyper
    )

    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "alpha": alpha,
        "phase_stats": phases.stats,
        "phase1_epoch_losses": losses_p1,
        "arms": {},
    }

    for arm in cfg["arms"]:
        if arm == "dccf":
            pred_fn = counterfactual_prediction_fn(
                cfg["ctf"]["n"], alpha, cfg["ctf"]["allocation"]
            )
        else:
            pred_fn = None
        model_p2, _ = engine.train(
            [r.as_tuple() for r in splits[1].train], hyper, init=model_p1,
            prediction_fn=pred_fn,
        )
        model_p3, _ = engine.train(
            [r.as_tuple() for r in splits[2].train], hyper, init=model_p2,
            prediction_fn=pred_fn,
        )
        models = {1: model_p1, 2: model_p2, 3: model_p3}

        recs_by_phase: dict[int, dict[int, list[int]]] = {}
        emb_by_phase: dict[int, dict[int, np.ndarray]] = {}
        ranking: dict[str, dict] = {}
        for phase_no in (1, 2, 3):
            model = models[phase_no]
            # phase 1 is the shared pre-framework model for every arm
            cell_arm = "base" if phase_no == 1 else arm
            cell = _phase_evaluation(
                cell_arm, cfg, model, splits[phase_no - 1], phase_no, alpha
            )
            recs_by_phase[phase_no] = cell["recs"]
            emb_by_phase[phase_no] = {
                v: model.item_vecs[i] for i, v in enumerate(model.item_ids)
            }
            ranking[f"phase{phase_no}"] = cell["ranking"]

        div = evaluation.diversity_change(recs_by_phase, emb_by_phase)
        report["arms"][arm] = {
            "diversity": {
                "per_phase": {str(k): v for k, v in div.per_phase_diversity.items()},
                "delta12": div.deltas[(1, 2)],
                "delta13": div.deltas[(1, 3)],
                "skipped_users": {str(k): v for k, v in div.skipped_users.items()},
            },
            "ranking": ranking,
        }
    return report


def run_satisfaction(cfg: dict, seed: int | None = None,
                     arms: list[str] | None = None) -> dict:
    """Boredom-exit simulation on the synthetic interest matrix.

    Trains one base model on interactions sampled from the matrix, then
    simulates every user under each policy and reports mean cumulative
    satisfaction and interaction length.
    """
    sat = cfg["satisfaction"]
    seed = sat["seed"] if seed is None else seed
    arms = arms or [a for a in cfg["arms"] if a != "mmr"]
    interests = evaluation.synth_interest_matrix(
        sat["n_users"], sat["n_items"], sat["n_clusters"], seed
    )
    threshold = sat["interest_threshold"]

    rng = np.random.default_rng([seed, 0x5A7])
    records = []
    for u in range(sat["n_users"]):
        items = rng.choice(
            sat["n_items"], size=min(sat["interactions_per_user"], sat["n_items"]),
            replace=False,
        )
        times = np.sort(rng.uniform(0.0, 1e6, len(items)))
        for v, t in zip(items, times):
            fb = 1 if interests.values[u, v] >= threshold else 0
            records.append((int(u), int(v), fb, float(t)))
    hyper = dict(cfg["hyper"])
    hyper["seed"] = seed
    model, _ = engine.train(records, hyper)
    # every simulated user/item must be scorable
    missing_u = [u for u in range(sat["n_users"]) if u not in model.user_index]
    missing_v = [v for v in range(sat["n_items"]) if v not in model.item_index]
    if missing_u or missing_v:
        raise ValidationError(
            "satisfaction model is missing users/items; increase "
            "interactions_per_user"
        )
    item_idx = np.array([model._vidx(v) for v in range(sat["n_items"])])
    cap = hyper["history_cap"]

    def make_policy(arm: str):
        def policy(u: int, history_items: list[int]):
            h = InteractionHistory(capacity=cap)
            for v in history_items[-cap:]:
                fb = 1 if interests.values[u, v] >= threshold else 0
                h = h.append(v, fb, float(len(h.entries)))
            return _arm_scores(arm, cfg, model, u, item_idx, h)

        return policy

    out: dict = {"seed": seed, "arms": {}}
    for arm in arms:
        policy = make_policy(arm)
        lengths, satisfactions = [], []
        for u in range(sat["n_users"]):
            outcome = evaluation.simulate_satisfaction(
                policy,
                interests,
                u,
                horizon=sat["horizon"],
                N=sat["N"],
                N_q=sat["N_q"],
                temperature=sat["temperature"],
                seed=seed * 1_000_003 + u,
            )
            lengths.append(outcome.interaction_length)
            satisfactions.append(outcome.cumulative_satisfaction)
        out["arms"][arm] = {
            "mean_interaction_length": float(np.mean(lengths)),
            "mean_cumulative_satisfaction": float(np.mean(satisfactions)),
            "n_users": sat["n_users"],
        }
    return out


def run_alpha_sweep(cfg: dict, alphas: list[float]) -> dict:
    """Re-run the adjusted arm across factual-probability values.

    The base arm is computed once; each sweep point reports the adjusted
    arm's phase-2 diversity change and nDCG alongside it.
    """
    base_cfg = copy.deepcopy(cfg)
    base_cfg["arms"] = ["base"]
    base_report = run_experiment(base_cfg)
    sweep_cfg = copy.deepcopy(cfg)
    sweep_cfg["arms"] = ["dccf"]
    points = []
    for a in alphas:
        rep = run_experiment(sweep_cfg, alpha_override=a)
        arm = rep["arms"]["dccf"]
        points.append(
            {
                "alpha": a,
                "delta12": arm["diversity"]["delta12"],
                "ndcg_phase2": arm["ranking"]["phase2"]["ndcg_at_k"],
            }
        )
    base_arm = base_report["arms"]["base"]
    return {
        "schema_version": SCHEMA_VERSION,
        "base": {
            "delta12": base_arm["diversity"]["delta12"],
            "ndcg_phase2": base_arm["ranking"]["phase2"]["ndcg_at_k"],
        },
        "points": points,
    }
