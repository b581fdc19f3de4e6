"""Operator command-line interface.

Subcommands: ingest, split, train, experiment, markov, satisfy, recommend.
Artifacts land in --artifact-dir (or $ECHOLOOP_ARTIFACT_DIR, default
./artifacts).  Exit codes: 0 success, 2 validation error, 3 missing
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import data as dp
from . import engine, evaluation, experiment, markov
from .causal import generate_counterfactuals, adjusted_score_many
from .errors import (
    EchoLoopError,
    MissingArtifactError,
    NumericalError,
    ValidationError,
)

TOOL_VERSION = "0.1.0"


def artifact_dir(args) -> Path:
    root = args.artifact_dir or os.environ.get("ECHOLOOP_ARTIFACT_DIR", "artifacts")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config(args) -> dict:
    overrides = {}
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except OSError as exc:
            raise MissingArtifactError(f"config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}") from exc
    flag_overrides = _flag_overrides(args)
    merged = _deep_merge(overrides, flag_overrides)
    return experiment.make_config(merged)


def _deep_merge(dst: dict, src: dict) -> dict:
    out = dict(dst)
    for key, val in src.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def _flag_overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "ctf_n", None) is not None:
        out.setdefault("ctf", {})["n"] = args.ctf_n
    if getattr(args, "alpha", None) is not None:
        out.setdefault("ctf", {})["alpha"] = args.alpha
    if getattr(args, "seed", None) is not None:
        out.setdefault("hyper", {})["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        out.setdefault("hyper", {})["epochs"] = args.epochs
    if getattr(args, "arms", None):
        out["arms"] = args.arms.split(",")
    if getattr(args, "b1", None) is not None and getattr(args, "b2", None) is not None:
        out["boundaries"] = [args.b1, args.b2]
    if getattr(args, "dataset", None):
        out.setdefault("dataset", {})["path"] = args.dataset
    if getattr(args, "mmr_lambda", None) is not None:
        out.setdefault("eval", {})["mmr_lambda"] = args.mmr_lambda
    return out


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_manifest(outdir: Path, cfg: dict, outputs: list[str],
                   timings: dict[str, float]) -> None:
    manifest = {
        "config_hash": experiment.config_hash(cfg),
        "tool_version": TOOL_VERSION,
        "outputs": sorted(outputs),
        "stage_timings_s": timings,
        "seeds": {"hyper": cfg["hyper"]["seed"],
                  "satisfaction": cfg["satisfaction"]["seed"]},
    }
    write_json(outdir / "manifest.json", manifest)


class _Lock:
    """Single-writer guard on the artifact directory."""

    def __init__(self, outdir: Path):
        self.path = outdir / ".lock"

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValidationError(
                f"artifact directory is locked by {self.path}; remove the "
                "stale lock if no other run is active"
            ) from None
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)


def cmd_ingest(args) -> int:
    outdir = artifact_dir(args)
    result = dp.ingest(args.input, delimiter=args.delimiter)
    records = dp.binarize(result.records, args.like_threshold,
                          args.dislike_threshold)
    out = outdir / "interactions.tsv"
    dp.export_interactions(records, out)
    dp.write_stats_sidecar(records, outdir / "interactions.stats.json")
    print(
        json.dumps(
            {
                "records": len(records),
                "raw": len(result.records),
                "malformed_lines": [ln for ln, _ in result.errors],
                "output": str(out),
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_split(args) -> int:
    outdir = artifact_dir(args)
    src = outdir / "interactions.tsv"
    if args.input:
        result = dp.ingest(args.input, delimiter=args.delimiter)
        records = dp.binarize(result.records, args.like_threshold,
                              args.dislike_threshold)
    elif src.exists():
        records = dp.import_interactions(src)
    else:
        raise MissingArtifactError(
            f"no ingested interactions at {src}; run the ingest stage first"
        )
    split = dp.phase_split(records, (args.b1, args.b2))
    for i, phase in enumerate(split.phases, start=1):
        dp.export_interactions(phase, outdir / f"phase{i}.tsv")
        if not phase:
            print(f"warning: phase {i} is empty", file=sys.stderr)
    write_json(outdir / "split.stats.json",
               {"boundaries": list(split.boundaries), "phases": split.stats})
    print(json.dumps({"phases": split.stats}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    outdir = artifact_dir(args)
    timings: dict[str, float] = {}
    outputs = []
    with _Lock(outdir):
        t0 = time.monotonic()
        records = experiment.load_dataset(cfg)
        phases = dp.phase_split(records, experiment.dataset_boundaries(cfg))
        splits = [dp.leave_one_out(p) for p in phases.phases]
        prev = None
        for i, split in enumerate(splits, start=1):
            if not split.train:
                raise MissingArtifactError(f"phase {i} has no training data")
            model, losses = engine.train(
                [r.as_tuple() for r in split.train], cfg["hyper"], init=prev
            )
            path = outdir / f"model_phase{i}.json"
            engine.save_checkpoint(model, path)
            outputs.append(str(path))
            prev = model
        timings["train"] = time.monotonic() - t0
        write_manifest(outdir, cfg, outputs, timings)
    print(json.dumps({"checkpoints": outputs}, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args)
    outdir = artifact_dir(args)
    with _Lock(outdir):
        t0 = time.monotonic()
        report = experiment.run_experiment(cfg)
        timings = {"experiment": time.monotonic() - t0}
        report_path = outdir / "experiment.json"
        write_json(report_path, report)
        csv_path = outdir / "experiment.csv"
        _write_comparison_csv(report, csv_path)
        write_manifest(outdir, cfg, [str(report_path), str(csv_path)], timings)
    print(json.dumps(
        {a: r["diversity"] for a, r in report["arms"].items()}, sort_keys=True
    ))
    return 0


def _write_comparison_csv(report: dict, path: Path) -> None:
    cols = ["arm", "ndcg_p2", "hit_p2", "u_ndcg_p2", "u_hit_p2",
            "ndcg_p3", "hit_p3", "u_ndcg_p3", "u_hit_p3",
            "delta12", "delta13"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for arm, r in sorted(report["arms"].items()):
            row = [arm]
            for phase in ("phase2", "phase3"):
                rk = r["ranking"][phase]
                for m in ("ndcg_at_k", "hit_at_k", "u_ndcg_at_k", "u_hit_at_k"):
                    row.append(f"{rk[m]:.6f}")
            row.append(f"{r['diversity']['delta12']:.6f}")
            row.append(f"{r['diversity']['delta13']:.6f}")
            fh.write(",".join(row) + "\n")


def cmd_markov(args) -> int:
    spec = {
        "d": args.d,
        "m": args.m,
        "behavior_type": args.behavior,
    }
    if args.p is not None:
        spec["p"] = args.p
    if args.free_dist:
        spec["free_group_dist"] = [float(x) for x in args.free_dist.split(",")]
    model = markov.chain_from_spec(spec)
    report = markov.analyze_chain(
        model,
        k_for_limit=args.k_step,
        mc_trajectories=args.mc_trajectories,
        mc_horizon=args.mc_horizon,
        mc_seed=args.mc_seed,
    )
    outdir = artifact_dir(args)
    path = outdir / "markov.json"
    write_json(path, report)
    print(json.dumps({"classification": report["classification"],
                      "output": str(path)}, sort_keys=True))
    return 0


def cmd_satisfy(args) -> int:
    cfg = load_config(args)
    outdir = artifact_dir(args)
    result = experiment.run_satisfaction(cfg, seed=args.sat_seed)
    path = outdir / "satisfaction.json"
    write_json(path, result)
    print(json.dumps(result["arms"], sort_keys=True))
    return 0


def cmd_recommend(args) -> int:
    cfg = load_config(args)
    outdir = artifact_dir(args)
    ckpt = outdir / f"model_phase{args.phase}.json"
    if not ckpt.exists():
        raise MissingArtifactError(
            f"checkpoint {ckpt} missing; run the train stage first"
        )
    model = engine.load_checkpoint(ckpt)
    h = engine.InteractionHistory(capacity=cfg["hyper"]["history_cap"])
    for i, item in enumerate(args.history or []):
        h = h.append(int(item), 1, float(i))
    if cfg["ctf"]["n"] > 0 and len(h) > 0:
        from .causal import adjusted_recommend

        items = adjusted_recommend(
            model, args.user, h, cfg["ctf"]["n"], cfg["ctf"]["alpha"],
            cfg["eval"]["k"], allocation=cfg["ctf"]["allocation"],
        )
    else:
        items = engine.recommend(model, args.user, h, cfg["eval"]["k"])
    print(json.dumps({"user": args.user, "items": items}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoloop",
        description="Echo-chamber Markov analysis and counterfactually "
        "adjusted collaborative filtering",
    )
    parser.add_argument("--artifact-dir", default=None)
    parser.add_argument("--config", default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and binarize a rating log")
    p.add_argument("--input", required=True)
    p.add_argument("--delimiter", default="::")
    p.add_argument("--like-threshold", type=float, default=4.0)
    p.add_argument("--dislike-threshold", type=float, default=3.0)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("split", help="chronological three-phase split")
    p.add_argument("--input", default=None)
    p.add_argument("--delimiter", default="::")
    p.add_argument("--like-threshold", type=float, default=4.0)
    p.add_argument("--dislike-threshold", type=float, default=3.0)
    p.add_argument("--b1", required=True)
    p.add_argument("--b2", required=True)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train per-phase checkpoints")
    _common_experiment_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("experiment", help="full multi-arm experiment")
    _common_experiment_flags(p)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("markov", help="analyze an echo-chamber chain")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--behavior", choices=["type1", "type2", "type3"],
                   required=True)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--free-dist", default=None,
                   help="comma-separated free-choice distribution")
    p.add_argument("--k-step", type=int, default=None)
    p.add_argument("--mc-trajectories", type=int, default=0)
    p.add_argument("--mc-horizon", type=int, default=64)
    p.add_argument("--mc-seed", type=int, default=0)
    p.set_defaults(fn=cmd_markov)

    p = sub.add_parser("satisfy", help="boredom-exit satisfaction simulation")
    _common_experiment_flags(p)
    p.add_argument("--sat-seed", type=int, default=None)
    p.set_defaults(fn=cmd_satisfy)

    p = sub.add_parser("recommend", help="one-off ranked list for a user")
    _common_experiment_flags(p)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--phase", type=int, default=1)
    p.add_argument("--history", nargs="*", default=None)
    p.set_defaults(fn=cmd_recommend)

    return parser


def _common_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default=None, help="rating log path")
    p.add_argument("--b1", default=None)
    p.add_argument("--b2", default=None)
    p.add_argument("--ctf-n", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--arms", default=None, help="comma-separated arm list")
    p.add_argument("--mmr-lambda", type=float, default=None)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}),
              file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(json.dumps({"error": "missing_artifact", "message": str(exc)}),
              file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(json.dumps({"error": "numerical", "message": str(exc)}),
              file=sys.stderr)
        return 4
    except EchoLoopError as exc:
        print(json.dumps({"error": exc.__class__.__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
