"""Command-line entry points wrapping the pipeline stages.

Subcommands: synth, cohort, label, embed, featurize, fit, evaluate, grid,
run, report. Every subcommand exits 0 on success and non-zero on any
error, printing the failing stage and cause to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline, synthgen
from .pipeline import Workspace, load_pipeline_config


def _apply_overrides(cfg, args):
    if getattr(args, "workdir", None):
        cfg.workdir = Path(args.workdir)
    if getattr(args, "workers", None):
        cfg.embedding["workers"] = args.workers
    if getattr(args, "seed", None) is not None:
        cfg.seeds = {"embedding": args.seed, "cv": args.seed + 1, "split": args.seed + 2}
    return cfg


def _load_cfg(args):
    if not args.config:
        raise SystemExit("--config is required for this subcommand")
    return _apply_overrides(load_pipeline_config(args.config), args)


def cmd_synth(args) -> int:
    spec = synthgen.load_population_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_claims, n_members = synthgen.generate(spec, out / "claims.csv", out / "members.csv")
    print(f"wrote {n_claims} claim rows to {out / 'claims.csv'}")
    print(f"wrote {n_members} member rows to {out / 'members.csv'}")
    return 0


def _stage_command(name):
    def handler(args) -> int:
        cfg = _load_cfg(args)
        ws = Workspace(cfg.workdir)
        if name == "cohort":
            cohort = pipeline.stage_cohort(cfg, ws)
            print(f"cohort: {len(cohort)} patients")
        elif name == "label":
            labels = pipeline.stage_labels(cfg, ws)
            print(f"labels: {len(labels)} patients")
        elif name == "grid":
            result = pipeline.stage_grid(cfg, ws)
            best = result.best
            if best is None:
                print("grid: no successful entries")
                return 1
            print(f"grid: best {best.model} dim={best.dim} window={best.window} cv_r2={best.cv_r2:.4f}")
        elif name == "embed":
            model = pipeline.stage_embed(cfg, ws)
            print(f"embedding: {len(model.doc_ids)} documents, dim={model.config.dim}")
        elif name == "featurize":
            rows, emb = pipeline.stage_featurize(cfg, ws)
            print(f"features: {len(rows)} baseline rows, {emb.values.shape} embedding matrix")
        elif name == "fit":
            fitted = pipeline.stage_fit(cfg, ws)
            print(f"fit: {', '.join(sorted(fitted))}")
        elif name == "evaluate":
            reports = pipeline.stage_evaluate(cfg, ws)
            for rep in reports:
                print(f"{rep.model_name}: R2={rep.r2:.4f} MAE={rep.mae:.4f}")
        return 0

    return handler


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    pipeline.run_pipeline(cfg)
    print(pipeline.stage_report(cfg.workdir))
    print(f"artifacts in {cfg.workdir}")
    return 0


def cmd_report(args) -> int:
    print(pipeline.stage_report(args.workdir, fmt=args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="claimvec",
                                     description="Claims-code embeddings and risk-score modeling")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic claims population")
    p_synth.add_argument("--spec", required=True, help="population spec JSON")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p_synth.set_defaults(handler=cmd_synth)

    for name in ("cohort", "label", "embed", "featurize", "fit", "evaluate", "grid"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--workdir", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.set_defaults(handler=_stage_command(name))

    p_run = sub.add_parser("run", help="run the full protocol end to end")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--workdir", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(handler=cmd_run)

    p_rep = sub.add_parser("report", help="render evaluation tables from a completed run")
    p_rep.add_argument("--workdir", required=True)
    p_rep.add_argument("--format", choices=("text", "json"), default="text")
    p_rep.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
