"""End-to-end protocol runner: cohort, labels, split, optional grid search,
embedding training, featurization, ridge and boosted-tree fits on both
representations, and evaluation reports.

Every stage persists its outputs in the working directory through
write-then-rename, and a manifest records a content hash per artifact so
stages can be rerun in isolation and stale mixes are detected. All
randomness flows from named seeds in the config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import claims_data, features, models, synthgen, vocab as vocab_mod
from .embedder import (EmbedConfig, EmbedModel, infer_doc_vector, load_model,
                       save_model, train_embeddings)
from .evaluation import (EvaluationReport, GridResult, age_band, mae,
                         predictive_ratios, r_squared, render_metrics_table,
                         render_pr_table, report_from_dict, run_grid)
from .models import DesignMatrix, GbtParams, cv_select_lambda, fit_gbt, fit_ridge, predict

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "claimvec-run/1"
MODEL_NAMES = ["baseline1_ridge", "baseline1_gbt", "embedding_ridge", "embedding_gbt"]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class PipelineConfig:
    claims_path: Path
    members_path: Path
    code_map_path: Path
    workdir: Path
    base_year: int
    target_year: int
    min_count: int
    alpha: float
    embedding: dict
    grid: dict
    lambda_grid: list[float]
    k_folds: int
    gbt: dict
    split_fraction: float
    seeds: dict
    holdout_infer: bool
    pr_population: str

    @property
    def embed_config(self) -> EmbedConfig:
        raw = dict(self.embedding)
        raw["model"] = EmbedModel(raw.get("model", "PV_DBOW"))
        raw.setdefault("seed", self.seeds["embedding"])
        return EmbedConfig(**raw)


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    base_dir = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    paths = raw["paths"]
    seeds = raw.get("seeds", {})
    for name in ("split", "embedding", "cv"):
        if name not in seeds:
            raise ValueError(f"config must define seeds.{name} explicitly (no wall-clock defaults)")
    cfg = PipelineConfig(
        claims_path=resolve(paths["claims"]),
        members_path=resolve(paths["members"]),
        code_map_path=resolve(paths["code_map"]),
        workdir=resolve(paths["workdir"]),
        base_year=raw.get("years", {}).get("base", 2015),
        target_year=raw.get("years", {}).get("target", 2016),
        min_count=raw.get("vocab", {}).get("min_count", 5),
        alpha=raw.get("vocab", {}).get("alpha", 0.75),
        embedding=dict(raw.get("embedding", {})),
        grid=dict(raw.get("grid", {"enabled": False})),
        lambda_grid=list(raw.get("models", {}).get("lambda_grid", np.logspace(-3, 3, 13).tolist())),
        k_folds=int(raw.get("models", {}).get("k_folds", 5)),
        gbt=dict(raw.get("models", {}).get("gbt", {})),
        split_fraction=float(raw.get("split", {}).get("fraction", 0.7)),
        seeds={k: int(v) for k, v in seeds.items()},
        holdout_infer=bool(raw.get("modes", {}).get("holdout_infer", False)),
        pr_population=str(raw.get("modes", {}).get("pr_population", "all")),
    )
    for p in (cfg.claims_path, cfg.members_path, cfg.code_map_path):
        if not p.exists():
            raise FileNotFoundError(f"configured path does not exist: {p}")
    if cfg.pr_population not in ("all", "test"):
        raise ValueError("modes.pr_population must be 'all' or 'test'")
    return cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_replace(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


class Workspace:
    """Working directory with a hashed-artifact manifest."""

    def __init__(self, workdir):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.workdir / "manifest.json"
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as fh:
                self.manifest = json.load(fh)
            if self.manifest.get("format_version") != MANIFEST_FORMAT:
                raise ValueError(f"manifest format {self.manifest.get('format_version')!r} "
                                 f"does not match {MANIFEST_FORMAT!r}")
        else:
            self.manifest = {"format_version": MANIFEST_FORMAT, "artifacts": {}, "stages": []}

    def path(self, name: str) -> Path:
        return self.workdir / name

    def write_artifact(self, name: str, write_fn) -> Path:
        target = self.path(name)
        _atomic_replace(target, write_fn)
        self.manifest["artifacts"][name] = {"path": name, "sha256": _sha256(target)}
        self._save_manifest()
        return target

    def mark_stage(self, stage: str) -> None:
        if stage not in self.manifest["stages"]:
            self.manifest["stages"].append(stage)
        self._save_manifest()

    def _save_manifest(self) -> None:
        data = json.dumps(self.manifest, sort_keys=True, indent=1).encode("utf-8") + b"\n"
        _atomic_replace(self.manifest_path, lambda tmp: tmp.write_bytes(data))

    def require(self, name: str, stage: str) -> Path:
        if name not in self.manifest["artifacts"]:
            raise FileNotFoundError(f"stage '{stage}' needs artifact {name!r}; run its producing stage first")
        return self.path(name)

    def verify(self, names=None) -> None:
        entries = self.manifest["artifacts"]
        for name in (names if names is not None else list(entries)):
            entry = entries[name]
            actual = _sha256(self.path(name))
            if actual != entry["sha256"]:
                raise ValueError(f"artifact {name!r} hash mismatch: manifest {entry['sha256'][:12]}, "
                                 f"file {actual[:12]}")


def stage_synth(spec_path, out_dir) -> tuple[int, int]:
    spec = synthgen.load_population_spec(spec_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return synthgen.generate(spec, out_dir / "claims.csv", out_dir / "members.csv")


def stage_cohort(cfg: PipelineConfig, ws: Workspace):
    claims = claims_data.parse_claims(cfg.claims_path)
    members = claims_data.parse_members(cfg.members_path)
    cohort = claims_data.build_cohort(claims, members, cfg.base_year, cfg.target_year)
    if not cohort.documents:
        raise ValueError("no patients satisfy the cohort inclusion rules")
    ws.write_artifact("cohort.jsonl", lambda tmp: claims_data.save_cohort(cohort, tmp))
    ws.mark_stage("cohort")
    logger.info("cohort: %d patients included", len(cohort))
    return cohort


def _load_cohort(ws: Workspace, stage: str):
    return claims_data.load_cohort(ws.require("cohort.jsonl", stage))


def stage_labels(cfg: PipelineConfig, ws: Workspace, cohort=None):
    cohort = cohort or _load_cohort(ws, "label")
    labels = features.compute_risk_labels(cohort)
    ws.write_artifact("labels.csv", lambda tmp: features.write_labels_csv(labels, tmp))
    ws.mark_stage("label")
    return labels


def stage_split(cfg: PipelineConfig, ws: Workspace, cohort=None):
    cohort = cohort or _load_cohort(ws, "split")
    train_ids, test_ids = features.split_train_test(
        cohort.patient_ids(), cfg.split_fraction, cfg.seeds["split"])
    payload = {"fraction": cfg.split_fraction, "seed": cfg.seeds["split"],
               "train": train_ids, "test": test_ids}
    data = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    ws.write_artifact("split.json", lambda tmp: tmp.write_bytes(data))
    ws.mark_stage("split")
    return train_ids, test_ids


def _load_split(ws: Workspace, stage: str):
    with open(ws.require("split.json", stage), encoding="utf-8") as fh:
        payload = json.load(fh)
    return payload["train"], payload["test"]


def stage_grid(cfg: PipelineConfig, ws: Workspace, cohort=None, labels=None) -> GridResult:
    cohort = cohort or _load_cohort(ws, "grid")
    labels = labels or features.read_labels_csv(ws.require("labels.csv", "grid"))
    train_ids, _ = _load_split(ws, "grid")
    grid_spec = cfg.grid
    entries = [(m, d, w)
               for m in grid_spec.get("models", ["PV_DBOW", "PV_DM"])
               for d in grid_spec.get("dims", [100, 200, 300])
               for w in grid_spec.get("windows", [10, 15, 20])]
    base = cfg.embed_config
    result = run_grid(cohort, labels, entries, train_ids, cfg.seeds["embedding"],
                      base_config=base, k_folds=cfg.k_folds, lambda_grid=cfg.lambda_grid,
                      min_count=cfg.min_count, alpha=cfg.alpha)
    data = json.dumps(result.to_dict(), sort_keys=True, indent=1).encode() + b"\n"
    ws.write_artifact("grid.json", lambda tmp: tmp.write_bytes(data))
    ws.mark_stage("grid")
    if result.best:
        logger.info("grid best: %s dim=%d window=%d (cv R2 %.4f)",
                    result.best.model, result.best.dim, result.best.window, result.best.cv_r2)
    return result


def _embed_config_for_run(cfg: PipelineConfig, ws: Workspace) -> EmbedConfig:
    config = cfg.embed_config
    if cfg.grid.get("enabled") and ws.path("grid.json").exists():
        with open(ws.path("grid.json"), encoding="utf-8") as fh:
            best = json.load(fh).get("best")
        if best:
            from dataclasses import replace
            config = replace(config, model=EmbedModel(best["model"]),
                             dim=best["dim"], window=best["window"])
    return config


def stage_embed(cfg: PipelineConfig, ws: Workspace, cohort=None):
    cohort = cohort or _load_cohort(ws, "embed")
    voc = vocab_mod.build_vocab(cohort, min_count=cfg.min_count, alpha=cfg.alpha)
    ws.write_artifact("vocab.txt", lambda tmp: vocab_mod.save_vocab(voc, tmp))
    config = _embed_config_for_run(cfg, ws)
    model = train_embeddings(config, voc, cohort)
    ws.write_artifact("embedding.model", lambda tmp: save_model(model, tmp))
    ws.mark_stage("embed")
    return model


def stage_featurize(cfg: PipelineConfig, ws: Workspace, cohort=None, emb=None):
    cohort = cohort or _load_cohort(ws, "featurize")
    code_map = features.load_code_map(cfg.code_map_path)
    rows = features.extract_features(cohort, code_map)
    ws.write_artifact("features_baseline1.csv", lambda tmp: features.write_features_csv(rows, tmp))

    emb = emb or load_model(ws.require("embedding.model", "featurize"))
    dim = emb.config.dim
    if cfg.holdout_infer:
        _, test_ids = _load_split(ws, "featurize")
        holdout = set(test_ids)
    else:
        holdout = set()
    ids, vectors = [], []
    docs_by_id = {d.patient_id: d for d in cohort.documents}
    for pid in cohort.patient_ids():
        ids.append(pid)
        if pid in holdout:
            vectors.append(infer_doc_vector(emb, docs_by_id[pid].tokens))
        else:
            vectors.append(emb.doc_vector(pid))
    matrix = np.vstack(vectors)

    def write_emb(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["patient_id"] + [f"e{i}" for i in range(dim)]) + "\n")
            for pid, row in zip(ids, matrix):
                fh.write(pid + "," + ",".join(repr(float(v)) for v in row) + "\n")

    ws.write_artifact("features_embedding.csv", write_emb)
    ws.mark_stage("featurize")
    return rows, DesignMatrix(matrix, [f"e{i}" for i in range(dim)], ids)


def _read_embedding_csv(path) -> DesignMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        ids, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return DesignMatrix(np.asarray(rows, dtype=np.float64), header[1:], ids)


def _design_matrices(cfg: PipelineConfig, ws: Workspace, stage: str) -> dict[str, DesignMatrix]:
    rows = features.read_features_csv(ws.require("features_baseline1.csv", stage))
    return {
        "baseline1": models.design_from_features(rows),
        "embedding": _read_embedding_csv(ws.require("features_embedding.csv", stage)),
    }


def stage_fit(cfg: PipelineConfig, ws: Workspace):
    labels = features.read_labels_csv(ws.require("labels.csv", "fit"))
    train_ids, _ = _load_split(ws, "fit")
    designs = _design_matrices(cfg, ws, "fit")
    score_by_id = {lab.patient_id: lab.risk_score for lab in labels}
    fitted = {}
    for rep, design in designs.items():
        X_train = design.subset(train_ids)
        y_train = np.array([score_by_id[pid] for pid in train_ids])
        best_lambda, _ = cv_select_lambda(X_train, y_train, cfg.lambda_grid,
                                          k_folds=cfg.k_folds, seed=cfg.seeds["cv"])
        ridge = fit_ridge(X_train, y_train, best_lambda)
        gbt = fit_gbt(X_train, y_train, GbtParams(**cfg.gbt))
        for learner, model in (("ridge", ridge), ("gbt", gbt)):
            name = f"{rep}_{learner}"
            ws.write_artifact(f"model_{name}.json", lambda tmp, m=model: models.save_regressor(m, tmp))
            preds = predict(model, design)

            def write_preds(tmp, ids=design.row_ids, values=preds):
                with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                    fh.write("patient_id,prediction\n")
                    for pid, v in zip(ids, values):
                        fh.write(f"{pid},{float(v)!r}\n")

            ws.write_artifact(f"predictions_{name}.csv", write_preds)
            fitted[name] = model
    ws.mark_stage("fit")
    return fitted


def _read_predictions(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            pid, _, value = line.rstrip("\n").partition(",")
            out[pid] = float(value)
    return out


def stage_evaluate(cfg: PipelineConfig, ws: Workspace):
    cohort = _load_cohort(ws, "evaluate")
    labels = features.read_labels_csv(ws.require("labels.csv", "evaluate"))
    train_ids, test_ids = _load_split(ws, "evaluate")
    if not test_ids:
        raise ValueError("empty test set")
    score_by_id = {lab.patient_id: lab.risk_score for lab in labels}
    demo = {d.patient_id: (d.member.sex.value, cohort.base_year - d.member.birth_year)
            for d in cohort.documents}
    pr_ids = test_ids if cfg.pr_population == "test" else cohort.patient_ids()
    embed_cfg = _embed_config_for_run(cfg, ws)

    reports = []
    for name in MODEL_NAMES:
        preds = _read_predictions(ws.require(f"predictions_{name}.csv", "evaluate"))
        y_test = np.array([score_by_id[pid] for pid in test_ids])
        yhat_test = np.array([preds[pid] for pid in test_ids])
        pr_pred = np.array([preds[pid] for pid in pr_ids])
        pr_actual = np.array([score_by_id[pid] for pid in pr_ids])
        groups = [(demo[pid][0], age_band(int(demo[pid][1]))) for pid in pr_ids]
        rep = EvaluationReport(
            model_name=name,
            r2=r_squared(y_test, yhat_test),
            mae=mae(y_test, yhat_test),
            n_test=len(test_ids),
            predictive_ratios=predictive_ratios(pr_pred, pr_actual, groups),
            config={
                "representation": name.rsplit("_", 1)[0],
                "learner": name.rsplit("_", 1)[1],
                "pr_population": cfg.pr_population,
                "n_train": len(train_ids),
                "embedding": {"model": embed_cfg.model.value, "dim": embed_cfg.dim,
                              "window": embed_cfg.window},
            },
        )
        data = rep.to_json().encode() + b"\n"
        ws.write_artifact(f"report_{name}.json", lambda tmp, d=data: tmp.write_bytes(d))
        reports.append(rep)
    ws.mark_stage("evaluate")
    return reports


def stage_report(workdir, fmt: str = "text") -> str:
    ws = Workspace(workdir)
    names = [f"report_{n}.json" for n in MODEL_NAMES if f"report_{n}.json" in ws.manifest["artifacts"]]
    if not names:
        raise FileNotFoundError("no evaluation reports in the manifest; run the evaluate stage first")
    ws.verify(names)
    reports = []
    for name in names:
        with open(ws.path(name), encoding="utf-8") as fh:
            reports.append(report_from_dict(json.load(fh)))
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1)
    text = render_metrics_table(reports) + "\n" + render_pr_table(reports)
    ws.write_artifact("report.txt", lambda tmp: tmp.write_text(text, encoding="utf-8"))
    return text


_STAGES = ["cohort", "label", "split", "grid", "embed", "featurize", "fit", "evaluate"]


def run_pipeline(cfg: PipelineConfig) -> Workspace:
    """Execute every stage in order; grid search only when enabled."""
    ws = Workspace(cfg.workdir)
    current = "cohort"
    try:
        cohort = stage_cohort(cfg, ws)
        current = "label"
        labels = stage_labels(cfg, ws, cohort)
        current = "split"
        stage_split(cfg, ws, cohort)
        if cfg.grid.get("enabled"):
            current = "grid"
            stage_grid(cfg, ws, cohort, labels)
        current = "embed"
        emb = stage_embed(cfg, ws, cohort)
        current = "featurize"
        stage_featurize(cfg, ws, cohort, emb)
        current = "fit"
        stage_fit(cfg, ws)
        current = "evaluate"
        stage_evaluate(cfg, ws)
        current = "report"
        stage_report(cfg.workdir)
    except Exception as exc:
        raise StageError(current, exc) from exc
    return ws
