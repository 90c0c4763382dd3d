"""Individual metrics (R-squared, MAE), group-level predictive ratios, the
embedding hyperparameter grid search, and evaluation-report rendering.

A predictive ratio compares a subgroup's mean predicted risk score to its
mean actual cost, with both series first rescaled to mean 1.0 over the
population being evaluated; 1.0 is a perfect group fit, above 1 means the
model overestimates that group's risk. Groups are sex crossed with 21
age bands.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace as dc_replace

import numpy as np

logger = logging.getLogger(__name__)

REPORT_FORMAT = "claimvec-report/1"

# (label, exclusive lower bound, inclusive upper bound); ages at or below 1
# fall in the first band, ages above 84 in the last.
AGE_BANDS = [
    ("(0, 1]", 0, 1), ("(1, 2]", 1, 2), ("(2, 4]", 2, 4), ("(4, 9]", 4, 9),
    ("(9, 14]", 9, 14), ("(14, 18]", 14, 18), ("(18, 20]", 18, 20),
    ("(20, 24]", 20, 24), ("(24, 29]", 24, 29), ("(29, 34]", 29, 34),
    ("(34, 39]", 34, 39), ("(39, 44]", 39, 44), ("(44, 49]", 44, 49),
    ("(49, 54]", 49, 54), ("(54, 59]", 54, 59), ("(59, 64]", 59, 64),
    ("(64, 69]", 64, 69), ("(69, 74]", 69, 74), ("(74, 79]", 74, 79),
    ("(79, 84]", 79, 84), ("84+", 84, None),
]
AGE_BAND_LABELS = [label for label, _, _ in AGE_BANDS]
SEX_ORDER = ["male", "female"]


def age_band(age: int) -> str:
    """Band label for an age in years; clamps below the first and above the
    last boundary so every age falls in exactly one band."""
    if age <= 1:
        return "(0, 1]"
    if age > 84:
        return "84+"
    for label, lo, hi in AGE_BANDS[1:-1]:
        if lo < age <= hi:
            return label
    raise AssertionError(f"unbanded age {age}")


def r_squared(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("need two aligned series of length >= 2")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R-squared undefined: actuals have zero variance")
    ss_res = float(np.sum((y - yhat) ** 2))
    return 1.0 - ss_res / ss_tot


def mae(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 1:
        raise ValueError("need two aligned series of length >= 1")
    return float(np.mean(np.abs(y - yhat)))


def predictive_ratios(predicted, actual_costs, groups) -> list[dict]:
    """Group-level fit for (sex, age band) cells.

    Both inputs are rescaled to mean 1.0 over the whole population given,
    then each populated cell reports mean(predicted) / mean(actual). A
    cell whose rescaled actual mean is zero gets pr None instead of a
    division error. Rows are ordered male then female, bands in order.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual_costs, dtype=np.float64)
    groups = list(groups)
    if not (len(predicted) == len(actual) == len(groups)):
        raise ValueError("predicted, actual and groups must be aligned")
    if len(groups) == 0:
        raise ValueError("no patients to evaluate")
    pred_mean = predicted.mean()
    act_mean = actual.mean()
    if pred_mean <= 0 or act_mean <= 0:
        raise ValueError("population means must be positive for rescaling")
    pred_scaled = predicted / pred_mean
    act_scaled = actual / act_mean

    cells: dict[tuple[str, str], list[int]] = {}
    for i, (sex, band) in enumerate(groups):
        cells.setdefault((str(sex), str(band)), []).append(i)

    out = []
    for sex in SEX_ORDER:
        for band in AGE_BAND_LABELS:
            idx = cells.get((sex, band))
            if not idx:
                continue
            p = pred_scaled[idx].mean()
            a = act_scaled[idx].mean()
            pr = None if a == 0.0 else float(p / a)
            out.append({"sex": sex, "age_band": band, "n": len(idx), "pr": pr})
    covered = sum(len(v) for v in cells.values())
    if covered != len(groups):
        raise ValueError("every patient must fall in exactly one (sex, band) cell")
    return out


@dataclass
class EvaluationReport:
    model_name: str
    r2: float
    mae: float
    n_test: int
    predictive_ratios: list[dict]
    config: dict

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT,
            "model_name": self.model_name,
            "r2": self.r2,
            "mae": self.mae,
            "n_test": self.n_test,
            "predictive_ratios": self.predictive_ratios,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def report_from_dict(raw: dict) -> EvaluationReport:
    if raw.get("format_version") != REPORT_FORMAT:
        raise ValueError(f"report format {raw.get('format_version')!r} does not match {REPORT_FORMAT!r}")
    return EvaluationReport(model_name=raw["model_name"], r2=raw["r2"], mae=raw["mae"],
                            n_test=raw["n_test"], predictive_ratios=raw["predictive_ratios"],
                            config=raw.get("config", {}))


def evaluate(model, X_test, labels_test, demographics, model_name: str = "model",
             config: dict | None = None) -> EvaluationReport:
    """Score a fitted model on a test design matrix.

    `labels_test` supplies risk scores aligned with X_test rows (a list of
    RiskLabel or a float array); `demographics` maps patient id to
    (sex, age) for the predictive-ratio cells.
    """
    from .models import predict

    if X_test.values.shape[0] == 0:
        raise ValueError("empty test set")
    if hasattr(labels_test[0], "risk_score"):
        y = np.array([lab.risk_score for lab in labels_test], dtype=np.float64)
    else:
        y = np.asarray(labels_test, dtype=np.float64)
    if y.shape[0] != X_test.values.shape[0]:
        raise ValueError("labels are not aligned with the design matrix")
    yhat = predict(model, X_test)
    groups = []
    for pid in X_test.row_ids:
        sex, age = demographics[pid]
        groups.append((sex, age_band(int(age))))
    return EvaluationReport(
        model_name=model_name,
        r2=r_squared(y, yhat),
        mae=mae(y, yhat),
        n_test=int(y.shape[0]),
        predictive_ratios=predictive_ratios(yhat, y, groups),
        config=dict(config or {}),
    )


@dataclass(frozen=True)
class GridEntry:
    model: str
    dim: int
    window: int
    cv_r2: float | None = None
    best_lambda: float | None = None
    error: str | None = None


@dataclass
class GridResult:
    entries: list[GridEntry]
    best: GridEntry | None

    def to_dict(self) -> dict:
        def entry_dict(e):
            return {"model": e.model, "dim": e.dim, "window": e.window,
                    "cv_r2": e.cv_r2, "best_lambda": e.best_lambda, "error": e.error}
        return {
            "entries": [entry_dict(e) for e in self.entries],
            "best": entry_dict(self.best) if self.best else None,
        }


def select_best(entries: list[GridEntry]) -> GridEntry | None:
    """Argmax of cv_r2 with deterministic (model, dim, window) tie-break;
    invariant under permutation of the entries."""
    ok = [e for e in entries if e.cv_r2 is not None]
    if not ok:
        return None
    top = max(e.cv_r2 for e in ok)
    tied = [e for e in ok if e.cv_r2 == top]
    return min(tied, key=lambda e: (e.model, e.dim, e.window))


def full_grid(models=("PV_DBOW", "PV_DM"), dims=(100, 200, 300), windows=(10, 15, 20)):
    return [(m, d, w) for m in models for d in dims for w in windows]


def run_grid(cohort, labels, grid, train_ids, seed, base_config=None,
             vocabulary=None, k_folds: int = 5, lambda_grid=None,
             min_count: int = 5, alpha: float = 0.75) -> GridResult:
    """Train one embedding per (model, dim, window) and score it by k-fold
    cross-validated ridge R-squared on the training ids only.

    Failed entries are recorded with their error and the grid continues.
    """
    from .embedder import EmbedConfig, EmbedModel, train_embeddings
    from .models import DesignMatrix, cv_select_lambda
    from .vocab import build_vocab

    grid = list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    if lambda_grid is None:
        lambda_grid = np.logspace(-3, 3, 13).tolist()
    if vocabulary is None:
        vocabulary = build_vocab(cohort, min_count=min_count, alpha=alpha)
    if base_config is None:
        base_config = EmbedConfig(seed=seed)
    score_by_id = {lab.patient_id: lab.risk_score for lab in labels}
    train_ids = list(train_ids)
    y_train = np.array([score_by_id[pid] for pid in train_ids], dtype=np.float64)

    entries: list[GridEntry] = []
    for model_name, dim, window in grid:
        model_name = model_name.value if isinstance(model_name, EmbedModel) else str(model_name)
        try:
            config = dc_replace(base_config, model=EmbedModel(model_name), dim=int(dim),
                                window=int(window), seed=seed)
            emb = train_embeddings(config, vocabulary, cohort)
            X = DesignMatrix(
                np.vstack([emb.doc_vector(pid) for pid in train_ids]),
                [f"e{i}" for i in range(config.dim)], train_ids)
            best_lambda, scores = cv_select_lambda(X, y_train, lambda_grid, k_folds=k_folds, seed=seed)
            cv_r2 = float(np.mean(scores[best_lambda]))
            entries.append(GridEntry(model=model_name, dim=int(dim), window=int(window),
                                     cv_r2=cv_r2, best_lambda=best_lambda))
        except Exception as exc:  # record and continue with the rest of the grid
            logger.warning("grid entry (%s, %s, %s) failed: %s", model_name, dim, window, exc)
            entries.append(GridEntry(model=model_name, dim=int(dim), window=int(window),
                                     error=f"{type(exc).__name__}: {exc}"))
    return GridResult(entries=entries, best=select_best(entries))


def render_metrics_table(reports: list[EvaluationReport]) -> str:
    """Aligned text: one row per model with R-squared and MAE."""
    name_w = max([len(r.model_name) for r in reports] + [len("Model")])
    lines = [f"{'Model':<{name_w}}  {'R2':>8}  {'MAE':>8}",
             "-" * (name_w + 20)]
    for r in reports:
        lines.append(f"{r.model_name:<{name_w}}  {r.r2:>8.4f}  {r.mae:>8.4f}")
    return "\n".join(lines) + "\n"


def render_pr_table(reports: list[EvaluationReport]) -> str:
    """Aligned text: predictive ratios by sex and age band, one column per model."""
    names = [r.model_name for r in reports]
    by_model = []
    for r in reports:
        by_model.append({(row["sex"], row["age_band"]): row for row in r.predictive_ratios})
    cells = sorted({key for m in by_model for key in m},
                   key=lambda k: (SEX_ORDER.index(k[0]), AGE_BAND_LABELS.index(k[1])))
    col_w = max([len(n) for n in names] + [8])
    header = f"{'Sex':<8}{'Age':<10}{'N':>8}  " + "  ".join(f"{n:>{col_w}}" for n in names)
    lines = [header, "-" * len(header)]
    for sex, band in cells:
        n = next((m[(sex, band)]["n"] for m in by_model if (sex, band) in m), 0)
        row = f"{sex:<8}{band:<10}{n:>8}  "
        vals = []
        for m in by_model:
            cell = m.get((sex, band))
            if cell is None or cell["pr"] is None:
                vals.append(f"{'-':>{col_w}}")
            else:
                vals.append(f"{cell['pr']:>{col_w}.3f}")
        lines.append(row + "  ".join(vals))
    return "\n".join(lines) + "\n"
