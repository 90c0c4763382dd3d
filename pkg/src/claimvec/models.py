"""Supervised learners over patient feature matrices.

Ridge regression solves the penalized normal equations over standardized
columns with an unpenalized intercept, and checks its own residual after
every fit. The boosted-tree learner is a self-contained histogram GBT
with squared loss: quantile-binned features, greedy variance-reduction
splits grown level by level, shrunk leaf means added each round. Both
learners are deterministic for fixed inputs, and fitted models are
immutable and safe for concurrent prediction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MODEL_FORMAT = "claimvec-model/1"


@dataclass
class DesignMatrix:
    values: np.ndarray  # (N, P) float64
    col_names: list[str]
    row_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-dimensional")
        n, p = self.values.shape
        if n < 1 or p < 1:
            raise ValueError("design matrix must have at least one row and one column")
        if len(self.col_names) != p:
            raise ValueError("col_names length must match the number of columns")
        if len(self.row_ids) != n:
            raise ValueError("row_ids length must match the number of rows")
        if not np.isfinite(self.values).all():
            raise ValueError("design matrix contains non-finite values")

    def subset(self, ids) -> "DesignMatrix":
        pos = {pid: i for i, pid in enumerate(self.row_ids)}
        idx = [pos[i] for i in ids]
        return DesignMatrix(self.values[idx], list(self.col_names), list(ids))


def design_from_features(rows) -> DesignMatrix:
    from .features import FEATURE_NAMES
    values = np.array([[r.values[name] for name in FEATURE_NAMES] for r in rows], dtype=np.float64)
    return DesignMatrix(values, list(FEATURE_NAMES), [r.patient_id for r in rows])


def design_from_embeddings(model, ids=None) -> DesignMatrix:
    ids = list(model.doc_ids) if ids is None else list(ids)
    values = np.vstack([model.doc_vector(pid) for pid in ids])
    names = [f"e{i}" for i in range(model.config.dim)]
    return DesignMatrix(values, names, ids)


@dataclass
class RidgeModel:
    col_names: list[str]        # columns kept at fit time, in fit order
    coefficients: np.ndarray    # in standardized space
    intercept: float
    lam: float
    means: np.ndarray
    stds: np.ndarray
    dropped: list[str] = field(default_factory=list)


def fit_ridge(X: DesignMatrix, y, lam: float, standardize: bool = True,
              fit_intercept: bool = True) -> RidgeModel:
    """Minimize ||y - Xb - b0||^2 + lam * ||b||^2 over standardized columns.

    Constant columns are dropped with a warning. After solving, the
    normal-equation residual is checked against 1e-8 * max(1, ||X'y||_inf);
    a violation with lam == 0 reports rank deficiency and suggests lam > 0.
    """
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    n = X.values.shape[0]
    if n < 2 or y.shape[0] != n:
        raise ValueError("need at least 2 aligned rows to fit")
    if not np.isfinite(y).all():
        raise ValueError("labels contain non-finite values")

    values = X.values
    if standardize:
        means = values.mean(axis=0)
        stds = values.std(axis=0)
        keep = stds > 0
        if not keep.all():
            dropped = [name for name, k in zip(X.col_names, keep) if not k]
            logger.warning("dropping %d constant columns: %s", len(dropped), dropped[:8])
        else:
            dropped = []
        if not keep.any():
            raise ValueError("all columns are constant; nothing to fit")
        Xs = (values[:, keep] - means[keep]) / stds[keep]
        kept_names = [name for name, k in zip(X.col_names, keep) if k]
        kept_means, kept_stds = means[keep], stds[keep]
    else:
        dropped = []
        Xs = values
        kept_names = list(X.col_names)
        kept_means = np.zeros(Xs.shape[1])
        kept_stds = np.ones(Xs.shape[1])

    intercept = float(y.mean()) if fit_intercept else 0.0
    centered = y - intercept
    A = Xs.T @ Xs + lam * np.eye(Xs.shape[1])
    rhs = Xs.T @ centered
    try:
        beta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("design matrix is rank deficient at lambda=0; refit with lambda > 0") from exc

    residual = np.abs(A @ beta - rhs).max()
    bound = 1e-8 * max(1.0, np.abs(Xs.T @ y).max())
    if residual > bound:
        if lam == 0:
            raise ValueError("design matrix is numerically rank deficient at lambda=0; "
                             "refit with lambda > 0")
        raise ArithmeticError(f"ridge solve residual {residual:.3e} exceeds bound {bound:.3e}")
    return RidgeModel(col_names=kept_names, coefficients=beta, intercept=intercept,
                      lam=lam, means=kept_means, stds=kept_stds, dropped=dropped)


def cv_select_lambda(X: DesignMatrix, y, lambda_grid, k_folds: int = 5,
                     seed: int = 0) -> tuple[float, dict[float, list[float]]]:
    """Pick the penalty maximizing mean validation R-squared over k folds.

    Fold assignment is a seeded permutation split into contiguous chunks.
    Exact ties go to the larger penalty.
    """
    from .evaluation import r_squared

    grid = sorted(set(float(l) for l in lambda_grid))
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    y = np.asarray(y, dtype=np.float64)
    n = X.values.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k_folds)
    if any(len(f) < 2 for f in folds):
        raise ValueError(f"a fold has fewer than 2 samples (n={n}, k={k_folds})")

    scores: dict[float, list[float]] = {}
    for lam in grid:
        fold_scores = []
        for fold in folds:
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            train_dm = DesignMatrix(X.values[mask], list(X.col_names),
                                    [X.row_ids[i] for i in np.flatnonzero(mask)])
            model = fit_ridge(train_dm, y[mask], lam)
            val_dm = DesignMatrix(X.values[fold], list(X.col_names),
                                  [X.row_ids[i] for i in fold])
            fold_scores.append(r_squared(y[fold], predict(model, val_dm)))
        scores[lam] = fold_scores

    best = grid[0]
    best_mean = float(np.mean(scores[best]))
    for lam in grid[1:]:
        mean = float(np.mean(scores[lam]))
        if mean >= best_mean:
            best, best_mean = lam, mean
    return best, scores


@dataclass(frozen=True)
class GbtParams:
    max_depth: int = 6
    n_rounds: int = 200
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    n_bins: int = 256

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")


@dataclass
class _Tree:
    """Flat node arrays; node 0 is the root. Leaves have feature == -1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, values: np.ndarray) -> np.ndarray:
        idx = np.zeros(values.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[idx]
            active = feat >= 0
            if not active.any():
                break
            go_left = np.zeros_like(active)
            rows = np.flatnonzero(active)
            go_left[rows] = values[rows, feat[rows]] <= self.threshold[idx[rows]]
            nxt = np.where(go_left, self.left[idx], self.right[idx])
            idx = np.where(active, nxt, idx)
        return self.value[idx]


@dataclass
class GbtModel:
    params: GbtParams
    col_names: list[str]
    base_prediction: float
    trees: list[_Tree] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)


def _bin_edges(col: np.ndarray, n_bins: int) -> np.ndarray:
    uniq = np.unique(col)
    if uniq.size <= 1:
        return np.empty(0, dtype=np.float64)
    if uniq.size <= n_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(col, np.arange(1, n_bins) / n_bins)
    return np.unique(qs)


def _grow_tree(binned, edges, residual, params: GbtParams) -> _Tree:
    n, p = binned.shape
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    value = [0.0]
    node_sum = {0: residual.sum()}
    node_cnt = {0: n}
    node_of = np.zeros(n, dtype=np.int64)
    active = [0]
    max_bins = max((e.size + 1 for e in edges), default=1)

    for _ in range(params.max_depth):
        if not active:
            break
        remap = {node: i for i, node in enumerate(active)}
        compact = np.array([remap.get(nd, -1) for nd in range(len(feature))], dtype=np.int64)
        local = compact[node_of]
        in_active = local >= 0
        n_active = len(active)

        best_gain = np.full(n_active, 0.0)
        best_feat = np.full(n_active, -1, dtype=np.int64)
        best_bin = np.full(n_active, -1, dtype=np.int64)
        base_score = np.array([node_sum[nd] ** 2 / node_cnt[nd] for nd in active])

        rows = np.flatnonzero(in_active)
        if rows.size == 0:
            break
        loc = local[rows]
        res = residual[rows]
        for f in range(p):
            nb = edges[f].size + 1
            if nb < 2:
                continue
            key = loc * max_bins + binned[rows, f]
            sums = np.bincount(key, weights=res, minlength=n_active * max_bins)
            cnts = np.bincount(key, minlength=n_active * max_bins)
            sums = sums.reshape(n_active, max_bins)[:, :nb]
            cnts = cnts.reshape(n_active, max_bins)[:, :nb]
            csum = np.cumsum(sums, axis=1)[:, :-1]
            ccnt = np.cumsum(cnts, axis=1)[:, :-1]
            tot_sum = np.array([node_sum[nd] for nd in active])[:, None]
            tot_cnt = np.array([node_cnt[nd] for nd in active])[:, None]
            rsum = tot_sum - csum
            rcnt = tot_cnt - ccnt
            ok = (ccnt >= params.min_samples_leaf) & (rcnt >= params.min_samples_leaf)
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(ok, csum**2 / ccnt + rsum**2 / rcnt - base_score[:, None], 0.0)
            gain = np.where(np.isfinite(gain), gain, 0.0)
            cand = gain.argmax(axis=1)
            cand_gain = gain[np.arange(n_active), cand]
            better = cand_gain > best_gain + 1e-12
            best_gain = np.where(better, cand_gain, best_gain)
            best_feat = np.where(better, f, best_feat)
            best_bin = np.where(better, cand, best_bin)

        next_active = []
        split_nodes = {}
        for i, nd in enumerate(active):
            if best_feat[i] < 0 or best_gain[i] <= 1e-12:
                value[nd] = node_sum[nd] / node_cnt[nd]
                continue
            f = int(best_feat[i])
            bn = int(best_bin[i])
            feature[nd] = f
            threshold[nd] = float(edges[f][bn])
            li = len(feature)
            feature.extend([-1, -1])
            threshold.extend([0.0, 0.0])
            left.extend([-1, -1])
            right.extend([-1, -1])
            value.extend([0.0, 0.0])
            left[nd] = li
            right[nd] = li + 1
            split_nodes[nd] = (f, bn, li)
            next_active.extend([li, li + 1])

        if not split_nodes:
            active = []
            break
        # reassign rows and recompute child stats
        for nd, (f, bn, li) in split_nodes.items():
            node_rows = np.flatnonzero(node_of == nd)
            goes_left = binned[node_rows, f] <= bn
            lrows = node_rows[goes_left]
            rrows = node_rows[~goes_left]
            node_of[lrows] = li
            node_of[rrows] = li + 1
            node_sum[li] = residual[lrows].sum()
            node_cnt[li] = lrows.size
            node_sum[li + 1] = residual[rrows].sum()
            node_cnt[li + 1] = rrows.size
        active = next_active

    for nd in active:  # nodes at max depth become leaves
        value[nd] = node_sum[nd] / node_cnt[nd]

    return _Tree(feature=np.array(feature, dtype=np.int64),
                 threshold=np.array(threshold, dtype=np.float64),
                 left=np.array(left, dtype=np.int64),
                 right=np.array(right, dtype=np.int64),
                 value=np.array(value, dtype=np.float64))


def fit_gbt(X: DesignMatrix, y, params: GbtParams | None = None) -> GbtModel:
    """Boosted regression trees on squared loss.

    Starts from the label mean, then each round fits a histogram tree to
    the residuals and adds learning_rate times its prediction. Training
    MSE is recorded per round and verified to be non-increasing.
    """
    params = params or GbtParams()
    y = np.asarray(y, dtype=np.float64)
    n = X.values.shape[0]
    if n < 2 or y.shape[0] != n:
        raise ValueError("need at least 2 aligned rows to fit")

    edges = [_bin_edges(X.values[:, f], params.n_bins) for f in range(X.values.shape[1])]
    binned = np.empty_like(X.values, dtype=np.int64)
    for f, e in enumerate(edges):
        binned[:, f] = np.searchsorted(e, X.values[:, f], side="left")

    model = GbtModel(params=params, col_names=list(X.col_names),
                     base_prediction=float(y.mean()))
    pred = np.full(n, model.base_prediction)
    prev_mse = float(np.mean((y - pred) ** 2))
    for _ in range(params.n_rounds):
        residual = y - pred
        tree = _grow_tree(binned, edges, residual, params)
        pred = pred + params.learning_rate * tree.predict(X.values)
        mse = float(np.mean((y - pred) ** 2))
        if mse > prev_mse + 1e-12 * max(1.0, prev_mse):
            raise AssertionError(f"training MSE increased: {prev_mse} -> {mse}")
        model.trees.append(tree)
        model.train_mse.append(mse)
        prev_mse = mse
    return model


def _align(model_cols, X: DesignMatrix) -> np.ndarray:
    if list(X.col_names) == list(model_cols):
        return X.values
    pos = {name: i for i, name in enumerate(X.col_names)}
    missing = [c for c in model_cols if c not in pos]
    extra = [c for c in X.col_names if c not in set(model_cols)]
    if missing:
        raise ValueError(f"design matrix is missing columns {missing}; extra columns {extra}")
    return X.values[:, [pos[c] for c in model_cols]]


def predict(model, X: DesignMatrix) -> np.ndarray:
    """Predict with a fitted ridge or GBT model; columns are aligned by name."""
    if isinstance(model, RidgeModel):
        values = _align(model.col_names, X)
        Xs = (values - model.means) / model.stds
        return Xs @ model.coefficients + model.intercept
    if isinstance(model, GbtModel):
        values = _align(model.col_names, X)
        aligned = DesignMatrix(values, list(model.col_names), list(X.row_ids))
        pred = np.full(values.shape[0], model.base_prediction)
        for tree in model.trees:
            pred = pred + model.params.learning_rate * tree.predict(aligned.values)
        return pred
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _tree_to_nested(tree: _Tree, node: int = 0):
    if tree.feature[node] < 0:
        return {"value": float(tree.value[node])}
    return {
        "feature": int(tree.feature[node]),
        "threshold": float(tree.threshold[node]),
        "left": _tree_to_nested(tree, int(tree.left[node])),
        "right": _tree_to_nested(tree, int(tree.right[node])),
    }


def _tree_from_nested(nested) -> _Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def walk(node) -> int:
        idx = len(feature)
        if "value" in node:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(node["value"]))
            return idx
        feature.append(int(node["feature"]))
        threshold.append(float(node["threshold"]))
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        left[idx] = walk(node["left"])
        right[idx] = walk(node["right"])
        return idx

    walk(nested)
    return _Tree(feature=np.array(feature, dtype=np.int64),
                 threshold=np.array(threshold, dtype=np.float64),
                 left=np.array(left, dtype=np.int64),
                 right=np.array(right, dtype=np.int64),
                 value=np.array(value, dtype=np.float64))


def save_regressor(model, path) -> None:
    if isinstance(model, RidgeModel):
        payload = {
            "format_version": MODEL_FORMAT,
            "kind": "ridge",
            "col_names": model.col_names,
            "coefficients": model.coefficients.tolist(),
            "intercept": model.intercept,
            "lambda": model.lam,
            "means": model.means.tolist(),
            "stds": model.stds.tolist(),
            "dropped": model.dropped,
        }
    elif isinstance(model, GbtModel):
        payload = {
            "format_version": MODEL_FORMAT,
            "kind": "gbt",
            "col_names": model.col_names,
            "base_prediction": model.base_prediction,
            "params": {
                "max_depth": model.params.max_depth,
                "n_rounds": model.params.n_rounds,
                "learning_rate": model.params.learning_rate,
                "min_samples_leaf": model.params.min_samples_leaf,
                "n_bins": model.params.n_bins,
            },
            "trees": [_tree_to_nested(t) for t in model.trees],
            "train_mse": model.train_mse,
        }
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_regressor(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != MODEL_FORMAT:
        raise ValueError(f"{path}: model format {version!r} does not match expected {MODEL_FORMAT!r}")
    if payload["kind"] == "ridge":
        return RidgeModel(
            col_names=list(payload["col_names"]),
            coefficients=np.asarray(payload["coefficients"], dtype=np.float64),
            intercept=float(payload["intercept"]),
            lam=float(payload["lambda"]),
            means=np.asarray(payload["means"], dtype=np.float64),
            stds=np.asarray(payload["stds"], dtype=np.float64),
            dropped=list(payload["dropped"]),
        )
    if payload["kind"] == "gbt":
        model = GbtModel(
            params=GbtParams(**payload["params"]),
            col_names=list(payload["col_names"]),
            base_prediction=float(payload["base_prediction"]),
        )
        model.trees = [_tree_from_nested(t) for t in payload["trees"]]
        model.train_mse = list(payload["train_mse"])
        return model
    raise ValueError(f"{path}: unknown model kind {payload['kind']!r}")
