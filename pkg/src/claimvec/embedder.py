"""Document-embedding training with negative-sampling SGD.

Two objectives are supported. The bag-of-words variant (PV_DBOW) predicts
each token of a document from the document vector alone; its optional
joint mode adds skip-gram updates between co-windowed tokens so word
vectors are trained too. The distributed-memory variant (PV_DM) predicts
each token from the mean of the document vector and the reduced-window
context word vectors.

Per training example with predictor c, target t and k noise draws j, the
loss is

    L = -log sigmoid(u_t . c) - sum_j log sigmoid(-u_j . c)

where u are output rows. `ns_loss_and_grads` is the reference form of this
objective with exact analytic gradients; the compiled kernels apply the
same math in place.

Training with one worker is bit-deterministic under the config seed. With
several workers, shards of documents update the shared matrices from
concurrent threads without locks; the result then depends on thread
interleaving and only finiteness is guaranteed.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

MODEL_FORMAT = "claimvec-embed/1"
_MASK64 = (1 << 64) - 1


class EmbedModel(enum.Enum):
    PV_DBOW = "PV_DBOW"
    PV_DM = "PV_DM"


@dataclass(frozen=True)
class EmbedConfig:
    """Training hyperparameters.

    `window` matters only for PV_DM and for PV_DBOW's joint word
    training; a pure PV_DBOW run accepts it but never consumes it, since
    the document vector predicts every token regardless of position.
    """

    model: EmbedModel = EmbedModel.PV_DBOW
    dim: int = 100
    window: int = 15
    negatives: int = 5
    epochs: int = 10
    lr_start: float = 0.025
    lr_end: float = 1e-4
    seed: int = 1
    workers: int = 1
    dm_combine: str = "mean"
    joint_word_training: bool = False
    fixed_window: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must be <= lr_start")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.dm_combine != "mean":
            raise ValueError(f"unsupported dm_combine {self.dm_combine!r}")
        if not isinstance(self.model, EmbedModel):
            object.__setattr__(self, "model", EmbedModel(self.model))


@dataclass
class EmbeddingModel:
    config: EmbedConfig
    vocab: Vocabulary
    doc_ids: list[str]
    doc_vectors: np.ndarray  # (D, dim) float64
    word_in: np.ndarray      # (V, dim) float64
    word_out: np.ndarray     # (V, dim) float64
    doc_index: dict[str, int] = field(init=False)
    training_losses: list[float] = field(default_factory=list)
    skipped_docs: int = 0

    def __post_init__(self):
        self.doc_index = {pid: i for i, pid in enumerate(self.doc_ids)}

    def doc_vector(self, patient_id: str) -> np.ndarray:
        return self.doc_vectors[self.doc_index[patient_id]]

    def word_vector(self, code: str) -> np.ndarray:
        return self.word_in[self.vocab.index_of[code]]


def init_model(config: EmbedConfig, vocab: Vocabulary, docs) -> EmbeddingModel:
    """Allocate matrices: doc and input vectors uniform in [-0.5/dim, 0.5/dim],
    output vectors zero. `docs` is a document count or a list of document ids.
    """
    if isinstance(docs, int):
        doc_ids = [str(i) for i in range(docs)]
    else:
        doc_ids = [str(d) for d in docs]
    V = len(vocab)
    dim = config.dim
    rng = np.random.default_rng(config.seed)
    span = 1.0 / dim
    doc_vectors = (rng.random((len(doc_ids), dim)) - 0.5) * span
    word_in = (rng.random((V, dim)) - 0.5) * span
    word_out = np.zeros((V, dim), dtype=np.float64)
    return EmbeddingModel(config=config, vocab=vocab, doc_ids=doc_ids,
                          doc_vectors=doc_vectors, word_in=word_in, word_out=word_out)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def ns_loss_and_grads(center, target: int, negatives, word_out):
    """Loss and exact gradients for one negative-sampling example.

    Returns (loss, grad_center, grad_out_rows) where grad_out_rows has one
    row per involved output row, ordered [target, *negatives]. The target
    must not appear among the negatives.
    """
    center = np.asarray(center, dtype=np.float64)
    negatives = list(negatives)
    if target in negatives:
        raise ValueError("target must not appear among the negatives")
    ids = [target] + negatives
    rows = np.asarray(word_out, dtype=np.float64)[ids]
    scores = rows @ center
    labels = np.zeros(len(ids))
    labels[0] = 1.0
    # -log sigmoid(s) = softplus(-s); -log sigmoid(-s) = softplus(s)
    loss = float(np.logaddexp(0.0, -scores[0]) + np.logaddexp(0.0, scores[1:]).sum())
    residual = labels - _stable_sigmoid(scores)
    grad_center = -(residual @ rows)
    grad_out_rows = -np.outer(residual, center)
    return loss, grad_center, grad_out_rows


def _encode_documents(model: EmbeddingModel, cohort):
    """Flatten in-vocab token ids: (flat, offsets, rows) plus skipped-doc count."""
    index_of = model.vocab.index_of
    flat: list[int] = []
    offsets = [0]
    rows: list[int] = []
    skipped = 0
    for doc in cohort.documents:
        ids = [index_of[t] for t in doc.tokens if t in index_of]
        if not ids:
            skipped += 1
            continue
        row = model.doc_index.get(doc.patient_id)
        if row is None:
            raise ValueError(f"document {doc.patient_id!r} has no row in the model")
        flat.extend(ids)
        offsets.append(len(flat))
        rows.append(row)
    return (np.asarray(flat, dtype=np.int64),
            np.asarray(offsets, dtype=np.int64),
            np.asarray(rows, dtype=np.int64),
            skipped)


def _mix_seed(*parts: int) -> int:
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h ^= (p + 0x9E3779B97F4A7C15 + ((h << 6) & _MASK64) + (h >> 2)) & _MASK64
        h &= _MASK64
    return h


def _epoch_args(model: EmbeddingModel):
    cfg = model.config
    keep = model.vocab.keep_probs()
    use_sub = model.vocab.subsample > 0.0
    return cfg, keep, use_sub


def _run_epoch_shard(model, flat, offsets, rows, lr_pair, total_updates, first_update, seed, update_out=True):
    cfg, keep, use_sub = _epoch_args(model)
    state = _kernels.make_state(seed)
    lr_start, lr_end = lr_pair
    if cfg.model is EmbedModel.PV_DBOW:
        return _kernels.dbow_epoch(
            model.doc_vectors, model.word_in, model.word_out, flat, offsets, rows,
            model.vocab.noise_table, cfg.negatives, cfg.window, cfg.fixed_window,
            cfg.joint_word_training, keep, use_sub,
            lr_start, lr_end, total_updates, first_update, state, update_out)
    return _kernels.dm_epoch(
        model.doc_vectors, model.word_in, model.word_out, flat, offsets, rows,
        model.vocab.noise_table, cfg.negatives, cfg.window, cfg.fixed_window,
        keep, use_sub,
        lr_start, lr_end, total_updates, first_update, state, update_out, True)


def _check_finite(model: EmbeddingModel) -> None:
    for name, mat in (("doc_vectors", model.doc_vectors),
                      ("word_in", model.word_in),
                      ("word_out", model.word_out)):
        if not np.isfinite(mat).all():
            raise FloatingPointError(f"non-finite values in {name} after training")


def train(model: EmbeddingModel, cohort) -> EmbeddingModel:
    """Run `config.epochs` passes over the cohort, updating the model in place.

    Documents whose tokens are all out of vocabulary are skipped (their
    count lands on `model.skipped_docs`). Mean per-example loss for each
    epoch is appended to `model.training_losses`.
    """
    cfg = model.config
    if len(model.vocab) < 2:
        raise ValueError("negative sampling needs a vocabulary of at least 2 tokens")
    flat, offsets, rows, skipped = _encode_documents(model, cohort)
    model.skipped_docs = skipped
    if skipped:
        logger.warning("skipped %d documents with no in-vocabulary tokens", skipped)
    positions = int(flat.shape[0])
    if cfg.epochs == 0 or positions == 0:
        return model
    total_updates = cfg.epochs * positions
    lr_pair = (cfg.lr_start, cfg.lr_end)

    n_docs = rows.shape[0]
    workers = min(cfg.workers, n_docs)
    for epoch in range(cfg.epochs):
        epoch_base = epoch * positions
        if workers == 1:
            loss, n_examples, _ = _run_epoch_shard(
                model, flat, offsets, rows, lr_pair, total_updates, epoch_base,
                _mix_seed(cfg.seed, epoch, 0))
        else:
            loss = 0.0
            n_examples = 0
            bounds = np.linspace(0, n_docs, workers + 1).astype(int)
            jobs = []
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for w in range(workers):
                    lo, hi = bounds[w], bounds[w + 1]
                    if lo == hi:
                        continue
                    shard_offsets = offsets[lo:hi + 1]
                    first_update = epoch_base + int(offsets[lo])
                    jobs.append(pool.submit(
                        _run_epoch_shard, model, flat, shard_offsets, rows[lo:hi],
                        lr_pair, total_updates, first_update, _mix_seed(cfg.seed, epoch, w)))
                for job in jobs:
                    l, n, _ = job.result()
                    loss += l
                    n_examples += n
        model.training_losses.append(loss / max(n_examples, 1))
    _check_finite(model)
    return model


def train_embeddings(config: EmbedConfig, vocab: Vocabulary, cohort) -> EmbeddingModel:
    """init_model + train over the cohort's documents."""
    model = init_model(config, vocab, [d.patient_id for d in cohort.documents])
    return train(model, cohort)


def infer_doc_vector(model: EmbeddingModel, tokens, infer_epochs: int | None = None,
                     lr: float | None = None, seed: int = 0, return_losses: bool = False):
    """Fit a fresh document vector against frozen word matrices.

    The vector is seeded deterministically from (config.seed, seed) and
    trained with the model's own objective, updating only itself. Raises
    if no token is in vocabulary.
    """
    cfg = model.config
    ids = [model.vocab.index_of[t] for t in tokens if t in model.vocab.index_of]
    if not ids:
        raise ValueError("no in-vocabulary tokens to infer from")
    epochs = cfg.epochs if infer_epochs is None else infer_epochs
    lr_start = cfg.lr_start if lr is None else lr
    lr_end = min(cfg.lr_end, lr_start)
    rng = np.random.default_rng([cfg.seed, seed])
    vec = ((rng.random(cfg.dim) - 0.5) / cfg.dim).reshape(1, cfg.dim)

    shadow = EmbeddingModel(
        config=replace(cfg, joint_word_training=False, workers=1),
        vocab=model.vocab, doc_ids=["_infer"],
        doc_vectors=vec, word_in=model.word_in, word_out=model.word_out)
    flat = np.asarray(ids, dtype=np.int64)
    offsets = np.asarray([0, len(ids)], dtype=np.int64)
    rows = np.asarray([0], dtype=np.int64)
    total = max(epochs * len(ids), 1)
    losses = []
    for epoch in range(epochs):
        loss, n, _ = _run_epoch_shard(
            shadow, flat, offsets, rows, (lr_start, lr_end), total,
            epoch * len(ids), _mix_seed(cfg.seed, seed, epoch), update_out=False)
        losses.append(loss / max(n, 1))
    result = vec[0].copy()
    if return_losses:
        return result, losses
    return result


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def save_model(model: EmbeddingModel, path) -> None:
    """Write the model container: one JSON header line, then raw float64 bytes
    for doc_vectors, word_in and word_out in C order. Byte-deterministic.
    """
    header = {
        "format_version": MODEL_FORMAT,
        "config": {
            "model": model.config.model.value,
            "dim": model.config.dim,
            "window": model.config.window,
            "negatives": model.config.negatives,
            "epochs": model.config.epochs,
            "lr_start": model.config.lr_start,
            "lr_end": model.config.lr_end,
            "seed": model.config.seed,
            "workers": model.config.workers,
            "dm_combine": model.config.dm_combine,
            "joint_word_training": model.config.joint_word_training,
            "fixed_window": model.config.fixed_window,
        },
        "vocab": {
            "tokens": model.vocab.tokens,
            "counts": [int(c) for c in model.vocab.counts],
            "alpha": model.vocab.alpha,
            "min_count": model.vocab.min_count,
            "subsample": model.vocab.subsample,
        },
        "doc_ids": model.doc_ids,
        "arrays": [
            {"name": "doc_vectors", "shape": list(model.doc_vectors.shape)},
            {"name": "word_in", "shape": list(model.word_in.shape)},
            {"name": "word_out", "shape": list(model.word_out.shape)},
        ],
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for mat in (model.doc_vectors, model.word_in, model.word_out):
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: corrupt model header") from exc
        version = header.get("format_version")
        if version != MODEL_FORMAT:
            raise ValueError(f"{path}: model format {version!r} does not match expected {MODEL_FORMAT!r}")
        arrays = {}
        for desc in header["arrays"]:
            shape = tuple(desc["shape"])
            n_bytes = int(np.prod(shape)) * 8
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise ValueError(f"{path}: truncated array {desc['name']!r} "
                                 f"(wanted {n_bytes} bytes, got {len(buf)})")
            arrays[desc["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after final array")
    cfg_raw = dict(header["config"])
    cfg_raw["model"] = EmbedModel(cfg_raw["model"])
    config = EmbedConfig(**cfg_raw)
    voc_raw = header["vocab"]
    vocab = Vocabulary(tokens=list(voc_raw["tokens"]),
                       counts=np.asarray(voc_raw["counts"], dtype=np.int64),
                       alpha=voc_raw["alpha"], min_count=voc_raw["min_count"],
                       subsample=voc_raw.get("subsample", 0.0))
    return EmbeddingModel(config=config, vocab=vocab, doc_ids=list(header["doc_ids"]),
                          doc_vectors=arrays["doc_vectors"],
                          word_in=arrays["word_in"], word_out=arrays["word_out"])


def export_vectors(model: EmbeddingModel, path, include_words: bool = True) -> None:
    """Plain-text export: first line `N dim`, then `id v1 ... vdim` rows with
    ids `doc:<patient_id>` and `word:<code>`.
    """
    n = len(model.doc_ids) + (len(model.vocab) if include_words else 0)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{n} {model.config.dim}\n")
        for pid, row in zip(model.doc_ids, model.doc_vectors):
            fh.write("doc:" + pid + " " + " ".join(f"{v:.6g}" for v in row) + "\n")
        if include_words:
            for token, row in zip(model.vocab.tokens, model.word_in):
                fh.write("word:" + token + " " + " ".join(f"{v:.6g}" for v in row) + "\n")
