"""Token vocabulary, frequency counts, and the negative-sampling noise table.

The noise distribution is p(w) proportional to count(w)**alpha, realized as
a cumulative table so one draw costs a binary search (O(log V)). A built
Vocabulary is immutable in practice and safe for concurrent reads; callers
own their random generators.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: np.ndarray
    alpha: float
    min_count: int
    subsample: float = 0.0
    index_of: dict[str, int] = field(init=False)
    noise_probs: np.ndarray = field(init=False)
    noise_table: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.tokens) != len(self.counts):
            raise ValueError("tokens and counts must have equal length")
        if len(self.tokens) == 0:
            raise ValueError("empty vocabulary")
        self.index_of = {t: i for i, t in enumerate(self.tokens)}
        weights = self.counts.astype(np.float64) ** self.alpha
        self.noise_probs = weights / weights.sum()
        self.noise_table = np.cumsum(self.noise_probs)
        self.noise_table[-1] = 1.0  # guard the float tail so every draw lands in range

    def __len__(self) -> int:
        return len(self.tokens)

    def keep_probs(self) -> np.ndarray:
        """Per-token keep probability under frequency subsampling (1.0 when off)."""
        if self.subsample <= 0.0:
            return np.ones(len(self.tokens), dtype=np.float64)
        freq = self.counts / self.counts.sum()
        return np.minimum(1.0, np.sqrt(self.subsample / freq))


def _token_streams(source):
    documents = getattr(source, "documents", source)
    for doc in documents:
        yield doc.tokens if hasattr(doc, "tokens") else doc


def build_vocab(cohort, min_count: int = 5, alpha: float = 0.75, subsample: float = 0.0) -> Vocabulary:
    """Count tokens over all documents and keep those with count >= min_count.

    Ids are dense 0..V-1, assigned by descending count with lexicographic
    tie-break, so rebuilding from the same cohort reproduces the same ids.
    min_count=1 keeps every token (the no-filtering configuration).
    """
    counter: Counter[str] = Counter()
    for tokens in _token_streams(cohort):
        counter.update(tokens)
    retained = [(t, c) for t, c in counter.items() if c >= min_count]
    if not retained:
        raise ValueError("empty vocabulary: no token reaches min_count "
                         f"({min_count}) over {sum(counter.values())} occurrences")
    retained.sort(key=lambda tc: (-tc[1], tc[0]))
    tokens = [t for t, _ in retained]
    counts = np.array([c for _, c in retained], dtype=np.int64)
    return Vocabulary(tokens=tokens, counts=counts, alpha=alpha, min_count=min_count, subsample=subsample)


def sample_negative(vocab: Vocabulary, rng: np.random.Generator, exclude: int | None = None) -> int:
    """Draw one token id from the noise table, rejecting `exclude` if given."""
    V = len(vocab)
    if exclude is not None and V < 2:
        raise ValueError("cannot exclude a token from a single-token vocabulary")
    table = vocab.noise_table
    while True:
        wid = int(np.searchsorted(table, rng.random(), side="right"))
        if wid >= V:  # rng.random() can equal the 1.0 tail only by float edge
            wid = V - 1
        if exclude is None or wid != exclude:
            return wid


def save_vocab(vocab: Vocabulary, path) -> None:
    """Persist as text: header `V min_count alpha`, then `token<TAB>count` in id order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(vocab)} {vocab.min_count} {vocab.alpha!r}\n")
        for token, count in zip(vocab.tokens, vocab.counts):
            fh.write(f"{token}\t{int(count)}\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: malformed vocabulary header")
        V, min_count, alpha = int(header[0]), int(header[1]), float(header[2])
        tokens: list[str] = []
        counts: list[int] = []
        for line in fh:
            if not line.strip():
                continue
            token, _, count = line.rstrip("\n").partition("\t")
            tokens.append(token)
            counts.append(int(count))
    if len(tokens) != V:
        raise ValueError(f"{path}: header claims {V} tokens, found {len(tokens)}")
    return Vocabulary(tokens=tokens, counts=np.array(counts, dtype=np.int64), alpha=alpha, min_count=min_count)
