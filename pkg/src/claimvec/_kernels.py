"""Compiled inner loops for negative-sampling SGD.

All randomness comes from an explicit xorshift64* state passed in as a
one-element uint64 array, so the exact draw sequence is reproducible from
Python (the helpers below are callable directly, which the tests use to
replay a training run step by step). Kernels release the GIL so multiple
worker threads can update the shared matrices concurrently; those races
are accepted by the training contract and correctness tests run
single-threaded.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_MUL = np.uint64(0x2545F4914F6CDD1D)
_SM1 = np.uint64(0x9E3779B97F4A7C15)
_SM2 = np.uint64(0xBF58476D1CE4E5B9)
_SM3 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def make_state(seed):
    """Seed an xorshift64* state array via one splitmix64 scramble."""
    z = np.uint64(seed) + _SM1
    z = (z ^ (z >> np.uint64(30))) * _SM2
    z = (z ^ (z >> np.uint64(27))) * _SM3
    z = z ^ (z >> np.uint64(31))
    if z == np.uint64(0):
        z = _SM1
    out = np.empty(1, np.uint64)
    out[0] = z
    return out


@njit(cache=True, nogil=True, inline="always")
def _next(state):
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return x * _MUL


@njit(cache=True, nogil=True, inline="always")
def rand_uniform(state):
    return np.float64(_next(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True, inline="always")
def rand_below(state, n):
    return np.int64(_next(state) % np.uint64(n))


@njit(cache=True, nogil=True, inline="always")
def cdf_search(cdf, x):
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > x:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True, nogil=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True, inline="always")
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True)
def ns_pair(center, target, word_out, noise_cdf, negatives, lr, state, grad, update_out, apply_center):
    """One positive/negatives step against `center`; returns the loss.

    Output rows are updated with the pre-step center, and the center
    gradient uses the pre-step output rows. When apply_center is False the
    accumulated center delta is left in `grad` for the caller to
    distribute.
    """
    dim = center.shape[0]
    for d in range(dim):
        grad[d] = 0.0
    loss = 0.0
    for i in range(negatives + 1):
        if i == 0:
            wid = target
            label = 1.0
        else:
            wid = target
            while wid == target:
                wid = cdf_search(noise_cdf, rand_uniform(state))
            label = 0.0
        row = word_out[wid]
        s = 0.0
        for d in range(dim):
            s += row[d] * center[d]
        if label == 1.0:
            loss += _softplus(-s)
        else:
            loss += _softplus(s)
        g = (label - _sigmoid(s)) * lr
        for d in range(dim):
            grad[d] += g * row[d]
        if update_out:
            for d in range(dim):
                row[d] += g * center[d]
    if apply_center:
        for d in range(dim):
            center[d] += grad[d]
    return loss


@njit(cache=True, nogil=True)
def dbow_epoch(doc_vectors, word_in, word_out, flat, offsets, rows, noise_cdf,
               negatives, window, fixed_window, joint, keep_probs, use_subsample,
               lr_start, lr_end, total_updates, first_update, state, update_out):
    """One pass over the given documents with the bag-of-words objective.

    Each token position trains the document vector against the token;
    with `joint` on, token pairs inside a reduced window additionally
    train the input word vectors (context word predicts target).
    """
    dim = doc_vectors.shape[1]
    grad = np.empty(dim, np.float64)
    loss = 0.0
    n_examples = 0
    u = first_update
    for di in range(rows.shape[0]):
        cvec = doc_vectors[rows[di]]
        start = offsets[di]
        end = offsets[di + 1]
        for pos in range(start, end):
            t = flat[pos]
            if use_subsample and rand_uniform(state) >= keep_probs[t]:
                u += 1
                continue
            lr = lr_start + (lr_end - lr_start) * (u / total_updates)
            u += 1
            loss += ns_pair(cvec, t, word_out, noise_cdf, negatives, lr, state, grad, update_out, True)
            n_examples += 1
            if joint:
                b = window if fixed_window else 1 + rand_below(state, window)
                lo = pos - b
                if lo < start:
                    lo = start
                hi = pos + b
                if hi > end - 1:
                    hi = end - 1
                for p2 in range(lo, hi + 1):
                    if p2 == pos:
                        continue
                    loss += ns_pair(word_in[flat[p2]], t, word_out, noise_cdf, negatives,
                                    lr, state, grad, update_out, True)
                    n_examples += 1
    return loss, n_examples, u


@njit(cache=True, nogil=True)
def dm_epoch(doc_vectors, word_in, word_out, flat, offsets, rows, noise_cdf,
             negatives, window, fixed_window, keep_probs, use_subsample,
             lr_start, lr_end, total_updates, first_update, state, update_out, update_ctx):
    """One pass with the distributed-memory objective (mean combiner).

    The predictor is the mean of the document vector and the reduced-window
    context word vectors; the exact gradient of that mean sends an equal
    1/(n_ctx+1) share back to the document vector and each context row.
    """
    dim = doc_vectors.shape[1]
    grad = np.empty(dim, np.float64)
    comp = np.empty(dim, np.float64)
    loss = 0.0
    n_examples = 0
    u = first_update
    for di in range(rows.shape[0]):
        dvec = doc_vectors[rows[di]]
        start = offsets[di]
        end = offsets[di + 1]
        for pos in range(start, end):
            t = flat[pos]
            if use_subsample and rand_uniform(state) >= keep_probs[t]:
                u += 1
                continue
            b = window if fixed_window else 1 + rand_below(state, window)
            lo = pos - b
            if lo < start:
                lo = start
            hi = pos + b
            if hi > end - 1:
                hi = end - 1
            lr = lr_start + (lr_end - lr_start) * (u / total_updates)
            u += 1
            cnt = 1
            for d in range(dim):
                comp[d] = dvec[d]
            for p2 in range(lo, hi + 1):
                if p2 == pos:
                    continue
                wrow = word_in[flat[p2]]
                for d in range(dim):
                    comp[d] += wrow[d]
                cnt += 1
            inv = 1.0 / cnt
            for d in range(dim):
                comp[d] *= inv
            loss += ns_pair(comp, t, word_out, noise_cdf, negatives, lr, state, grad, update_out, False)
            n_examples += 1
            for d in range(dim):
                dvec[d] += grad[d] * inv
            if update_ctx:
                for p2 in range(lo, hi + 1):
                    if p2 == pos:
                        continue
                    wrow = word_in[flat[p2]]
                    for d in range(dim):
                        wrow[d] += grad[d] * inv
    return loss, n_examples, u
