"""Brute-force reference implementations used as test oracles.

These enumerate every frame-level path explicitly and share no code with the
package, so agreement is evidence of correctness rather than consistency.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def collapse_ref(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def all_paths(T, size):
    return itertools.product(range(size), repeat=T)


def brute_ctc_prob(probs, target, blank):
    T, size = probs.shape
    total = 0.0
    for path in all_paths(T, size):
        if collapse_ref(path, blank) == list(target):
            total += math.prod(probs[t, k] for t, k in enumerate(path))
    return total


def brute_viterbi(probs, target, blank):
    """Best (probability, path) over valid alignments; ties keep the first in lexicographic order."""
    T, size = probs.shape
    best, best_path = -1.0, None
    for path in all_paths(T, size):
        if collapse_ref(path, blank) == list(target):
            p = math.prod(probs[t, k] for t, k in enumerate(path))
            if p > best:
                best, best_path = p, list(path)
    return best, best_path


def brute_label_posteriors(probs, blank):
    """Map every collapsed label sequence to its summed path probability."""
    T, size = probs.shape
    totals: dict[tuple[int, ...], float] = {}
    for path in all_paths(T, size):
        key = tuple(collapse_ref(path, blank))
        totals[key] = totals.get(key, 0.0) + math.prod(probs[t, k] for t, k in enumerate(path))
    return totals


def random_grid(rng, T, size, peaky=1.0):
    logits = rng.normal(scale=peaky, size=(T, size))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def edit_distance_ref(a, b):
    """Recursive Levenshtein with memoisation."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))
