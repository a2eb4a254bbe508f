"""Entropy, cross-entropy, KL divergence, block entropy and perplexity.

All quantities are in bits (log base 2), so perplexity is exactly ``2**h``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import TokenSequence

PROB_TOL = 1e-9


class InsufficientData(ValueError):
    pass


def as_dist(p: Sequence[float] | np.ndarray) -> np.ndarray:
    """Validate a finite probability vector and return it as float64."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("distribution must be a non-empty 1-d vector")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(math.fsum(arr) - 1.0) > PROB_TOL:
        raise ValueError(f"probabilities sum to {math.fsum(arr)!r}, not 1")
    return arr


def entropy(p) -> float:
    p = as_dist(p)
    nz = p[p > 0]
    return float(-math.fsum(nz * np.log2(nz))) + 0.0


def cross_entropy(p, q) -> float:
    """``-sum p_i log2 q_i``; +inf when q misses mass that p has."""
    p, q = as_dist(p), as_dist(q)
    if p.shape != q.shape:
        raise ValueError("distributions have different support sizes")
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(-math.fsum(p[mask] * np.log2(q[mask]))) + 0.0


def kl_divergence(p, q) -> float:
    h_pq = cross_entropy(p, q)
    if math.isinf(h_pq):
        return math.inf
    return h_pq - entropy(p)


def perplexity_from_xent(h: float) -> float:
    if not (h >= 0 or math.isinf(h)):
        raise ValueError("cross-entropy must be non-negative")
    return 2.0 ** h


def _windows(corpus: Sequence[TokenSequence], n: int) -> Counter:
    counts: Counter = Counter()
    for seq in corpus:
        ids = seq.ids
        for i in range(len(ids) - n + 1):
            counts[ids[i : i + n]] += 1
    return counts


def block_entropy(corpus: Sequence[TokenSequence], n: int) -> float:
    """``F_N``: entropy of the N-gram windows minus that of their (N-1)-prefixes.

    The (N-1)-gram distribution is the prefix marginal of the same N-gram
    windows, so F_N is the conditional entropy of the last token given the
    previous N-1 and can never go negative. Windows never cross sequences.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    if not corpus:
        raise InsufficientData("empty corpus")
    joint = _windows(corpus, n)
    total = sum(joint.values())
    if total == 0:
        raise InsufficientData(f"no sequence has {n} tokens")
    prefix: Counter = Counter()
    for w, c in joint.items():
        prefix[w[:-1]] += c
    terms = [c * math.log2(c / prefix[w[:-1]]) for w, c in joint.items()]
    return -math.fsum(terms) / total + 0.0


@dataclass(frozen=True)
class BlockEntropySeries:
    values: tuple[float, ...]
    token_count: int

    @property
    def estimate(self) -> float:
        """Entropy-rate estimate: the value at the largest computed order."""
        return self.values[-1]


def entropy_rate_estimate(corpus: Sequence[TokenSequence], n_max: int) -> BlockEntropySeries:
    if n_max < 1:
        raise ValueError("N_max must be >= 1")
    values = tuple(block_entropy(corpus, n) for n in range(1, n_max + 1))
    return BlockEntropySeries(values, sum(len(s) for s in corpus))
