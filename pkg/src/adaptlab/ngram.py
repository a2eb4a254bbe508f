"""Count-based n-gram language model with add-k smoothing.

A bounded sequence ``⟨s⟩ w1 .. wm ⟨/s⟩`` is scored as the chain

    P(w1 | ⟨s⟩) · P(w2 | w1) · ... · P(⟨/s⟩ | wm)

so there are K = m + 1 predicted events: ``⟨/s⟩`` is predicted, ``⟨s⟩`` is
only ever conditioned on. Orders above 2 pad the left context with extra
``⟨s⟩`` tokens.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .tokenizer import BOS_ID, TokenSequence


@dataclass(frozen=True)
class LogProb:
    """log2 probability of a sequence; ``zero`` flags a -inf result."""

    bits: float
    events: int

    @property
    def zero(self) -> bool:
        return self.bits == -math.inf


@dataclass
class NGramModel:
    order: int
    vocab_size: int
    k: float = 0.0
    context_counts: Counter = field(default_factory=Counter)
    joint_counts: Counter = field(default_factory=Counter)

    def cond_prob(self, context: tuple[int, ...], token: int) -> float:
        return cond_prob(self, context, token)

    def dump(self, path: str | Path | None = None) -> str:
        """Sorted text dump, one ``id id ... <tab> count`` line per joint tuple."""
        lines = [f"# order={self.order} vocab_size={self.vocab_size} k={self.k!r}"]
        for key in sorted(self.joint_counts):
            lines.append(" ".join(map(str, key)) + "\t" + str(self.joint_counts[key]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = dict(part.split("=", 1) for part in lines[0].lstrip("# ").split())
        model = cls(int(header["order"]), int(header["vocab_size"]), float(header["k"]))
        for line in lines[1:]:
            if not line.strip():
                continue
            ids, count = line.split("\t")
            key = tuple(int(x) for x in ids.split())
            model.joint_counts[key] = int(count)
            model.context_counts[key[:-1]] += int(count)
        return model


def events(seq: TokenSequence, order: int) -> Iterator[tuple[tuple[int, ...], int]]:
    """Yield the (context, token) prediction events of a bounded sequence."""
    if not seq.has_boundaries:
        raise ValueError("n-gram scoring needs sequences with boundaries")
    ids = (BOS_ID,) * max(order - 2, 0) + seq.ids
    start = max(order - 2, 0) + 1
    for i in range(start, len(ids)):
        yield ids[i - order + 1 : i], ids[i]


def fit(corpus: Iterable[TokenSequence], order: int, k: float = 0.0, vocab_size: int | None = None) -> NGramModel:
    if order < 1:
        raise ValueError("order must be >= 1")
    if k < 0:
        raise ValueError("smoothing k must be >= 0")
    corpus = list(corpus)
    if vocab_size is None:
        vocab_size = 1 + max((max(s.ids) for s in corpus if s.ids), default=2)
    model = NGramModel(order, vocab_size, k)
    for seq in corpus:
        for ctx, tok in events(seq, order):
            model.context_counts[ctx] += 1
            model.joint_counts[ctx + (tok,)] += 1
    return model


def cond_prob(model: NGramModel, context: tuple[int, ...], token: int) -> float:
    context = tuple(context)
    if len(context) != model.order - 1:
        raise ValueError(f"context length must be {model.order - 1}")
    c_ctx = model.context_counts.get(context, 0)
    denom = c_ctx + model.k * model.vocab_size
    if denom == 0:
        return 1.0 / model.vocab_size
    return (model.joint_counts.get(context + (token,), 0) + model.k) / denom


def sequence_log_prob(model: NGramModel, seq: TokenSequence) -> LogProb:
    total = 0.0
    n = 0
    for ctx, tok in events(seq, model.order):
        n += 1
        p = cond_prob(model, ctx, tok)
        total = -math.inf if p == 0.0 else total + math.log2(p)
    return LogProb(total, n)


def perplexity_root(model: NGramModel, seq: TokenSequence) -> float:
    """K-th root of the inverse sequence probability, from the raw product."""
    probs = [cond_prob(model, ctx, tok) for ctx, tok in events(seq, model.order)]
    if not probs:
        raise ValueError("sequence has no predicted events")
    if 0.0 in probs:
        return math.inf
    K = len(probs)
    p = math.prod(probs)
    if p > 1e-300:
        return (1.0 / p) ** (1.0 / K)
    # product underflowed: take the root factor by factor instead
    return math.prod(q ** (-1.0 / K) for q in probs)


def perplexity_xent(model: NGramModel, seq: TokenSequence) -> float:
    """Two to the per-event cross-entropy in bits."""
    lp = sequence_log_prob(model, seq)
    if lp.events < 1:
        raise ValueError("sequence has no predicted events")
    if lp.zero:
        return math.inf
    return 2.0 ** (-lp.bits / lp.events)
