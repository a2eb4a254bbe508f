"""Word-level tokenizer shared by the n-gram and neural models.

Text is NFC-normalized, split on Unicode whitespace, and each word has its
leading and trailing punctuation peeled off into one-character tokens::

    "a, b"      -> ["a", ",", "b"]
    "(x)."      -> ["(", "x", ")", "."]
    "<|user|>"  -> ["<", "|", "user", "|", ">"]

Punctuation here means any character whose Unicode category starts with
``P`` or ``S``. A word made only of punctuation becomes one token per char.
The literal ``⟨unk⟩`` is recognised as the unknown token so decode/encode is
idempotent at the id level.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

BOS = "⟨s⟩"
EOS = "⟨/s⟩"
UNK = "⟨unk⟩"
RESERVED = (BOS, EOS, UNK)
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2


class InvalidTokenId(ValueError):
    pass


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def split_words(text: str) -> list[str]:
    """Surface tokens of ``text`` under the splitting rule above."""
    out: list[str] = []
    for word in unicodedata.normalize("NFC", text).split():
        if word in RESERVED:
            out.append(word)
            continue
        i, j = 0, len(word)
        while i < j and _is_punct(word[i]):
            i += 1
        while j > i and _is_punct(word[j - 1]):
            j -= 1
        out.extend(word[:i])
        if i < j:
            out.append(word[i:j])
        out.extend(word[j:])
    return out


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.id_to_token[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        mapping = {t: i for i, t in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    has_boundaries: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab_size: int) -> None:
        for i in self.ids:
            if not 0 <= i < vocab_size:
                raise InvalidTokenId(f"token id {i} outside vocabulary of size {vocab_size}")
        if self.has_boundaries:
            ids = self.ids
            if len(ids) < 2 or ids[0] != BOS_ID or ids[-1] != EOS_ID:
                raise ValueError("bounded sequence must start with ⟨s⟩ and end with ⟨/s⟩")
            if BOS_ID in ids[1:-1] or EOS_ID in ids[1:-1]:
                raise ValueError("boundary tokens inside sequence body")


def build_vocab(corpus: str | Iterable[str], max_size: int) -> Vocabulary:
    """Reserved tokens plus the ``max_size - 3`` most frequent surface tokens.

    Frequency ties are broken by the token string, so the result depends
    only on the corpus contents.
    """
    if max_size < 4:
        raise ValueError("max_size must be >= 4")
    if isinstance(corpus, str):
        corpus = [corpus]
    counts: Counter[str] = Counter()
    for chunk in corpus:
        counts.update(t for t in split_words(chunk) if t not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(RESERVED + tuple(t for t, _ in ranked[: max_size - 3]))


def encode(text: str, vocab: Vocabulary, add_boundaries: bool = True) -> TokenSequence:
    lookup = vocab.token_to_id
    ids = []
    for tok in split_words(text):
        if tok == BOS or tok == EOS:
            ids.append(UNK_ID)
        else:
            ids.append(lookup.get(tok, UNK_ID))
    if add_boundaries:
        ids = [BOS_ID, *ids, EOS_ID]
    return TokenSequence(tuple(ids), add_boundaries)


def decode(ids: Iterable[int] | TokenSequence, vocab: Vocabulary) -> str:
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    words = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise InvalidTokenId(f"token id {i} outside vocabulary of size {vocab.size}")
        if i in (BOS_ID, EOS_ID):
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)
