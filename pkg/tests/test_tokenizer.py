import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptlab.tokenizer import (
    BOS_ID, EOS_ID, RESERVED, UNK, UNK_ID, InvalidTokenId, TokenSequence, Vocabulary,
    build_vocab, decode, encode, split_words,
)


def test_build_vocab_frequency_order():
    v = build_vocab("a b a", 8)
    assert v.id_to_token == RESERVED + ("a", "b")
    assert v.token_to_id["a"] == 3 and v.token_to_id["b"] == 4


def test_build_vocab_empty_corpus_is_reserved_only():
    assert build_vocab("", 8).size == 3
    assert build_vocab([], 8).size == 3


def test_build_vocab_tie_rule():
    # x and y both occur twice; the lexicographically smaller one wins the last slot
    v = build_vocab("x y x y z", 4)
    assert v.id_to_token == RESERVED + ("x",)


def test_build_vocab_rejects_tiny_max_size():
    with pytest.raises(ValueError):
        build_vocab("a", 3)


def test_build_vocab_deterministic():
    text = ["кошка сидит на окне .", "собака лежит на полу ,", "кошка спит"]
    assert build_vocab(text, 10) == build_vocab(list(text), 10)


def test_encode_basic_and_unknown():
    v = build_vocab("a b ,", 8)
    a, b = v.token_to_id["a"], v.token_to_id["b"]
    assert encode("a b", v).ids == (BOS_ID, a, b, EOS_ID)
    assert encode("a q", v).ids == (BOS_ID, a, UNK_ID, EOS_ID)
    assert encode("a b", v, add_boundaries=False).ids == (a, b)


def test_encode_splits_trailing_punctuation():
    v = build_vocab("a b ,", 8)
    comma = v.token_to_id[","]
    assert encode("a, b", v).ids == (BOS_ID, v.token_to_id["a"], comma, v.token_to_id["b"], EOS_ID)


def test_split_words_peels_leading_and_trailing_punctuation():
    assert split_words("«привет», (мир)!") == ["«", "привет", "»", ",", "(", "мир", ")", "!"]
    assert split_words("x = f(a)") == ["x", "=", "f(a", ")"]
    assert split_words("...") == [".", ".", "."]


def test_split_words_nfc():
    decomposed = "\u0435\u0308ж"  # e + combining diaeresis
    assert split_words(decomposed) == ["\u0451ж"]


def test_reserved_literals_in_text_map_to_unk():
    v = build_vocab("a", 8)
    assert encode("⟨s⟩ a ⟨/s⟩", v).ids == (BOS_ID, UNK_ID, 3, UNK_ID, EOS_ID)
    assert encode(UNK, v).ids == (BOS_ID, UNK_ID, EOS_ID)


def test_decode_basic():
    v = build_vocab("a b", 8)
    assert decode([BOS_ID, 3, 4, EOS_ID], v) == "a b"
    assert decode([], v) == ""


def test_decode_invalid_id():
    v = build_vocab("a b", 8)
    with pytest.raises(InvalidTokenId):
        decode([0, 99], v)


def test_encode_decode_encode_fixpoint_abc():
    v = build_vocab("a b c", 8)
    first = encode("a b c", v)
    assert encode(decode(first, v), v) == first


words = st.text(alphabet="abcxyzёжк.,!?()«»-", min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(st.lists(words, min_size=0, max_size=12), st.lists(words, min_size=0, max_size=12))
def test_roundtrip_fixpoint_property(train_words, text_words):
    v = build_vocab(" ".join(train_words), 12)
    text = " ".join(text_words)
    ids = encode(text, v)
    assert len(ids) >= 2
    assert encode(decode(ids, v), v) == ids
    ids.validate(v.size)


def test_vocab_save_load(tmp_path):
    v = build_vocab("привет мир , привет", 10)
    p = tmp_path / "vocab.txt"
    v.save(p)
    lines = p.read_text(encoding="utf-8").splitlines()
    assert lines[:3] == list(RESERVED)
    assert Vocabulary.load(p) == v


def test_vocabulary_requires_reserved_prefix():
    with pytest.raises(ValueError):
        Vocabulary(("a", "b", "c"))


def test_token_sequence_validate():
    TokenSequence((0, 3, 1), True).validate(4)
    with pytest.raises(InvalidTokenId):
        TokenSequence((0, 9, 1), True).validate(4)
    with pytest.raises(ValueError):
        TokenSequence((0, 1, 3, 1), True).validate(4)
