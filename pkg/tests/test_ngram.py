import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptlab import ngram
from adaptlab.tokenizer import BOS_ID, EOS_ID, TokenSequence, build_vocab, encode

V = 6  # reserved ids 0-2, ordinary tokens 3-5


def bounded(*body):
    return TokenSequence((BOS_ID, *body, EOS_ID), True)


def oracle_prob(corpus, seq, n, k, V):
    """Count-and-multiply in exact rationals, written independently of the model.

    Position j of a sentence is predicted from the n-1 tokens before it, with
    missing history filled by the start symbol.
    """
    def history(ids, j):
        h = list(ids[max(0, j - (n - 1)) : j])
        return tuple([BOS_ID] * (n - 1 - len(h)) + h)

    joint, ctx = {}, {}
    for s in corpus:
        for j in range(1, len(s.ids)):
            h = history(s.ids, j)
            ctx[h] = ctx.get(h, 0) + 1
            joint[h + (s.ids[j],)] = joint.get(h + (s.ids[j],), 0) + 1
    p = Fraction(1)
    for j in range(1, len(seq.ids)):
        h = history(seq.ids, j)
        den = ctx.get(h, 0) + k * V
        p *= Fraction(1, V) if den == 0 else Fraction(joint.get(h + (seq.ids[j],), 0) + k, den)
    return p, len(seq.ids) - 1


sentence = st.lists(st.integers(3, V - 1), min_size=1, max_size=5).map(lambda b: bounded(*b))
corpus_st = st.lists(sentence, min_size=1, max_size=5)


@settings(max_examples=300, deadline=None)
@given(corpus_st, sentence, st.sampled_from([1, 2, 3]), st.sampled_from([0, 1]))
def test_matches_bruteforce_oracle(corpus, probe, n, k):
    model = ngram.fit(corpus, n, k, V)
    for seq in corpus + [probe]:
        p, K = oracle_prob(corpus, seq, n, k, V)
        lp = ngram.sequence_log_prob(model, seq)
        assert lp.events == K
        if p == 0:
            assert lp.zero and lp.bits == -math.inf
            assert ngram.perplexity_root(model, seq) == math.inf
        else:
            assert abs(lp.bits - math.log2(p)) <= 1e-12 * max(1.0, abs(lp.bits))
            ppl = float(p) ** (-1.0 / K)
            assert math.isclose(ngram.perplexity_root(model, seq), ppl, rel_tol=1e-12)


def test_fit_counts_single_sentence():
    m = ngram.fit([bounded(3, 4)], 2)
    assert dict(m.joint_counts) == {(0, 3): 1, (3, 4): 1, (4, 1): 1}


def test_context_count_two_sentences():
    m = ngram.fit([bounded(3, 4), bounded(3, 5)], 2)
    assert m.context_counts[(3,)] == 2


def test_unigram_context_is_empty_tuple():
    m = ngram.fit([bounded(3, 4)], 1)
    assert set(m.context_counts) == {()}
    assert m.context_counts[()] == 3


def test_trigram_pads_with_start_symbol():
    m = ngram.fit([bounded(3, 4)], 3)
    assert dict(m.joint_counts) == {(0, 0, 3): 1, (0, 3, 4): 1, (3, 4, 1): 1}


def test_invariant_context_dominates_joint():
    corpus = [bounded(3, 4, 3), bounded(5, 3), bounded(4, 4, 4, 5)]
    for n in (1, 2, 3):
        m = ngram.fit(corpus, n)
        for key, c in m.joint_counts.items():
            assert c >= 1 and m.context_counts[key[:-1]] >= c


def test_conditional_probabilities():
    m = ngram.fit([bounded(3, 4), bounded(3, 5)], 2, vocab_size=V)
    assert m.cond_prob((3,), 4) == 0.5
    assert m.cond_prob((BOS_ID,), 3) == 1.0
    assert ngram.cond_prob(ngram.fit([], 2, vocab_size=5), (3,), 4) == 1 / 5


def test_cond_prob_rejects_wrong_context_length():
    with pytest.raises(ValueError):
        ngram.fit([bounded(3)], 2, vocab_size=V).cond_prob((), 3)


@settings(max_examples=100, deadline=None)
@given(corpus_st, st.sampled_from([1, 2, 3]), st.floats(0.01, 2.0),
       st.lists(st.integers(0, V - 1), max_size=2))
def test_smoothed_distribution_sums_to_one(corpus, n, k, ctx):
    m = ngram.fit(corpus, n, k, V)
    context = (tuple(ctx) + (BOS_ID,) * 2)[: n - 1]
    assert math.isclose(math.fsum(m.cond_prob(context, t) for t in range(V)), 1.0, abs_tol=1e-9)


def test_sequence_log_prob_examples():
    assert ngram.sequence_log_prob(ngram.fit([bounded(3, 4)] * 2, 2), bounded(3, 4)).bits == 0.0
    m = ngram.fit([bounded(3, 4), bounded(3, 5)], 2, vocab_size=V)
    lp = ngram.sequence_log_prob(m, bounded(3, 4))
    assert lp.bits == -1.0 and lp.events == 3


def test_seven_word_sentence_has_eight_events():
    words = "Распознавание речи несомненно является сложной задачей ."
    v = build_vocab(words, 16)
    seq = encode(words, v)
    assert len(seq) - 2 == 7
    assert ngram.sequence_log_prob(ngram.fit([seq], 2), seq).events == 8


def test_perplexity_hand_case():
    m = ngram.fit([bounded(3, 4), bounded(3, 5)], 2, vocab_size=V)
    target = 2 ** (1 / 3)
    assert abs(ngram.perplexity_root(m, bounded(3, 4)) - target) < 1e-9
    assert abs(ngram.perplexity_xent(m, bounded(3, 4)) - target) < 1e-9


def test_perplexity_certain_sequence_is_one():
    m = ngram.fit([bounded(3, 4)], 2)
    assert ngram.perplexity_root(m, bounded(3, 4)) == 1.0
    assert ngram.perplexity_xent(m, bounded(3, 4)) == 1.0


def test_uniform_fallback_perplexity_is_v():
    m = ngram.fit([], 2, vocab_size=4)
    for seq in (bounded(3), bounded(3, 3, 2, 3)):
        assert ngram.perplexity_root(m, seq) == pytest.approx(4.0, rel=1e-12)
        assert ngram.perplexity_xent(m, seq) == pytest.approx(4.0, rel=1e-12)


def test_zero_probability_is_flagged():
    m = ngram.fit([bounded(3, 4)], 2, vocab_size=V)
    lp = ngram.sequence_log_prob(m, bounded(3, 5))
    assert lp.zero
    assert ngram.perplexity_xent(m, bounded(3, 5)) == math.inf


def test_root_form_survives_underflow():
    m = ngram.fit([], 1, vocab_size=1000)
    seq = bounded(*([3] * 200))  # 1000^-201 underflows a double
    assert ngram.perplexity_root(m, seq) == pytest.approx(1000.0, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(corpus_st, sentence, st.sampled_from([1, 2, 3]))
def test_adding_sentence_never_raises_its_perplexity(corpus, s, n):
    before = oracle_prob(corpus, s, n, 0, V)[0]
    after = oracle_prob(corpus + [s], s, n, 0, V)[0]
    assert after >= before
    m_before, m_after = ngram.fit(corpus, n, 0, V), ngram.fit(corpus + [s], n, 0, V)
    assert ngram.perplexity_xent(m_after, s) <= ngram.perplexity_xent(m_before, s) * (1 + 1e-12)


def test_dump_load_roundtrip(tmp_path):
    m = ngram.fit([bounded(3, 4), bounded(3, 5), bounded(5)], 3, 0.5, V)
    text = m.dump(tmp_path / "m.txt")
    lines = text.splitlines()
    assert lines[0] == "# order=3 vocab_size=6 k=0.5"
    assert lines[1:] == sorted(lines[1:], key=lambda ln: tuple(map(int, ln.split("\t")[0].split())))
    back = ngram.NGramModel.load(tmp_path / "m.txt")
    assert back.joint_counts == m.joint_counts and back.context_counts == m.context_counts
    assert (back.order, back.vocab_size, back.k) == (3, 6, 0.5)


def test_unbounded_sequence_rejected():
    with pytest.raises(ValueError):
        ngram.fit([TokenSequence((3, 4))], 2)
