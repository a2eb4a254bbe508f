import json
import math

import numpy as np
import pytest
from conftest import SMALL, random_seqs

from adaptlab import harness, lora, ngram, train
from adaptlab import model as tlm
from adaptlab.harness import EvalDataset, EvalReport, EvalRow, Variant


@pytest.fixture(scope="module")
def setup():
    base = tlm.init(SMALL)
    ad = lora.init_adapter(base, seed=1)
    tr = lora.train_adapter(base, ad, random_seqs(30, 8, seed=5), 40, 2e-2)
    data = [EvalDataset("a", random_seqs(10, 8, seed=6), 8), EvalDataset("b", random_seqs(7, 8, seed=7), 8),
            EvalDataset("c", random_seqs(5, 8, seed=8), 8)]
    return base, tr.adapter, data


def test_row_identity_and_micro_average(setup):
    base, _, data = setup
    row = harness.eval_ppl(Variant("base", base), data[0], timestamp=False)
    bits = tlm.neural_nll(base, data[0].sequences).bits
    assert row.token_count == len(bits) == sum(len(s) - 1 for s in data[0].sequences)
    assert row.mean_h_bits == pytest.approx(math.fsum(bits) / len(bits), rel=1e-12)
    assert abs(row.perplexity - 2**row.mean_h_bits) <= 1e-9 * row.perplexity
    assert row.timestamp is None


def test_ngram_variant_matches_direct(setup):
    _, _, data = setup
    train_seqs = random_seqs(40, 8, seed=1)
    v = harness.ngram_variant(train_seqs, 2, 0.5, 8)
    row = harness.eval_ppl(v, data[0])
    m = ngram.fit(train_seqs, 2, 0.5, 8)
    lps = [ngram.sequence_log_prob(m, s) for s in data[0].sequences]
    h = -sum(lp.bits for lp in lps) / sum(lp.events for lp in lps)
    assert row.mean_h_bits == pytest.approx(h, rel=1e-12)
    single = harness.eval_ppl(v, EvalDataset("one", data[0].sequences[:1], 8))
    assert single.perplexity == pytest.approx(ngram.perplexity_xent(m, data[0].sequences[0]), rel=1e-9)
    assert row.timestamp is not None


def test_compare_cross_product(setup):
    base, ad, data = setup
    report = harness.compare([Variant("base", base), Variant("adapter-runtime", base, ad)], data, timestamp=False)
    assert [(r.variant, r.dataset) for r in report.rows] == [
        (v, d) for v in ("base", "adapter-runtime") for d in ("a", "b", "c")
    ]
    again = harness.compare([Variant("base", base), Variant("adapter-runtime", base, ad)], data, timestamp=False)
    assert harness.emit(report) == harness.emit(again)


def test_model_variants_two_path(setup):
    base, ad, data = setup
    variants = harness.model_variants(base, ad, ("q6s", "q4s"))
    assert [v.name for v in variants] == ["base", "adapter-runtime", "merged", "merged-q6s", "merged-q4s"]
    report = harness.compare(variants, data, timestamp=False)
    for d in ("a", "b", "c"):
        rt, mg = report.get("adapter-runtime", d), report.get("merged", d)
        assert abs(rt.perplexity - mg.perplexity) <= 1e-4 * rt.perplexity
    assert [v.name for v in harness.model_variants(base, None, ("q4s",))] == ["base", "base-q4s"]


def test_overfit_base_lower_on_training_data():
    cfg = tlm.ModelConfig(8, 16, 2, 2, 64, 16, seed=0)
    seen, unseen = random_seqs(4, 8, seed=1), random_seqs(20, 8, seed=2)
    m = train.pretrain(tlm.init(cfg), seen, 150, 0.05).model
    rows = harness.compare([Variant("base", m)], [EvalDataset("train", seen), EvalDataset("held", unseen)])
    assert rows.get("base", "train").perplexity < rows.get("base", "held").perplexity


def test_cell_errors_recorded(setup):
    base, _, data = setup
    bad = EvalDataset("big-vocab", [random_seqs(1, 8)[0]], 300)
    empty = EvalDataset("empty", [], 8)
    report = harness.compare([Variant("base", base)], [data[0], bad, empty], timestamp=False)
    assert report.rows[0].error is None
    assert "VocabularyMismatch" in report.rows[1].error
    assert "empty" in report.rows[2].error
    with pytest.raises(harness.VocabularyMismatch):
        harness.eval_ppl(Variant("base", base), bad)


def test_variant_requires_one_model(setup):
    base, _, _ = setup
    with pytest.raises(ValueError):
        Variant("x")
    with pytest.raises(ValueError):
        Variant("x", base, ngram=ngram.fit([], 2, vocab_size=8))


def test_emit_json_roundtrip(setup, tmp_path):
    base, ad, data = setup
    report = harness.compare(harness.model_variants(base, ad), data)
    text = harness.emit(report, "json", tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text(encoding="utf-8") == text
    objs = json.loads(text)
    assert list(objs[0]) == list(harness.FIELDS)
    back = harness.parse_report(text)
    assert len(back.rows) == len(report.rows)
    for a, b in zip(report.rows, back.rows):
        assert (a.variant, a.dataset, a.token_count, a.config_digest, a.timestamp) == (
            b.variant, b.dataset, b.token_count, b.config_digest, b.timestamp)
        assert b.mean_h_bits == pytest.approx(a.mean_h_bits, rel=1e-8)
        assert b.perplexity == pytest.approx(a.perplexity, rel=1e-8)
        # the identity survives the 9-digit rounding
        assert b.perplexity == pytest.approx(2**b.mean_h_bits, rel=1e-8)


def test_emit_csv(setup):
    base, _, data = setup
    report = harness.compare([Variant("base, quoted", base)], data[:1], timestamp=False)
    text = harness.emit(report, "csv")
    lines = text.split("\r\n")
    assert lines[0] == ",".join(harness.FIELDS)
    assert lines[1].startswith('"base, quoted",a,')
    back = harness.parse_report(text, "csv")
    assert back.rows[0].variant == "base, quoted" and back.rows[0].error is None


def test_emit_empty_and_nonfinite():
    assert harness.emit(EvalReport()) == "[]\n"
    assert harness.emit(EvalReport(), "csv").strip() == ",".join(harness.FIELDS)
    row = EvalRow("ngram-2", "d", 3, math.inf, math.inf, "x")
    back = harness.parse_report(harness.emit(EvalReport([row])))
    assert back.rows[0].perplexity == math.inf
    with pytest.raises(ValueError):
        harness.emit(EvalReport(), "xml")


def test_config_digest_distinguishes_variants(setup):
    base, ad, _ = setup
    digests = {v.config_digest for v in harness.model_variants(base, ad, ("q4s", "q6s"))}
    assert len(digests) == 5


def test_read_texts(tmp_path):
    (tmp_path / "t.txt").write_text("one line\n\nsecond\n", encoding="utf-8")
    assert harness.read_texts(tmp_path / "t.txt") == ["one line", "second"]
    (tmp_path / "r.jsonl").write_text(json.dumps({"instruction": "a", "response": "b"}) + "\n", encoding="utf-8")
    assert harness.read_texts(tmp_path / "r.jsonl", "alt") == ["### Instruction:\na\n### Response:\nb"]


def test_record_datasets_adds_code_subset():
    from adaptlab.dataset import InstructionRecord as R
    from adaptlab.tokenizer import build_vocab

    recs = [R("q", "```\nx = 1\n```"), R("q", "просто текст")]
    v = build_vocab(["x = 1 q просто текст"], 32)
    out = harness.record_datasets(recs, v)
    assert [d.label for d in out] == ["held-out", "held-out-code"]
    assert len(out[0].sequences) == 2 and len(out[1].sequences) == 1
