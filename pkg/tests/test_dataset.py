import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptlab import dataset as ds
from adaptlab.dataset import InstructionRecord as R


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_ingest_strict_and_lenient(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [
        json.dumps({"instruction": "a", "response": "b", "extra": 1}),
        json.dumps({"instruction": "c"}),
        json.dumps({"instruction": "e", "response": "f", "system": "s", "lang": "ru"}),
    ])
    with pytest.raises(ds.RecordError) as info:
        ds.ingest(p)
    assert info.value.line == 2 and "line 2" in str(info.value)
    res = ds.ingest(p, strict=False)
    assert len(res.records) == 2 and res.skipped == 1
    assert res.records[1] == R("e", "f", "s", "ru")


def test_ingest_three_valid_lines(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [json.dumps({"instruction": f"q{i}", "response": "r"}) for i in range(3)])
    assert len(ds.ingest(p).records) == 3


def test_ingest_bad_json_and_types(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", ["{not json", json.dumps({"instruction": 3, "response": "r"}), "[]"])
    assert ds.ingest(p, strict=False).skipped == 3
    with pytest.raises(ds.RecordError, match="line 1"):
        ds.ingest(p)


def test_write_and_reingest(tmp_path):
    recs = [R("привет", "мир"), R("a", "b", system="sys", lang="en", source="x")]
    ds.write_jsonl(recs, tmp_path / "o.jsonl")
    assert ds.ingest(tmp_path / "o.jsonl").records == recs


def test_record_requires_text():
    with pytest.raises(ds.RecordError):
        R("", "x")
    with pytest.raises(ds.RecordError):
        R("x", "   ")


def test_normalize_examples():
    assert ds.normalize_text("  a  b ") == "a b"
    fenced = "look:\n```python\ndef f(x):\n    return  x\n\n\n```\n  done   now"
    out = ds.normalize_text(fenced)
    assert "```python\ndef f(x):\n    return  x\n\n\n```" in out
    assert out.endswith("done now")
    # decomposed characters become NFC
    assert ds.normalize_text("ё") == "ё"


def test_normalize_keeps_line_breaks():
    assert ds.normalize_text("a \n\n  b\t c") == "a\nb c"


def pieces(alphabet, min_size=0, max_size=30):
    return st.lists(st.sampled_from(alphabet), min_size=min_size, max_size=max_size).map("".join)


text_st = pieces(list("ab `\n\t приве") + ["```"])


@settings(max_examples=300, deadline=None)
@given(text_st)
def test_normalize_idempotent(t):
    once = ds.normalize_text(t)
    assert ds.normalize_text(once) == once


def fixture_records(n=1000, dup_fraction=0.3, seed=0):
    """Unique records with exact duplicates (and whitespace variants) injected."""
    import random

    rnd = random.Random(seed)
    n_dup = int(n * dup_fraction)
    uniques = [R(f"задача {i}", f"ответ {i * 7 % 13} номер {i}") for i in range(n - n_dup)]
    out = list(uniques)
    for j in range(n_dup):
        src = uniques[rnd.randrange(len(uniques))]
        dup = src if j % 2 else R("  " + src.instruction.replace(" ", "   ") + " ", src.response + "\n")
        out.insert(rnd.randrange(len(out) + 1), dup)
    return out, n - n_dup


def test_dedup_fixture():
    records, n_unique = fixture_records()
    kept, stats = ds.dedup(records)
    assert stats.input == 1000 and stats.kept == n_unique == 700 and stats.removed == 300
    assert stats.kept + stats.removed == stats.input
    assert stats.removal_rate == pytest.approx(0.3)
    # first occurrences, in input order
    seen, expected = set(), []
    for r in records:
        if ds.dedup_key(r) not in seen:
            seen.add(ds.dedup_key(r))
            expected.append(r)
    assert kept == expected
    again, stats2 = ds.dedup(kept)
    assert again == kept and stats2.removed == 0


def test_dedup_hand_fixture():
    a, b, c = R("a", "1"), R("b", "2"), R("c", "3")
    kept, stats = ds.dedup([a, b, a, c, b])
    assert kept == [a, b, c] and stats.to_json() == {"input": 5, "kept": 3, "removed": 2, "removal_rate": 0.4}


def test_dedup_key_separator_prevents_collisions():
    assert ds.dedup_key(R("ab", "c")) != ds.dedup_key(R("a", "bc"))


def test_zephyr_golden_bytes():
    r = R("напиши функцию", "```python\ndef f():\n    return 1\n```", system="Ты помощник")
    expected = (
        "<|system|>\nТы помощник</s>\n"
        "<|user|>\nнапиши функцию</s>\n"
        "<|assistant|>\n```python\ndef f():\n    return 1\n```</s>"
    ).encode("utf-8")
    assert ds.format_chat(r).encode("utf-8") == expected
    no_system = ds.format_chat(R("hi", "ok"))
    assert no_system.encode() == b"<|system|>\n</s>\n<|user|>\nhi</s>\n<|assistant|>\nok</s>"


def test_alt_template():
    out = ds.format_chat(R("hi", "ok", system="ignored"), ds.ALT)
    assert out == "### Instruction:\nhi\n### Response:\nok"
    assert "<|" not in out


field_st = pieces(list("ab #:<>|/s\n`") + ["</s>", "<|user|>", "<|assistant|>", "###"], 1).filter(lambda s: s.strip())


@settings(max_examples=300, deadline=None)
@given(field_st, field_st, st.one_of(st.none(), field_st))
def test_chat_roundtrip(instr, resp, system):
    zr = R(instr, resp, system)
    z = ds.format_chat(zr, ds.ZEPHYR)
    markers_ok = "</s>\n<|user|>\n" not in (system or "") and "</s>\n<|assistant|>\n" not in resp
    if markers_ok and "</s>\n<|user|>\n" not in instr and "</s>\n<|assistant|>\n" not in instr:
        assert ds.parse_chat(z, ds.ZEPHYR) == zr
    ar = R(instr, resp)
    if "\n### Response:\n" not in resp:
        assert ds.parse_chat(ds.format_chat(ar, ds.ALT), ds.ALT) == ar


def test_chat_roundtrip_generated_records():
    from adaptlab.corpora import code_instructions

    for r in code_instructions(1000, seed=4):
        base = R(r.instruction, r.response, r.system)
        for template in ds.TEMPLATES:
            assert ds.parse_chat(ds.format_chat(base, template), template) == base


def test_parse_errors():
    with pytest.raises(ds.ParseError, match="system"):
        ds.parse_chat("hello", ds.ZEPHYR)
    with pytest.raises(ds.ParseError, match="assistant"):
        ds.parse_chat("<|system|>\n</s>\n<|user|>\nhi</s>\n", ds.ZEPHYR)
    with pytest.raises(ds.ParseError):
        ds.parse_chat("<|system|>\n</s>\n<|user|>\n  </s>\n<|assistant|>\nok</s>", ds.ZEPHYR)
    with pytest.raises(ds.ParseError, match="Response"):
        ds.parse_chat("### Instruction:\nhi", ds.ALT)
    with pytest.raises(ValueError):
        ds.format_chat(R("a", "b"), "chatml")


def test_split_properties():
    recs = [R(f"q{i}", "r") for i in range(10)]
    train, test = ds.split(recs, 0.2, seed=1)
    assert len(train) == 8 and len(test) == 2
    assert sorted(train + test, key=lambda r: r.instruction) == sorted(recs, key=lambda r: r.instruction)
    assert not set(train) & set(test)
    assert ds.split(recs, 0.2, seed=1) == (train, test)
    assert ds.split(recs, 0.2, seed=2) != (train, test)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.floats(0.01, 0.99), st.integers(0, 2**32))
def test_split_sizes(n, f, seed):
    recs = [R(f"q{i}", "r") for i in range(n)]
    train, test = ds.split(recs, f, seed)
    assert len(train) + len(test) == n and train and test
    assert abs(len(test) - n * f) <= 1 or len(test) in (1, n - 1)


def test_split_errors():
    with pytest.raises(ValueError):
        ds.split([R("a", "b")], 0.5)
    with pytest.raises(ValueError):
        ds.split([R("a", "b")] * 3, 1.0)


def test_filter_code():
    fenced = R("q", "here:\n```\nprint(1)\n```")
    prose = R("q", "Функция возвращает сумму элементов списка.")
    assignments = R("q", "x = 1\ny = 2\nz = x + y\nw = z * 2\nv = w - 1\nthat is all")
    assert ds.code_score(assignments.response) == pytest.approx(5 / 6)
    assert ds.filter_code([fenced, prose, assignments]) == [fenced, assignments]
    assert ds.code_score("") == 0.0
