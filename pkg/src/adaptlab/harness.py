"""Perplexity evaluation across model variants and datasets.

Corpus-level cross-entropy is micro-averaged: total bits over total
predicted events, so long sequences weigh more than short ones. Every row
carries ``perplexity == 2 ** mean_h_bits``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dataset as ds
from . import model as tlm
from . import ngram
from .lora import LoraAdapter, merge
from .metrics import perplexity_from_xent
from .quant import quantize
from .tokenizer import TokenSequence, Vocabulary, encode

FIELDS = ("variant", "dataset", "token_count", "mean_h_bits", "perplexity", "config_digest", "timestamp", "error")
SIG_DIGITS = 9
EVAL_CHUNK = 64


class VocabularyMismatch(ValueError):
    pass


@dataclass
class Variant:
    """A scorable model: neural (optionally with a runtime adapter) or n-gram."""

    name: str
    model: tlm.WeightSource | None = None
    adapter: LoraAdapter | None = None
    ngram: ngram.NGramModel | None = None

    def __post_init__(self) -> None:
        if (self.model is None) == (self.ngram is None):
            raise ValueError("a variant wraps exactly one of a neural model or an n-gram model")

    @property
    def vocab_size(self) -> int:
        return self.ngram.vocab_size if self.ngram is not None else self.model.config.vocab_size

    @property
    def config_digest(self) -> str:
        h = hashlib.sha256(self.name.encode())
        if self.ngram is not None:
            h.update(self.ngram.dump().encode())
        else:
            digest = getattr(self.model, "base_digest", None)
            if digest is None:  # layered handle: digest of its file contents
                digest = hashlib.sha256(Path(self.model.path).read_bytes()).hexdigest()
            h.update(digest.encode())
            if self.adapter is not None:
                h.update(self.adapter.digest().encode())
        return h.hexdigest()[:16]


@dataclass
class EvalDataset:
    label: str
    sequences: list[TokenSequence]
    vocab_size: int | None = None


@dataclass
class EvalRow:
    variant: str
    dataset: str
    token_count: int
    mean_h_bits: float
    perplexity: float
    config_digest: str
    timestamp: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {f: _json_value(getattr(self, f)) for f in FIELDS}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRow":
        kw = {f: obj.get(f) for f in FIELDS}
        for f in ("mean_h_bits", "perplexity"):
            kw[f] = float(kw[f]) if kw[f] is not None else math.nan
        kw["token_count"] = int(kw["token_count"])
        return cls(**kw)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def get(self, variant: str, dataset: str) -> EvalRow:
        for r in self.rows:
            if r.variant == variant and r.dataset == dataset:
                return r
        raise KeyError((variant, dataset))

    def table(self) -> str:
        lines = [f"{'variant':<16} {'dataset':<16} {'K':>7} {'H bits':>9} {'ppl':>12}"]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.variant:<16} {r.dataset:<16} error: {r.error}")
            else:
                lines.append(f"{r.variant:<16} {r.dataset:<16} {r.token_count:>7} {r.mean_h_bits:>9.4f} {r.perplexity:>12.4f}")
        return "\n".join(lines)


def _round(x: float) -> float:
    return float(f"{x:.{SIG_DIGITS}g}")


def _json_value(v):
    if isinstance(v, float):
        return _round(v) if math.isfinite(v) else str(v)
    return v


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def eval_ppl(variant: Variant, data: EvalDataset, timestamp: bool = True) -> EvalRow:
    if not data.sequences:
        raise ValueError(f"dataset {data.label!r} is empty")
    V = variant.vocab_size
    if data.vocab_size is not None and data.vocab_size != V:
        raise VocabularyMismatch(f"dataset vocabulary size {data.vocab_size} != variant vocabulary size {V}")
    if max(max(s.ids) for s in data.sequences) >= V:
        raise VocabularyMismatch(f"dataset {data.label!r} has ids outside the variant's vocabulary ({V})")

    if variant.ngram is not None:
        bits, events = [], 0
        for s in data.sequences:
            lp = ngram.sequence_log_prob(variant.ngram, s)
            bits.append(-lp.bits)
            events += lp.events
        total = math.inf if any(math.isinf(b) for b in bits) else math.fsum(bits)
    else:
        chunks = []
        seqs = data.sequences
        for i in range(0, len(seqs), EVAL_CHUNK):
            chunks.append(tlm.neural_nll(variant.model, seqs[i : i + EVAL_CHUNK], variant.adapter).bits)
        allbits = np.concatenate(chunks)
        total, events = math.fsum(allbits), len(allbits)
    h = total / events
    return EvalRow(
        variant.name,
        data.label,
        events,
        h,
        perplexity_from_xent(h),
        variant.config_digest,
        _now() if timestamp else None,
    )


def compare(variants: Sequence[Variant], datasets: Sequence[EvalDataset], timestamp: bool = True) -> EvalReport:
    """Every variant on every dataset, in (variant, dataset) order.

    A failing cell becomes a row with ``error`` set; the run continues.
    """
    if not variants or not datasets:
        raise ValueError("need at least one variant and one dataset")
    report = EvalReport()
    for v in variants:
        for d in datasets:
            try:
                report.rows.append(eval_ppl(v, d, timestamp))
            except Exception as e:  # noqa: BLE001 - recorded per cell
                report.rows.append(
                    EvalRow(v.name, d.label, 0, math.nan, math.nan, v.config_digest,
                            _now() if timestamp else None, f"{type(e).__name__}: {e}")
                )
    return report


def emit(report: EvalReport, fmt: str = "json", path: str | Path | None = None) -> str:
    """Serialize with a fixed column order; floats keep 9 significant digits."""
    if fmt == "json":
        text = json.dumps([r.to_json() for r in report.rows], indent=2, ensure_ascii=False) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(FIELDS)
        for r in report.rows:
            row = r.to_json()
            w.writerow(["" if row[f] is None else row[f] for f in FIELDS])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


def parse_report(text: str, fmt: str = "json") -> EvalReport:
    if fmt == "json":
        return EvalReport([EvalRow.from_json(o) for o in json.loads(text)])
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(EvalRow.from_json({k: (v if v != "" else None) for k, v in rec.items()}))
    return EvalReport(rows)


# ---------------------------------------------------------------------------
# building variants and datasets
# ---------------------------------------------------------------------------


def quantize_model(model: tlm.TinyModel, scheme: str) -> tlm.TinyModel:
    """Quantize every matrix; norm gains stay float32."""
    return model.with_tensors(
        {n: quantize(np.asarray(t), scheme) for n, t in model.tensors.items() if not hasattr(t, "scheme") and t.ndim == 2}
    )


def model_variants(
    base: tlm.TinyModel,
    adapter: LoraAdapter | None = None,
    quant_schemes: Iterable[str] = (),
) -> list[Variant]:
    out = [Variant("base", base)]
    if adapter is not None:
        merged = merge(base, adapter)
        out.append(Variant("adapter-runtime", base, adapter))
        out.append(Variant("merged", merged))
        for scheme in quant_schemes:
            out.append(Variant(f"merged-{scheme}", quantize_model(merged, scheme)))
    else:
        for scheme in quant_schemes:
            out.append(Variant(f"base-{scheme}", quantize_model(base, scheme)))
    return out


def ngram_variant(train: Sequence[TokenSequence], order: int, k: float, vocab_size: int) -> Variant:
    return Variant(f"ngram-{order}", ngram=ngram.fit(train, order, k, vocab_size))


def texts_to_dataset(label: str, texts: Iterable[str], vocab: Vocabulary) -> EvalDataset:
    return EvalDataset(label, [encode(t, vocab) for t in texts], vocab.size)


def record_datasets(
    records: Sequence[ds.InstructionRecord], vocab: Vocabulary, template: str = ds.ZEPHYR, label: str = "held-out"
) -> list[EvalDataset]:
    """The held-out split and its code-only subset."""
    out = [texts_to_dataset(label, [ds.format_chat(r, template) for r in records], vocab)]
    code = ds.filter_code(records)
    if code:
        out.append(texts_to_dataset(label + "-code", [ds.format_chat(r, template) for r in code], vocab))
    return out


def read_texts(path: str | Path, template: str = ds.ZEPHYR) -> list[str]:
    """Training/eval texts from a file: JSONL records are templated, anything else is one text per line."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return [ds.format_chat(r, template) for r in ds.ingest(path).records]
    return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
