"""Canned desk-scale base-vs-adapter perplexity experiment.

A base model is pre-trained on prose (corpus A), then a low-rank adapter is
trained on a code-instruction set (corpus B) with the base frozen. All model
variants are scored on the held-out part of B, its code-only subset, and
held-out prose standing in for an unrelated corpus.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import corpora, lora, train
from . import dataset as ds
from . import harness
from . import model as tlm
from .tokenizer import Vocabulary, build_vocab, encode


@dataclass(frozen=True)
class DeskConfig:
    vocab_size: int = 256
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq: int = 96
    seed: int = 0
    n_prose: int = 2000
    n_code: int = 300
    test_fraction: float = 0.2
    template: str = ds.ZEPHYR
    base_steps: int = 500
    adapter_steps: int = 500
    lr: float = 1e-2
    batch_size: int = 16
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] | None = None  # None = q/v of every layer
    quant_schemes: tuple[str, ...] = ("q6s", "q4s")
    ngram_order: int = 2
    ngram_k: float = 0.1


@dataclass
class DeskResult:
    config: DeskConfig
    vocab: Vocabulary
    base: tlm.TinyModel
    adapter: lora.LoraAdapter
    train_report: lora.TrainReport
    base_losses: list[float]
    report: harness.EvalReport
    dedup_stats: ds.DedupStats
    data: dict = field(default_factory=dict)
    seconds: float = 0.0


def build_data(cfg: DeskConfig) -> dict:
    prose = corpora.prose_corpus(cfg.n_prose, seed=cfg.seed * 7 + 1)
    n_test = round(len(prose) * cfg.test_fraction)
    records, stats = ds.dedup([ds.normalize(r) for r in corpora.code_instructions(cfg.n_code, seed=cfg.seed * 7 + 2)])
    code_train, code_test = ds.split(records, cfg.test_fraction, seed=cfg.seed * 7 + 3)
    return {
        "prose_train": prose[n_test:],
        "prose_test": prose[:n_test],
        "code_train": code_train,
        "code_test": code_test,
        "dedup": stats,
    }


def run(cfg: DeskConfig = DeskConfig(), log_every: int = 0, timestamp: bool = True) -> DeskResult:
    t0 = time.perf_counter()
    data = build_data(cfg)
    code_train_texts = [ds.format_chat(r, cfg.template) for r in data["code_train"]]
    vocab = build_vocab(data["prose_train"] + code_train_texts, cfg.vocab_size)
    mcfg = tlm.ModelConfig(vocab.size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq, cfg.seed)

    prose_seqs = [encode(t, vocab) for t in data["prose_train"]]
    code_seqs = [encode(t, vocab) for t in code_train_texts]

    pre = train.pretrain(tlm.init(mcfg), prose_seqs, cfg.base_steps, cfg.lr,
                         batch_size=cfg.batch_size, seed=cfg.seed, log_every=log_every)
    adapter = lora.init_adapter(pre.model, cfg.targets, cfg.rank, cfg.alpha, seed=cfg.seed)
    tr = lora.train_adapter(pre.model, adapter, code_seqs, cfg.adapter_steps, cfg.lr,
                            batch_size=cfg.batch_size, seed=cfg.seed + 1, log_every=log_every)

    variants = harness.model_variants(pre.model, tr.adapter, cfg.quant_schemes)
    variants.append(harness.ngram_variant(prose_seqs + code_seqs, cfg.ngram_order, cfg.ngram_k, vocab.size))
    datasets = harness.record_datasets(data["code_test"], vocab, cfg.template)
    datasets.append(harness.texts_to_dataset("unrelated", data["prose_test"], vocab))
    report = harness.compare(variants, datasets, timestamp=timestamp)
    return DeskResult(cfg, vocab, pre.model, tr.adapter, tr, pre.losses, report, data["dedup"], data,
                      time.perf_counter() - t0)
