"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import harness, lora, metrics, ngram, quant, store, train
from . import model as tlm
from .tokenizer import TokenSequence, Vocabulary, build_vocab, decode, encode, split_words

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class NumericalFailure(ArithmeticError):
    pass


def _out(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(",", " ").split()]


def _read_lines(path: str) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def _sequences(path: str, vocab: Vocabulary, template: str) -> list[TokenSequence]:
    return [encode(t, vocab) for t in harness.read_texts(path, template)]


def _load_model(path: str) -> tlm.TinyModel:
    obj, _ = store.unpack(path)
    if not isinstance(obj, tlm.TinyModel):
        raise ValueError(f"{path} is an adapter file, expected a model")
    return obj


def _load_adapter(path: str | None) -> lora.LoraAdapter | None:
    if path is None:
        return None
    obj, _ = store.unpack(path)
    if not isinstance(obj, lora.LoraAdapter):
        raise ValueError(f"{path} is a model file, expected an adapter")
    return obj


def _report(args, report: harness.EvalReport) -> None:
    _out(harness.emit(report, args.format), getattr(args, "out", None))


# --- tokenizer -------------------------------------------------------------


def cmd_tokenize(args) -> int:
    if args.action == "vocab":
        texts = [t for p in args.inputs for t in _read_lines(p)]
        vocab = build_vocab(texts, args.max_size)
        if args.out:
            vocab.save(args.out)
        else:
            sys.stdout.write("".join(t + "\n" for t in vocab.id_to_token))
        return EXIT_OK
    vocab = Vocabulary.load(args.vocab)
    lines = []
    for text in _read_lines(args.inputs[0]):
        if args.action == "encode":
            lines.append(json.dumps(list(encode(text, vocab, not args.no_boundaries).ids)))
        else:
            lines.append(decode(json.loads(text), vocab))
    _out("\n".join(lines), args.out)
    return EXIT_OK


# --- n-gram ----------------------------------------------------------------


def cmd_ngram(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    seqs = [encode(t, vocab) for t in harness.read_texts(args.data, args.template)]
    if args.action == "fit":
        model = ngram.fit(seqs, args.order, args.k, vocab.size)
        _out(model.dump(), args.out)
        return EXIT_OK
    model = ngram.NGramModel.load(args.model)
    variant = harness.Variant(f"ngram-{model.order}", ngram=model)
    row = harness.eval_ppl(variant, harness.EvalDataset(args.label, seqs, vocab.size), not args.no_timestamp)
    _report(args, harness.EvalReport([row]))
    return EXIT_OK


# --- metrics ---------------------------------------------------------------


def cmd_metrics(args) -> int:
    if args.action in ("xent", "kl"):
        p, q = _floats(args.p), _floats(args.q)
        value = metrics.cross_entropy(p, q) if args.action == "xent" else metrics.kl_divergence(p, q)
        _out(json.dumps({"bits": value if np.isfinite(value) else str(value),
                         "perplexity": metrics.perplexity_from_xent(value) if args.action == "xent" else None}), None)
        return EXIT_OK
    texts = _read_lines(args.data)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        seqs = [encode(t, vocab, add_boundaries=False) for t in texts]
    else:
        ids: dict[str, int] = {}
        seqs = [TokenSequence(tuple(ids.setdefault(w, len(ids)) for w in split_words(t))) for t in texts]
    series = metrics.entropy_rate_estimate(seqs, args.n_max)
    _out(json.dumps({"F": list(series.values), "token_count": series.token_count, "estimate": series.estimate}), None)
    return EXIT_OK


# --- models ----------------------------------------------------------------


def cmd_init(args) -> int:
    size = Vocabulary.load(args.vocab).size if args.vocab else args.vocab_size
    if size is None:
        raise ValueError("pass --vocab or --vocab-size")
    cfg = tlm.ModelConfig(size, args.d_model, args.n_layers, args.n_heads, args.d_ff, args.max_seq, args.seed)
    crc = store.pack(tlm.init(cfg), args.out)
    print(f"wrote {args.out} crc32={crc:08x}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    base = _load_model(args.base)
    vocab = Vocabulary.load(args.vocab)
    seqs = _sequences(args.data, vocab, args.template)
    rep = train.pretrain(base, seqs, args.steps, args.lr, args.optimizer, args.batch_size, args.seed, args.log_every)
    crc = store.pack(rep.model, args.out)
    print(f"loss {rep.losses[0]:.4f} -> {rep.losses[-1]:.4f}; wrote {args.out} crc32={crc:08x}")
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    base = _load_model(args.base)
    vocab = Vocabulary.load(args.vocab)
    seqs = _sequences(args.data, vocab, args.template)
    targets = args.targets.split(",") if args.targets else None
    adapter = lora.init_adapter(base, targets, args.rank, args.alpha, args.seed)
    rep = lora.train_adapter(base, adapter, seqs, args.steps, args.lr, args.optimizer, args.batch_size,
                             args.seed, args.log_every)
    store.pack(rep.adapter, args.out, {"base_digest": base.base_digest})
    print(json.dumps({
        "initial_loss": rep.losses[0],
        "final_loss": rep.losses[-1],
        "digest_before": rep.digest_before,
        "digest_after": rep.digest_after,
        "base_unchanged": rep.base_unchanged,
        "adapter_params": rep.adapter.n_params,
        "out": args.out,
    }, indent=2))
    return EXIT_OK


def cmd_merge(args) -> int:
    base = _load_model(args.base)
    merged = lora.merge(base, _load_adapter(args.adapter))
    if args.quant:
        merged = harness.quantize_model(merged, args.quant)
    crc = store.pack(merged, args.out, kind="merged")
    print(f"wrote {args.out} crc32={crc:08x} digest={merged.base_digest[:16]}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    obj, meta = store.unpack(args.model)
    if not isinstance(obj, tlm.TinyModel):
        raise ValueError("quantize expects a model file")
    q = harness.quantize_model(obj, args.scheme)
    crc = store.pack(q, args.out, kind=meta.get("kind", "base"), metadata={"quant": args.scheme})
    for name, t in obj.tensors.items():
        if getattr(t, "ndim", 0) == 2:
            err = quant.quant_error(t, args.scheme)
            print(f"{name:<24} max_abs={err.max_abs:.3e} rmse={err.rmse:.3e}")
    print(f"wrote {args.out} crc32={crc:08x}")
    return EXIT_OK


# --- packed files ----------------------------------------------------------


def cmd_pack(args) -> int:
    with np.load(args.tensors) as npz:
        tensors = {k: npz[k].astype(np.float32) for k in npz.files}
    if args.quant:
        tensors = {k: quant.quantize(v, args.quant) if v.ndim == 2 else v for k, v in tensors.items()}
    meta = {"kind": args.kind}
    for item in args.meta:
        key, _, value = item.partition("=")
        meta[key] = int(value) if value.isdigit() else value
    _, crc = store.pack_tensors(tensors, meta, args.out)
    print(f"wrote {args.out} crc32={crc:08x}")
    return EXIT_OK


def cmd_unpack(args) -> int:
    tensors, meta = store.read_tensors(args.file)
    if args.out:
        arrays = {k: (quant.dequantize(v).astype(np.float32) if isinstance(v, quant.QuantTensor) else v)
                  for k, v in tensors.items()}
        np.savez(args.out, **arrays)
    print(f"ok: {len(tensors)} tensors, kind={meta.get('kind')}" + (" (verified)" if args.verify else ""))
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(store.inspect(args.file))
    return EXIT_OK


# --- dataset pipeline ------------------------------------------------------


def cmd_dedup(args) -> int:
    res = ds.ingest(args.inputs, strict=args.strict)
    kept, stats = ds.dedup([ds.normalize(r) for r in res.records])
    ds.write_jsonl(kept, args.out)
    sidecar = {**stats.to_json(), "skipped": res.skipped}
    Path(args.stats or args.out + ".stats.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(sidecar))
    return EXIT_OK


def cmd_format(args) -> int:
    records = ds.ingest(args.inputs).records
    texts = [json.dumps({"text": ds.format_chat(r, args.template)}, ensure_ascii=False) for r in records]
    _out("\n".join(texts), args.out)
    return EXIT_OK


def cmd_split(args) -> int:
    records = ds.ingest(args.inputs).records
    tr, te = ds.split(records, args.test_fraction, args.seed)
    ds.write_jsonl(tr, args.out_train)
    ds.write_jsonl(te, args.out_test)
    print(json.dumps({"train": len(tr), "test": len(te)}))
    return EXIT_OK


# --- evaluation ------------------------------------------------------------


def cmd_ppl(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    if args.n_offload_layers is not None:
        src = store.load_layered(args.model, args.n_offload_layers)
    else:
        src = _load_model(args.model)
    adapter = _load_adapter(args.adapter)
    name = "adapter-runtime" if adapter is not None else "base"
    data = harness.EvalDataset(args.label, _sequences(args.data, vocab, args.template), vocab.size)
    _report(args, harness.EvalReport([harness.eval_ppl(harness.Variant(name, src, adapter), data, not args.no_timestamp)]))
    return EXIT_OK


def cmd_compare(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    base = _load_model(args.base)
    variants = harness.model_variants(base, _load_adapter(args.adapter), args.quant)
    if args.ngram_train:
        seqs = [s for p in args.ngram_train for s in _sequences(p, vocab, args.template)]
        variants.append(harness.ngram_variant(seqs, args.ngram_order, args.ngram_k, vocab.size))
    datasets = []
    if args.held_out:
        datasets += harness.record_datasets(ds.ingest(args.held_out).records, vocab, args.template)
    for p in args.unrelated:
        datasets.append(harness.texts_to_dataset(Path(p).stem, harness.read_texts(p, args.template), vocab))
    for item in args.dataset:
        label, _, p = item.partition("=")
        datasets.append(harness.texts_to_dataset(label, harness.read_texts(p, args.template), vocab))
    report = harness.compare(variants, datasets, timestamp=not args.no_timestamp)
    _report(args, report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    base = _load_model(args.base)
    vocab = Vocabulary.load(args.vocab)
    seqs = _sequences(args.data, vocab, args.template)[: args.max_sequences]
    adapter = _load_adapter(args.adapter) or lora.init_adapter(base, None, args.rank, args.alpha, args.seed)
    res = lora.grad_check(base, adapter, seqs, args.n_coords, args.tol, seed=args.seed)
    print(json.dumps({"passed": res.passed, "worst_rel_error": res.worst_rel_error, "coords": len(res.checked)}))
    if not res.passed:
        raise NumericalFailure(f"gradient check failed: worst relative error {res.worst_rel_error:.3e}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from . import experiment

    cfg = experiment.DeskConfig(seed=args.seed)
    if args.quick:
        cfg = experiment.DeskConfig(seed=args.seed, n_prose=400, n_code=120, base_steps=60, adapter_steps=60)
    res = experiment.run(cfg, log_every=args.log_every, timestamp=not args.no_timestamp)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.vocab.save(out / "vocab.txt")
    (out / "prose_train.txt").write_text("\n".join(res.data["prose_train"]) + "\n", encoding="utf-8")
    (out / "prose_test.txt").write_text("\n".join(res.data["prose_test"]) + "\n", encoding="utf-8")
    ds.write_jsonl(res.data["code_train"], out / "code_train.jsonl")
    ds.write_jsonl(res.data["code_test"], out / "code_test.jsonl")
    store.pack(res.base, out / "base.tlmf")
    store.pack(res.adapter, out / "adapter.tlmf", {"base_digest": res.base.base_digest})
    store.pack(lora.merge(res.base, res.adapter), out / "merged.tlmf", kind="merged")
    harness.emit(res.report, args.format, out / f"report.{args.format}")
    print(res.report.table())
    print(f"\nartifacts in {out}  ({res.seconds:.1f}s)")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def globals_(p: argparse.ArgumentParser, default) -> None:
        p.add_argument("--seed", type=int, default=default(0), help="random seed (default 0)")
        p.add_argument("--no-timestamp", action="store_true", default=default(False),
                       help="omit timestamps from reports (byte-stable output)")
        p.add_argument("--format", choices=("json", "csv"), default=default("json"), help="report format")

    parser = argparse.ArgumentParser(prog="adaptlab", description=__doc__.splitlines()[0])
    globals_(parser, lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    globals_(common, lambda v: argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    def training(p):
        p.add_argument("--base", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--data", required=True, help="JSONL records (templated) or one text per line")
        p.add_argument("--template", choices=ds.TEMPLATES, default=ds.ZEPHYR)
        p.add_argument("--steps", type=int, default=500)
        p.add_argument("--lr", type=float, default=1e-2)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--log-every", type=int, default=0)
        p.add_argument("--out", required=True)

    p = add("tokenize", cmd_tokenize, "build a vocabulary, encode or decode")
    p.add_argument("action", choices=("vocab", "encode", "decode"))
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--vocab")
    p.add_argument("--max-size", type=int, default=256)
    p.add_argument("--no-boundaries", action="store_true")
    p.add_argument("--out")

    p = add("ngram", cmd_ngram, "fit an n-gram model or score perplexity")
    p.add_argument("action", choices=("fit", "ppl"))
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--template", choices=ds.TEMPLATES, default=ds.ZEPHYR)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--k", type=float, default=0.0)
    p.add_argument("--model")
    p.add_argument("--label", default="data")
    p.add_argument("--out")

    p = add("metrics", cmd_metrics, "cross-entropy, KL divergence, block entropy")
    p.add_argument("action", choices=("xent", "kl", "fn"))
    p.add_argument("--p")
    p.add_argument("--q")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--n-max", type=int, default=3)

    p = add("init", cmd_init, "initialize a base model file")
    p.add_argument("--vocab")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq", type=int, default=96)
    p.add_argument("--out", required=True)

    training(add("pretrain", cmd_pretrain, "full-parameter training of a base model"))

    p = add("train-adapter", cmd_train_adapter, "train a low-rank adapter on a frozen base")
    training(p)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=8.0)
    p.add_argument("--targets", help="comma-separated target tensors (default: attention q and v)")

    p = add("merge", cmd_merge, "fold an adapter into its base model")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--quant", choices=tuple(quant.QMAX))
    p.add_argument("--out", required=True)

    p = add("quantize", cmd_quantize, "block-quantize a model file")
    p.add_argument("--model", "--in", dest="model", required=True)
    p.add_argument("--scheme", choices=tuple(quant.QMAX), required=True)
    p.add_argument("--out", required=True)

    p = add("pack", cmd_pack, "pack an .npz of tensors into a TLMF file")
    p.add_argument("--tensors", "--in", dest="tensors", required=True)
    p.add_argument("--kind", choices=store.KINDS, default="base")
    p.add_argument("--meta", nargs="*", default=[], metavar="KEY=VALUE")
    p.add_argument("--quant", choices=tuple(quant.QMAX))
    p.add_argument("--out", required=True)

    p = add("unpack", cmd_unpack, "validate a TLMF file and optionally export tensors")
    p.add_argument("file")
    p.add_argument("--verify", action="store_true", help="full validation (always performed)")
    p.add_argument("--out", help="write tensors to this .npz")

    p = add("inspect", cmd_inspect, "print metadata and tensor index")
    p.add_argument("file")

    p = add("dedup", cmd_dedup, "normalize and deduplicate JSONL records")
    p.add_argument("--in", dest="inputs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--stats", help="stats sidecar path (default: OUT.stats.json)")

    p = add("format", cmd_format, "render records with a chat template")
    p.add_argument("--in", dest="inputs", required=True)
    p.add_argument("--template", choices=ds.TEMPLATES, default=ds.ZEPHYR)
    p.add_argument("--out")

    p = add("split", cmd_split, "seeded train/test split")
    p.add_argument("--in", dest="inputs", required=True)
    p.add_argument("--test-fraction", type=float, required=True)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)

    p = add("ppl", cmd_ppl, "perplexity of one model on one dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter")
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--template", choices=ds.TEMPLATES, default=ds.ZEPHYR)
    p.add_argument("--label", default="data")
    p.add_argument("--n-offload-layers", type=int, help="load layered with this residency budget")
    p.add_argument("--out")

    p = add("compare", cmd_compare, "cross-product perplexity report")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter")
    p.add_argument("--vocab", required=True)
    p.add_argument("--held-out", help="held-out JSONL records (adds held-out and held-out-code)")
    p.add_argument("--unrelated", nargs="*", default=[], help="plain-text corpora, labelled by file stem")
    p.add_argument("--dataset", nargs="*", default=[], metavar="LABEL=PATH")
    p.add_argument("--template", choices=ds.TEMPLATES, default=ds.ZEPHYR)
    p.add_argument("--quant", nargs="*", default=[], choices=tuple(quant.QMAX))
    p.add_argument("--ngram-train", nargs="*", default=[])
    p.add_argument("--ngram-order", type=int, default=2)
    p.add_argument("--ngram-k", type=float, default=0.1)
    p.add_argument("--out")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of adapter gradients")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter")
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--template", choices=ds.TEMPLATES, default=ds.ZEPHYR)
    p.add_argument("--max-sequences", type=int, default=4)
    p.add_argument("--n-coords", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=8.0)

    p = add("experiment", cmd_experiment, "run the canned base-vs-adapter experiment")
    p.add_argument("--out-dir", default="desk_run")
    p.add_argument("--quick", action="store_true", help="tiny corpora and few steps (smoke run)")
    p.add_argument("--log-every", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (train.TrainingDiverged, NumericalFailure, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
