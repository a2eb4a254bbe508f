"""Low-rank adapters over a frozen TinyModel.

For a target projection ``W`` of shape ``[d, k]`` the adapter keeps
``A: [r, k]`` and ``B: [d, r]`` and contributes ``(alpha / r) * B @ A``.
``B`` starts at zero, so a fresh adapter leaves the model's function
unchanged. Training only ever touches ``A`` and ``B``; the base tensors and
their digest stay bit-identical.

Adapter tensors are float64. A quantized base (QLoRA style) is dequantized
on the fly by the model, the adapter path stays full precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as tlm
from . import train
from .quant import QuantTensor, dequantize, quantize
from .rng import SplitMix64, derive_seed
from .tokenizer import TokenSequence

LORA_INIT_STD = 0.02


@dataclass
class LoraEntry:
    A: np.ndarray  # [r, k]
    B: np.ndarray  # [d, r]


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    entries: dict[str, LoraEntry] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            self.rank, self.alpha, {n: LoraEntry(e.A.copy(), e.B.copy()) for n, e in self.entries.items()}
        )

    def params(self) -> dict[str, np.ndarray]:
        """Flat ``<target>.lora_A`` / ``<target>.lora_B`` view sharing memory."""
        out = {}
        for n, e in self.entries.items():
            out[n + ".lora_A"] = e.A
            out[n + ".lora_B"] = e.B
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.rank}|{self.alpha!r}|".encode())
        for name, p in sorted(self.params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def default_targets(cfg: tlm.ModelConfig) -> list[str]:
    return [f"layers.{i}.attn.{p}" for i in range(cfg.n_layers) for p in ("q", "v")]


def valid_targets(cfg: tlm.ModelConfig) -> list[str]:
    names = [f"layers.{i}.{p}" for i in range(cfg.n_layers) for p in tlm.PROJECTIONS]
    return names + ["head"]


def init_adapter(
    base: tlm.TinyModel | tlm.ModelConfig,
    targets: Iterable[str] | None = None,
    rank: int = 4,
    alpha: float = 8.0,
    seed: int = 0,
) -> LoraAdapter:
    cfg = base if isinstance(base, tlm.ModelConfig) else base.config
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    targets = default_targets(cfg) if targets is None else list(targets)
    valid = valid_targets(cfg)
    shapes = tlm.tensor_shapes(cfg)
    adapter = LoraAdapter(rank, float(alpha))
    for name in targets:
        if name not in valid:
            raise KeyError(f"unknown adapter target {name!r}; valid targets: {', '.join(valid)}")
        d, k = shapes[name]
        rng = SplitMix64(derive_seed(seed, "lora:" + name))
        adapter.entries[name] = LoraEntry(rng.normal((rank, k), LORA_INIT_STD), np.zeros((d, rank)))
    return adapter


def _check_entry(W_shape, entry: LoraEntry) -> None:
    d, k = W_shape
    r = entry.A.shape[0]
    if entry.A.shape != (r, k) or entry.B.shape != (d, r):
        raise ValueError(f"adapter shapes A{entry.A.shape} B{entry.B.shape} do not fit a [{d}x{k}] weight")


def apply(W: np.ndarray, entry: LoraEntry, x: np.ndarray, scale: float) -> np.ndarray:
    """``W @ x + scale * B @ (A @ x)``; ``W`` is only read."""
    W = np.asarray(W, dtype=np.float64)
    _check_entry(W.shape, entry)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != W.shape[1]:
        raise ValueError(f"input length {x.shape[0]} != weight columns {W.shape[1]}")
    return W @ x + scale * (entry.B @ (entry.A @ x))


def delta(entry: LoraEntry, scale: float) -> np.ndarray:
    return scale * (entry.B @ entry.A)


def merge(base: tlm.TinyModel, adapter: LoraAdapter, requantize: bool = True) -> tlm.TinyModel:
    """Fold every adapter into its base weight, returning a new model.

    Float32 targets stay float32. Quantized targets are dequantized, updated,
    and re-quantized with the same scheme unless ``requantize`` is False, in
    which case they come back as float32.
    """
    updates: dict[str, np.ndarray | QuantTensor] = {}
    for name, entry in adapter.entries.items():
        if name not in base.tensors:
            raise KeyError(f"adapter target {name!r} not in model")
        t = base.tensors[name]
        _check_entry(t.shape, entry)
        W = dequantize(t) if isinstance(t, QuantTensor) else np.asarray(t, dtype=np.float64)
        merged = W + delta(entry, adapter.scale)
        if isinstance(t, QuantTensor) and requantize:
            updates[name] = quantize(merged, t.scheme)
        else:
            updates[name] = merged.astype(np.float32)
    return base.with_tensors(updates)


@dataclass
class TrainReport:
    losses: list[float]
    adapter: LoraAdapter
    digest_before: str
    digest_after: str

    @property
    def base_unchanged(self) -> bool:
        return self.digest_before == self.digest_after


def train_adapter(
    base: tlm.TinyModel,
    adapter: LoraAdapter,
    dataset: Sequence[TokenSequence],
    steps: int,
    lr: float = 1e-2,
    optimizer: str = "adam",
    batch_size: int | None = None,
    seed: int = 0,
    log_every: int = 0,
) -> TrainReport:
    """Train only the adapter; the input adapter object is not modified."""
    before = base.base_digest
    ad = adapter.copy()
    params = ad.params()
    names = list(params)

    def step(batch):
        return tlm.backward(base, batch, names, ad)

    curve = train.run(params, step, dataset, steps, train.make_optimizer(optimizer, lr), batch_size, seed, log_every)
    return TrainReport(curve, ad, before, tlm.tensor_digest(base.tensors))


@dataclass
class GradCheckResult:
    passed: bool
    worst_rel_error: float
    checked: list[tuple[str, tuple[int, ...], float, float, float]]  # name, index, analytic, numeric, rel


GradFn = Callable[[tlm.WeightSource, Sequence[TokenSequence], Iterable[str], LoraAdapter], tlm.LossAndGrads]


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    base: tlm.WeightSource,
    adapter: LoraAdapter,
    seqs: TokenSequence | Sequence[TokenSequence],
    n_coords: int = 20,
    tol: float = 1e-5,
    step: float = 1e-4,
    seed: int = 0,
    gradient: GradFn = tlm.backward,
) -> GradCheckResult:
    """Compare adapter gradients against central differences.

    ``n_coords`` coordinates are drawn from every adapter tensor. The
    ``gradient`` hook exists so a corrupted gradient can be fed in as a
    negative control.
    """
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    ad = adapter.copy()
    params = ad.params()
    analytic = gradient(base, seqs, list(params), ad).grads
    checked = []
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        rng = SplitMix64(derive_seed(seed, "gradcheck:" + name))
        for flat in rng.choice(p.size, min(n_coords, p.size)):
            idx = np.unravel_index(int(flat), p.shape)
            orig = p[idx]
            p[idx] = orig + step
            up = tlm.backward(base, seqs, (), ad).loss
            p[idx] = orig - step
            down = tlm.backward(base, seqs, (), ad).loss
            p[idx] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[name][idx])
            rel = relative_error(a, numeric)
            worst = max(worst, rel)
            checked.append((name, tuple(int(i) for i in idx), a, numeric, rel))
    return GradCheckResult(worst < tol, worst, checked)
