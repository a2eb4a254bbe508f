"""A tiny pre-norm decoder-only transformer with hand-written backprop.

Architecture::

    x = tok_emb[ids] + pos_emb[:T]
    for each layer:
        x = x + Attn(RMSNorm(x; norm1))        # causal, multi-head
        x = x + Down(GELU(Up(RMSNorm(x; norm2))))
    logits = RMSNorm(x; norm_f) @ head.T

Weights are stored as float32 (or as quantized tensors); every forward and
backward pass runs in float64. Projections follow the ``y = x @ W.T``
convention with ``W`` shaped ``[out, in]``, which is also the shape the
low-rank adapters attach to.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .quant import QuantTensor, dequantize
from .rng import SplitMix64, derive_seed
from .tokenizer import InvalidTokenId, TokenSequence

INIT_STD = 0.02
RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

PROJECTIONS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_seq < 2:
            raise ValueError("max_seq must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "norm1": (d,),
            p + "attn.q": (d, d),
            p + "attn.k": (d, d),
            p + "attn.v": (d, d),
            p + "attn.o": (d, d),
            p + "norm2": (d,),
            p + "mlp.up": (f, d),
            p + "mlp.down": (d, f),
        })
    shapes["norm_f"] = (d,)
    shapes["head"] = (V, d)
    return shapes


def layer_of(name: str) -> int | None:
    """Layer index of a tensor name, or None for global tensors."""
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


def tensor_digest(tensors: Mapping[str, np.ndarray | QuantTensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, QuantTensor):
            h.update(f"{name}|{t.scheme}|{t.shape}|".encode())
            h.update(t.to_bytes())
        else:
            arr = np.ascontiguousarray(t)
            h.update(f"{name}|{arr.dtype.str}|{arr.shape}|".encode())
            h.update(arr.tobytes())
    return h.hexdigest()


class WeightSource(Protocol):
    config: ModelConfig

    def weight(self, name: str) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TinyModel:
    config: ModelConfig
    tensors: Mapping[str, np.ndarray | QuantTensor]
    base_digest: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        shapes = tensor_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ValueError(f"tensor set mismatch; missing={missing} extra={extra}")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ValueError(f"{name}: shape {tuple(t.shape)} != expected {shape}")
            if not isinstance(t, QuantTensor):
                t.setflags(write=False)
                if not np.all(np.isfinite(t)):
                    raise ValueError(f"{name}: non-finite entries")
        if not self.base_digest:
            object.__setattr__(self, "base_digest", tensor_digest(self.tensors))

    def weight(self, name: str) -> np.ndarray:
        """Float64 view of a tensor, dequantizing quantized storage on demand."""
        w = self._cache.get(name)
        if w is None:
            t = self.tensors[name]
            w = dequantize(t) if isinstance(t, QuantTensor) else t.astype(np.float64)
            w.setflags(write=False)
            self._cache[name] = w
        return w

    def verify_digest(self) -> bool:
        return tensor_digest(self.tensors) == self.base_digest

    def with_tensors(self, updates: Mapping[str, np.ndarray | QuantTensor]) -> "TinyModel":
        """New model with some tensors replaced; this one is left untouched."""
        tensors = dict(self.tensors)
        tensors.update(updates)
        return TinyModel(self.config, tensors)

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())


def init(cfg: ModelConfig) -> TinyModel:
    """Gaussian(0, 0.02) weights, unit norm gains, one SplitMix64 stream per tensor."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(cfg).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            rng = SplitMix64(derive_seed(cfg.seed, name))
            tensors[name] = rng.normal(shape, INIT_STD).astype(np.float32)
    return TinyModel(cfg, tensors)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _rmsnorm(x, g):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * g, inv


def _rmsnorm_back(dy, x, inv, g):
    dg = (dy * x * inv).reshape(-1, x.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = inv * dxh - (inv**3) * x * np.mean(dxh * x, axis=-1, keepdims=True)
    return dx, dg


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(da, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return da * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _outer_sum(a, b):
    """Sum over all leading axes of the outer products ``a[..., :, None] * b[..., None, :]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


class _Linear:
    """Projection with an optional low-rank path: ``x W^T + s (x A^T) B^T``."""

    def __init__(self, name, W, lora, scale):
        self.name, self.W, self.lora, self.scale = name, W, lora, scale

    def __call__(self, x):
        self.x = x
        y = x @ self.W.T
        if self.lora is not None:
            A, B = self.lora
            self.u = x @ A.T
            y = y + self.scale * (self.u @ B.T)
        return y

    def backward(self, dy, grads, want):
        x = self.x
        dx = dy @ self.W
        if self.name in want:
            grads[self.name] = _outer_sum(dy, x)
        if self.lora is not None:
            A, B = self.lora
            du = self.scale * (dy @ B)
            dx = dx + du @ A
            if self.name + ".lora_B" in want:
                grads[self.name + ".lora_B"] = self.scale * _outer_sum(dy, self.u)
            if self.name + ".lora_A" in want:
                grads[self.name + ".lora_A"] = _outer_sum(du, x)
        return dx


def _as_batch(tokens) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of id sequences into ``[B, T]`` plus a validity mask."""
    rows = [np.asarray(t.ids if isinstance(t, TokenSequence) else t, dtype=np.int64) for t in tokens]
    T = max((len(r) for r in rows), default=0)
    ids = np.zeros((len(rows), T), dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


class _Pass:
    """One forward pass over a padded batch, keeping what backward needs."""

    def __init__(self, src: WeightSource, ids: np.ndarray, adapter=None):
        cfg = src.config
        Bsz, T = ids.shape
        if T > cfg.max_seq:
            raise SequenceTooLong(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise InvalidTokenId(f"token id outside [0, {cfg.vocab_size})")
        self.cfg, self.src, self.ids = cfg, src, ids
        lora = {n: (e.A, e.B) for n, e in adapter.entries.items()} if adapter is not None else {}
        scale = adapter.scale if adapter is not None else 0.0

        def lin(name):
            return _Linear(name, src.weight(name), lora.get(name), scale)

        H, hd = cfg.n_heads, cfg.head_dim
        causal = np.tril(np.ones((T, T), dtype=bool))
        x = src.weight("tok_emb")[ids] + src.weight("pos_emb")[:T]
        self.layers = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            c = {"x_in": x}
            h, c["inv1"] = _rmsnorm(x, src.weight(p + "norm1"))
            c["q"], c["k"], c["v"], c["o"] = (lin(p + "attn." + n) for n in "qkvo")
            q = c["q"](h).reshape(Bsz, T, H, hd).transpose(0, 2, 1, 3)
            k = c["k"](h).reshape(Bsz, T, H, hd).transpose(0, 2, 1, 3)
            v = c["v"](h).reshape(Bsz, T, H, hd).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(hd)
            s = np.where(causal, s, -np.inf)
            s = s - s.max(axis=-1, keepdims=True)
            P = np.exp(s)
            P /= P.sum(axis=-1, keepdims=True)
            att = (P @ v).transpose(0, 2, 1, 3).reshape(Bsz, T, H * hd)
            x = x + c["o"](att)
            c.update(qh=q, kh=k, vh=v, P=P, x_mid=x)
            h2, c["inv2"] = _rmsnorm(x, src.weight(p + "norm2"))
            c["up"], c["down"] = lin(p + "mlp.up"), lin(p + "mlp.down")
            u = c["up"](h2)
            a, c["t"] = _gelu(u)
            c["u"] = u
            x = x + c["down"](a)
            self.layers.append(c)
        self.x_final = x
        hf, self.inv_f = _rmsnorm(x, src.weight("norm_f"))
        self.head = lin("head")
        self.logits = self.head(hf)

    def backward(self, dlogits: np.ndarray, want: set[str]) -> dict[str, np.ndarray]:
        cfg, src = self.cfg, self.src
        Bsz, T = self.ids.shape
        H, hd = cfg.n_heads, cfg.head_dim
        grads: dict[str, np.ndarray] = {}
        dh = self.head.backward(dlogits, grads, want)
        dx, dg = _rmsnorm_back(dh, self.x_final, self.inv_f, src.weight("norm_f"))
        if "norm_f" in want:
            grads["norm_f"] = dg
        for i in reversed(range(cfg.n_layers)):
            p = f"layers.{i}."
            c = self.layers[i]
            da = c["down"].backward(dx, grads, want)
            du = _gelu_back(da, c["u"], c["t"])
            dh2 = c["up"].backward(du, grads, want)
            dxm, dg2 = _rmsnorm_back(dh2, c["x_mid"], c["inv2"], src.weight(p + "norm2"))
            if p + "norm2" in want:
                grads[p + "norm2"] = dg2
            dx = dx + dxm
            datt = c["o"].backward(dx, grads, want)
            dO = datt.reshape(Bsz, T, H, hd).transpose(0, 2, 1, 3)
            P, q, k, v = c["P"], c["qh"], c["kh"], c["vh"]
            dP = dO @ v.transpose(0, 1, 3, 2)
            dv = P.transpose(0, 1, 3, 2) @ dO
            dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) / math.sqrt(hd)
            dq = dS @ k
            dk = dS.transpose(0, 1, 3, 2) @ q

            def merge(g):
                return g.transpose(0, 2, 1, 3).reshape(Bsz, T, H * hd)

            dh = (
                c["q"].backward(merge(dq), grads, want)
                + c["k"].backward(merge(dk), grads, want)
                + c["v"].backward(merge(dv), grads, want)
            )
            dxi, dg1 = _rmsnorm_back(dh, c["x_in"], c["inv1"], src.weight(p + "norm1"))
            if p + "norm1" in want:
                grads[p + "norm1"] = dg1
            dx = dx + dxi
        if "tok_emb" in want:
            g = np.zeros((cfg.vocab_size, cfg.d_model))
            np.add.at(g, self.ids.reshape(-1), dx.reshape(-1, cfg.d_model))
            grads["tok_emb"] = g
        if "pos_emb" in want:
            g = np.zeros((cfg.max_seq, cfg.d_model))
            g[:T] = dx.sum(axis=0)
            grads["pos_emb"] = g
        return grads


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(src: WeightSource, tokens: Sequence[int] | TokenSequence, adapter=None) -> np.ndarray:
    """Logits ``[T, V]`` for one token sequence."""
    ids, _ = _as_batch([tokens])
    return _Pass(src, ids, adapter).logits[0]


def forward_batch(src: WeightSource, batch: Iterable, adapter=None) -> tuple[np.ndarray, np.ndarray]:
    ids, mask = _as_batch(list(batch))
    return _Pass(src, ids, adapter).logits, mask


def _split_io(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    for s in seqs:
        if not s.has_boundaries or len(s) < 2:
            raise ValueError("neural scoring needs sequences with boundaries")
    ids, mask = _as_batch(seqs)
    return ids[:, :-1], ids[:, 1:], mask[:, 1:]


@dataclass(frozen=True)
class NLLResult:
    bits: np.ndarray  # per predicted event, -log2 p(true next token)
    mean_bits: float

    @property
    def events(self) -> int:
        return len(self.bits)

    @property
    def perplexity(self) -> float:
        from .metrics import perplexity_from_xent

        return perplexity_from_xent(self.mean_bits)


def neural_nll(src: WeightSource, seqs: TokenSequence | Sequence[TokenSequence], adapter=None) -> NLLResult:
    """Per-event bits over one or more bounded sequences (micro-averaged mean)."""
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    inp, tgt, mask = _split_io(seqs)
    logp = _log_softmax(_Pass(src, inp, adapter).logits)
    nats = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    bits = nats[mask] / math.log(2.0)
    return NLLResult(bits, float(math.fsum(bits) / len(bits)))


@dataclass
class LossAndGrads:
    loss: float  # mean natural-log cross-entropy per predicted event
    grads: dict[str, np.ndarray]


def backward(
    src: WeightSource,
    seqs: TokenSequence | Sequence[TokenSequence],
    trainable: Iterable[str] = (),
    adapter=None,
) -> LossAndGrads:
    """Exact gradients of the mean next-token loss for the named tensors.

    Adapter tensors are addressed as ``<target>.lora_A`` / ``<target>.lora_B``.
    Tensors not named in ``trainable`` get no gradient entry.
    """
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    want = set(trainable)
    inp, tgt, mask = _split_io(seqs)
    fp = _Pass(src, inp, adapter)
    logp = _log_softmax(fp.logits)
    n = int(mask.sum())
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = float(nll[mask].sum() / n)
    if not want:
        return LossAndGrads(loss, {})
    d = np.exp(logp)
    np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], axis=-1) - 1.0, axis=-1)
    d *= mask[..., None] / n
    return LossAndGrads(loss, fp.backward(d, want))
