"""Gradient-descent loop shared by base pre-training and adapter training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as tlm
from .rng import SplitMix64
from .tokenizer import TokenSequence


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"training diverged at step {step} (loss {loss})")
        self.step = step
        self.loss = loss


class ParamSource:
    """Weight source over a dict of mutable float64 arrays."""

    def __init__(self, config: tlm.ModelConfig, params: Mapping[str, np.ndarray]) -> None:
        self.config = config
        self.params = params

    def weight(self, name: str) -> np.ndarray:
        return self.params[name]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float) -> None:
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")


def batches(n: int, batch_size: int | None, seed: int):
    """Endless deterministic stream of index batches (full batch when size is None)."""
    if batch_size is None or batch_size >= n:
        while True:
            yield list(range(n))
    rng = SplitMix64(seed)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def run(
    params: dict[str, np.ndarray],
    loss_and_grads: Callable[[list[TokenSequence]], tlm.LossAndGrads],
    dataset: Sequence[TokenSequence],
    steps: int,
    optimizer,
    batch_size: int | None = None,
    seed: int = 0,
    log_every: int = 0,
    log: Callable[[str], None] = print,
) -> list[float]:
    """Optimise ``params`` in place; returns the per-step loss (nats/event)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not dataset:
        raise ValueError("empty training set")
    curve: list[float] = []
    stream = batches(len(dataset), batch_size, seed)
    for step in range(steps):
        idx = next(stream)
        # overflow can hide behind a finite loss (a norm of inf activations is 0),
        # so any overflow or invalid operation counts as divergence
        try:
            with np.errstate(over="raise", invalid="raise"):
                res = loss_and_grads([dataset[i] for i in idx])
        except FloatingPointError:
            raise TrainingDiverged(step, math.nan) from None
        if not math.isfinite(res.loss) or any(not np.all(np.isfinite(g)) for g in res.grads.values()):
            raise TrainingDiverged(step, res.loss)
        curve.append(res.loss)
        optimizer.step(params, res.grads)
        if any(not np.all(np.isfinite(params[n])) for n in res.grads):
            raise TrainingDiverged(step, res.loss)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log(f"step {step:5d}  loss {res.loss:.4f}")
    return curve


@dataclass
class PretrainReport:
    model: tlm.TinyModel
    losses: list[float]


def pretrain(
    base: tlm.TinyModel,
    dataset: Sequence[TokenSequence],
    steps: int,
    lr: float = 1e-2,
    optimizer: str = "adam",
    batch_size: int | None = None,
    seed: int = 0,
    log_every: int = 0,
) -> PretrainReport:
    """Full-parameter training of a base model; returns a new model."""
    params = {n: base.weight(n).copy() for n in base.tensors}
    src = ParamSource(base.config, params)
    names = list(params)

    def step(batch):
        return tlm.backward(src, batch, names)

    curve = run(params, step, dataset, steps, make_optimizer(optimizer, lr), batch_size, seed, log_every)
    tensors = {n: p.astype(np.float32) for n, p in params.items()}
    return PretrainReport(tlm.TinyModel(base.config, tensors), curve)
