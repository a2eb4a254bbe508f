import numpy as np
import pytest

from adaptlab import lora
from adaptlab import model as tlm
from adaptlab.rng import SplitMix64
from adaptlab.tokenizer import TokenSequence

SMALL = tlm.ModelConfig(vocab_size=8, d_model=16, n_layers=2, n_heads=2, d_ff=64, max_seq=16, seed=3)


def random_seqs(n, V, lo=3, hi=10, seed=0):
    """Bounded sequences of random ordinary tokens (ids 3..V-1)."""
    rng = SplitMix64(seed)
    out = []
    for _ in range(n):
        length = lo + rng.randbelow(hi - lo + 1)
        body = tuple(3 + rng.randbelow(V - 3) for _ in range(length))
        out.append(TokenSequence((0,) + body + (1,), True))
    return out


def randomize(adapter, std=0.1, seed=1):
    """Non-trivial adapter weights: both A and B drawn from N(0, std)."""
    ad = adapter.copy()
    rng = SplitMix64(seed)
    for e in ad.entries.values():
        e.A[...] = rng.normal(e.A.shape, std)
        e.B[...] = rng.normal(e.B.shape, std)
    return ad


@pytest.fixture(scope="session")
def small_model():
    return tlm.init(SMALL)


@pytest.fixture(scope="session")
def small_seqs():
    return random_seqs(6, SMALL.vocab_size, seed=11)


@pytest.fixture
def trained_adapter(small_model):
    return randomize(lora.init_adapter(small_model, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
