import numpy as np
import pytest

from evograd.dsl import Equation, Vocab, _sample_step


def sample_unchecked(rng: np.random.Generator, vocab: Vocab | None = None, steps: int | None = None) -> Equation:
    """A uniformly sampled equation without the feasibility filter."""
    vocab = vocab or Vocab()
    n = steps or int(rng.integers(1, 4))
    return Equation(tuple(_sample_step(rng, vocab, s == 0) for s in range(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
