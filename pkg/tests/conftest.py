import numpy as np
import pytest

from ere.analysis import train_toy_pair
from ere.tensor_archive import TensorMap

from oracles import random_orthonormal


@pytest.fixture(scope="session")
def toy_pairs():
    """Trained (theta, theta_prime) snapshots, cached per seed."""
    cache = {}

    def get(seed: int):
        if seed not in cache:
            cache[seed] = train_toy_pair(seed)
        return cache[seed]

    return get


def planted_lowrank_pair(seed: int, rank: int = 3,
                         shapes=((24, 16), (16, 16), (16, 40))):
    """Base map plus a fine-tuned map whose residuals have exact low rank."""
    rng = np.random.default_rng(seed)
    base, finetuned = {}, {}
    for i, (n, m) in enumerate(shapes):
        theta = rng.standard_normal((n, m)).astype(np.float32)
        u = random_orthonormal(rng, n, rank)
        v = random_orthonormal(rng, m, rank)
        d = np.sort(rng.uniform(0.5, 2.0, size=rank))[::-1]
        delta = ((u * d) @ v.T).astype(np.float32)
        name = f"block.{i}.weight"
        base[name] = theta
        finetuned[name] = theta + delta
        bias = rng.standard_normal(m).astype(np.float32)
        base[f"block.{i}.bias"] = bias
        finetuned[f"block.{i}.bias"] = bias + 0.01 * rng.standard_normal(m).astype(np.float32)
    return TensorMap(base), TensorMap(finetuned)


@pytest.fixture
def planted_pair():
    return planted_lowrank_pair(314)
