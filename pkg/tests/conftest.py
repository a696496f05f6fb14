import numpy as np
import pytest

from experiment_spec import ExperimentSpec
from memory_metrics import OperationCounters
from memory_model import MemoryConfig, ProductKeyMemory
from numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_cfg():
    return MemoryConfig(d_in=3, d_q=8, d_v=2, n1=6, n2=6, k=3, heads=2)


@pytest.fixture
def small_memory(small_cfg, rng):
    return ProductKeyMemory(small_cfg, rng, counters=OperationCounters())


@pytest.fixture
def tiny_spec():
    return ExperimentSpec.from_dict({
        "dataset": {"N": 64, "d": 4, "m": 3},
        "embed_dim": 8,
        "memory": {"d_q": 4, "d_v": 4, "n1": 4, "n2": 4, "k": 2, "heads": 1},
        "batch_size": 16,
        "epochs": 2,
        "early_stop": False,
        "eval_batch_size": 32,
        "seed": 7,
    })


@pytest.fixture
def random_batch():
    def make(n, d, seed=0):
        return np.random.default_rng(seed).normal(size=(n, d))
    return make
