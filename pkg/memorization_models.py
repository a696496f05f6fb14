"""Models of the random-label memorization study.

Both models expose the same surface: ``forward(x, mode)`` returns logits,
``backward(dlogits)`` returns ModelGrads, ``parameters()`` the densely
optimized arrays and ``sparse_tables()`` the slot tables updated sparsely.
"""
import logging
from dataclasses import dataclass, field

from numerics import Linear, STORAGE_DTYPE, relu_forward, relu_backward
from memory_model import ProductKeyMemory
from pkm_errors import ConfigurationError


@dataclass
class ModelGrads:
    dense: dict
    sparse: dict = field(default_factory=dict)
    memory: object = None


class ToyMemoryModel:
    """Linear d -> embed_dim, product-key memory, linear d_v -> m."""

    def __init__(self, d, m, embed_dim, memory_cfg, rng=None, counters=None):
        self._l = logging.getLogger("ToyMemoryModel")
        if memory_cfg.d_in != embed_dim:
            raise ConfigurationError(f"Memory input {memory_cfg.d_in} does not match embedding {embed_dim}")
        self.d = d
        self.m = m
        self.embed = Linear(d, embed_dim, rng=rng, name="embed")
        self.memory = ProductKeyMemory(memory_cfg, rng=rng, counters=counters)
        self.head = Linear(memory_cfg.d_v, m, rng=rng, name="head")
        self.last_memory = None

    def forward(self, x, mode="train"):
        self.last_memory = self.memory.forward(self.embed.forward(x), mode)
        return self.head.forward(self.last_memory.m)

    def backward(self, dlogits):
        dm = self.head.backward(dlogits)
        grads = self.memory.backward(dm, self.last_memory)
        self.embed.backward(grads.dx)
        dense = {**self.embed.gradients(), **self.memory.gradients(grads), **self.head.gradients()}
        return ModelGrads(dense=dense, sparse={"memory.values": grads.values}, memory=grads)

    def parameters(self):
        return {**self.embed.parameters(), **self.memory.parameters(), **self.head.parameters()}

    def sparse_tables(self):
        return {"memory.values": self.memory.values.slots}

    def buffers(self):
        return self.memory.buffers()

    def cast_to_f32(self):
        for array in list(self.embed.parameters().values()) + list(self.head.parameters().values()):
            array[...] = array.astype(STORAGE_DTYPE)
        self.memory.cast_to_f32()


class WideMlpBaseline:
    """Linear d -> embed_dim, linear -> width, ReLU, linear -> embed_dim,
    linear -> m."""

    memory = None
    last_memory = None

    def __init__(self, d, m, embed_dim, width, rng=None):
        if width < 1:
            raise ConfigurationError(f"Wide MLP width must be >= 1, got {width}")
        self.d = d
        self.m = m
        self.embed = Linear(d, embed_dim, rng=rng, name="embed")
        self.fc1 = Linear(embed_dim, width, rng=rng, name="mlp.fc1")
        self.fc2 = Linear(width, embed_dim, rng=rng, name="mlp.fc2")
        self.head = Linear(embed_dim, m, rng=rng, name="head")
        self._mask = None

    @property
    def layers(self):
        return self.embed, self.fc1, self.fc2, self.head

    def forward(self, x, mode="train"):
        hidden, self._mask = relu_forward(self.fc1.forward(self.embed.forward(x)))
        return self.head.forward(self.fc2.forward(hidden))

    def backward(self, dlogits):
        dh = self.fc2.backward(self.head.backward(dlogits))
        self.embed.backward(self.fc1.backward(relu_backward(self._mask, dh)))
        dense = {}
        for layer in self.layers:
            dense.update(layer.gradients())
        return ModelGrads(dense=dense)

    def parameters(self):
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def sparse_tables(self):
        return {}

    def buffers(self):
        return {}

    def cast_to_f32(self):
        for array in self.parameters().values():
            array[...] = array.astype(STORAGE_DTYPE)


def build_model(spec, rng=None, counters=None):
    ds = spec.dataset
    if spec.model == "memory":
        return ToyMemoryModel(ds.d, ds.m, spec.embed_dim, spec.memory, rng=rng, counters=counters)
    return WideMlpBaseline(ds.d, ds.m, spec.embed_dim, spec.wide_mlp_width, rng=rng)
