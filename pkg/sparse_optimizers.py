"""Dense and sparse SGD / Adam.

Adam keeps a step counter per row (slot) of every parameter. Dense steps
advance all rows together, which is plain Adam; sparse steps advance only the
touched slots, so the bias correction of a rarely touched slot is not
over-shrunk. Re-initialized slots get their moments and counters zeroed and
restart as if freshly created.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from numerics import DTYPE, SparseRows
from memory_metrics import run_counters
from pkm_errors import ConfigurationError, ContractViolation


@dataclass
class AdamState:
    shape: tuple
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_multiplier: float = 1.0
    sparse: bool = False
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    steps: np.ndarray = field(default=None, repr=False)
    writes: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(f"Adam betas must lie in [0,1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0.0 or self.eps <= 0.0:
            raise ConfigurationError(f"Adam lr and eps must be positive, got {self.lr}, {self.eps}")
        _check_decay(self)
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape, dtype=DTYPE)
            self.v = np.zeros(self.shape, dtype=DTYPE)
            self.steps = np.zeros(self.shape[0], dtype=np.int64)


@dataclass
class SgdState:
    shape: tuple
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_multiplier: float = 1.0
    sparse: bool = False
    velocity: np.ndarray = field(default=None, repr=False)
    writes: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"SGD momentum must lie in [0,1), got {self.momentum}")
        if self.lr <= 0.0:
            raise ConfigurationError(f"SGD lr must be positive, got {self.lr}")
        _check_decay(self)
        self.shape = tuple(self.shape)
        if self.velocity is None:
            self.velocity = np.zeros(self.shape, dtype=DTYPE)


def _check_decay(state):
    if state.weight_decay < 0.0:
        raise ConfigurationError(f"weight_decay must be >= 0, got {state.weight_decay}")
    if state.sparse and state.weight_decay > 0.0:
        raise ConfigurationError("Weight decay is not supported for sparse parameters")


def _row_shape(steps, ndim):
    return steps.reshape(steps.shape + (1,) * (ndim - 1))


def _adam_rows(state, p, g, m, v, t, lr):
    """One Adam update for a block of rows; returns new (p, m, v)."""
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    return p - lr * m_hat / (np.sqrt(v_hat) + state.eps), m, v


def dense_step(state, param, grad, lr_scale=1.0):
    """Update ``param`` in place from a dense gradient of the same shape."""
    grad = np.asarray(grad, dtype=DTYPE)
    if grad.shape != param.shape or param.shape != state.shape:
        raise ConfigurationError(
            "Parameter and gradient shape mismatch. Parameter shape: %s, gradient shape: %s, state shape: %s"
            % (param.shape, grad.shape, state.shape))
    lr = state.lr * state.lr_multiplier * lr_scale
    if state.weight_decay:
        grad = grad + state.weight_decay * param
    if isinstance(state, AdamState):
        state.steps += 1
        t = _row_shape(state.steps, param.ndim).astype(DTYPE)
        new_p, state.m[...], state.v[...] = _adam_rows(state, param, grad, state.m, state.v, t, lr)
        param[...] = new_p
    else:
        state.velocity[...] = state.momentum * state.velocity + grad
        param[...] = param - lr * state.velocity
    state.writes += param.shape[0]


def sparse_step(state, table, grads: SparseRows, lr_scale=1.0):
    """Update only the listed slots of ``table``; untouched slots and their
    optimizer state stay bit-identical."""
    idx = np.asarray(grads.indices, dtype=np.int64)
    if idx.size == 0:
        return
    if np.unique(idx).size != idx.size:
        raise ContractViolation("Duplicate slot indices reached the optimizer; merge them first")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ContractViolation(f"Slot index out of range for a table of {table.shape[0]} slots")
    rows = np.asarray(grads.rows, dtype=DTYPE).reshape((idx.size,) + table.shape[1:])
    lr = state.lr * state.lr_multiplier * lr_scale
    if isinstance(state, AdamState):
        state.steps[idx] += 1
        t = _row_shape(state.steps[idx], table.ndim).astype(DTYPE)
        new_rows, state.m[idx], state.v[idx] = _adam_rows(state, table[idx], rows, state.m[idx], state.v[idx], t, lr)
        table[idx] = new_rows
    else:
        state.velocity[idx] = state.momentum * state.velocity[idx] + rows
        table[idx] = table[idx] - lr * state.velocity[idx]
    state.writes += idx.size
    run_counters().add(sparse_writes=idx.size)


def reset_slots(state, indices):
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return
    if isinstance(state, AdamState):
        state.m[idx] = 0.0
        state.v[idx] = 0.0
        state.steps[idx] = 0
    else:
        state.velocity[idx] = 0.0


def make_state(kind, shape, sparse=False, **hyper):
    if kind == "adam":
        return AdamState(shape=shape, sparse=sparse, **hyper)
    if kind == "sgd":
        return SgdState(shape=shape, sparse=sparse, **hyper)
    raise ConfigurationError(f"Unknown optimizer {kind!r}, expected adam or sgd")


class OptimizerSet:
    """One optimizer state per named parameter plus a shared step-decay scale."""

    def __init__(self):
        self._l = logging.getLogger("OptimizerSet")
        self.states = {}
        self.lr_scale = 1.0

    def add(self, name, state):
        self.states[name] = state

    def step(self, params, grads):
        for name, grad in grads.items():
            dense_step(self.states[name], params[name], grad, self.lr_scale)

    def sparse_step(self, name, table, rows):
        sparse_step(self.states[name], table, rows, self.lr_scale)

    def reset_slots(self, name, indices):
        reset_slots(self.states[name], indices)

    def apply_step_decay(self, epoch, every, gamma):
        if every and epoch and epoch % every == 0:
            self.lr_scale *= gamma
            self._l.info("Learning-rate scale decayed to %s at epoch %s.", self.lr_scale, epoch)

    def learning_rates(self):
        return {name: s.lr * s.lr_multiplier * self.lr_scale for name, s in self.states.items()}

    def state_arrays(self):
        arrays = {}
        for name, s in self.states.items():
            if isinstance(s, AdamState):
                arrays[f"{name}.m"] = s.m
                arrays[f"{name}.v"] = s.v
                arrays[f"{name}.steps"] = s.steps
            else:
                arrays[f"{name}.velocity"] = s.velocity
        return arrays
