"""Dense numeric kernels with manual forward/backward passes.

All training and oracle arithmetic runs in float64. Each kernel returns its
output together with a small cache object that the matching backward kernel
consumes, so forward/backward over disjoint batch shards never share state.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax as _scipy_softmax
from scipy.special import log_softmax as _scipy_log_softmax

from pkm_errors import ConfigurationError, ContractViolation, NonFiniteError

DTYPE = np.float64
STORAGE_DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-8

_U64 = (1 << 64) - 1

# sub-stream ids of one seeded run
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_REINIT = 3
STREAM_HOLDOUT = 4


class Rng:
    """Seeded random stream on top of the Philox-4x64 counter-based generator.

    The key is the seed, the counter starts at ``stream << 192`` so that each
    consumer (data, init, shuffle, reinit...) draws from a disjoint block of
    the same keyed sequence. Philox uses fixed published round constants, so a
    given (seed, stream) pair yields the same bytes on every platform.
    """

    def __init__(self, seed, stream=0):
        if seed < 0:
            raise ConfigurationError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed) & _U64
        self.stream = int(stream)
        bit_generator = np.random.Philox(key=self.seed, counter=self.stream << 192)
        self.generator = np.random.Generator(bit_generator)

    def spawn(self, stream):
        return Rng(self.seed, stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n):
        return self.generator.permutation(n)

    def random_bytes(self, n):
        return self.generator.bytes(n)


# -- linear projection -------------------------------------------------------

@dataclass
class LinearCache:
    x: np.ndarray


def linear_forward(W, b, x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ConfigurationError(
            "Linear input width mismatch. Weight shape: %s, input shape: %s" % (np.shape(W), np.shape(x)))
    if b is not None and b.shape != (W.shape[0],):
        raise ConfigurationError(
            "Linear bias shape mismatch. Weight shape: %s, bias shape: %s" % (np.shape(W), np.shape(b)))
    y = x @ W.T
    if b is not None:
        y = y + b
    return y, LinearCache(x=x)


def linear_backward(W, cache, dy):
    dx = dy @ W
    dW = dy.T @ cache.x
    db = dy.sum(axis=0)
    return dx, dW, db


class Linear:
    """Fully connected layer y = x W^T + b holding its own gradients."""

    def __init__(self, d_in, d_out, rng=None, bias=True, name="linear"):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        bound = 1.0 / np.sqrt(d_in)
        if rng is None:
            self.W = np.zeros((d_out, d_in), dtype=DTYPE)
        else:
            self.W = rng.uniform(-bound, bound, size=(d_out, d_in)).astype(DTYPE)
        self.b = np.zeros(d_out, dtype=DTYPE) if bias else None
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b) if bias else None
        self._cache = None

    def forward(self, x):
        y, self._cache = linear_forward(self.W, self.b, x)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise ContractViolation(f"{self.name}: backward called before forward")
        dx, self.dW, db = linear_backward(self.W, self._cache, dy)
        if self.b is not None:
            self.db = db
        return dx

    def parameters(self):
        params = {f"{self.name}.W": self.W}
        if self.b is not None:
            params[f"{self.name}.b"] = self.b
        return params

    def gradients(self):
        grads = {f"{self.name}.W": self.dW}
        if self.b is not None:
            grads[f"{self.name}.b"] = self.db
        return grads


# -- batch normalization -----------------------------------------------------

@dataclass
class BatchNormState:
    dim: int
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    affine: bool = True
    mode: str = "train"
    gamma: np.ndarray = None
    beta: np.ndarray = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"BatchNorm momentum must be in (0,1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ConfigurationError(f"BatchNorm eps must be positive, got {self.eps}")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"BatchNorm mode must be train or eval, got {self.mode}")
        if self.gamma is None:
            self.gamma = np.ones(self.dim, dtype=DTYPE)
        if self.beta is None:
            self.beta = np.zeros(self.dim, dtype=DTYPE)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.dim, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.dim, dtype=DTYPE)


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(s, x, mode=None):
    """Normalize ``x`` per feature. Train mode uses (biased) batch statistics
    and folds them into the running statistics; eval mode uses the running
    statistics only."""
    mode = mode or s.mode
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != s.dim:
        raise ConfigurationError(
            "BatchNorm input shape mismatch. Expected width: %s, input shape: %s" % (s.dim, np.shape(x)))
    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigurationError("BatchNorm in train mode needs a batch of at least 2 samples")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        s.running_mean[...] = (1.0 - s.momentum) * s.running_mean + s.momentum * mean
        s.running_var[...] = (1.0 - s.momentum) * s.running_var + s.momentum * var
    else:
        mean = s.running_mean
        var = s.running_var
    inv_std = 1.0 / np.sqrt(var + s.eps)
    x_hat = (x - mean) * inv_std
    y = s.gamma * x_hat + s.beta
    return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std, mode=mode)


def batchnorm_backward(s, cache, dy):
    dgamma = (dy * cache.x_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx_hat = dy * s.gamma
    if cache.mode == "eval":
        return dx_hat * cache.inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = (cache.inv_std / n) * (
        n * dx_hat - dx_hat.sum(axis=0) - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=0))
    return dx, dgamma, dbeta


class BatchNorm1d:
    def __init__(self, dim, momentum=BN_MOMENTUM, eps=BN_EPS, affine=True, name="bn"):
        self.name = name
        self.state = BatchNormState(dim=dim, momentum=momentum, eps=eps, affine=affine)
        self.dgamma = np.zeros(dim, dtype=DTYPE)
        self.dbeta = np.zeros(dim, dtype=DTYPE)
        self._cache = None

    def forward(self, x, mode="train"):
        y, self._cache = batchnorm_forward(self.state, x, mode)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise ContractViolation(f"{self.name}: backward called before forward")
        dx, self.dgamma, self.dbeta = batchnorm_backward(self.state, self._cache, dy)
        return dx

    def parameters(self):
        if not self.state.affine:
            return {}
        return {f"{self.name}.gamma": self.state.gamma, f"{self.name}.beta": self.state.beta}

    def gradients(self):
        if not self.state.affine:
            return {}
        return {f"{self.name}.gamma": self.dgamma, f"{self.name}.beta": self.dbeta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}


# -- activations and losses --------------------------------------------------

def softmax(scores, axis=-1):
    """Max-subtracted softmax (scipy stabilizes internally)."""
    return _scipy_softmax(np.asarray(scores, dtype=DTYPE), axis=axis)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(mask, dy):
    return dy * mask


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true class and its logit gradient."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if labels.shape != (n,):
        raise ConfigurationError(f"Expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= m):
        raise ConfigurationError(f"Label out of range for {m} classes: {labels.min()}..{labels.max()}")
    log_p = _scipy_log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def top_k_accuracy(logits, labels, k):
    k = min(k, logits.shape[1])
    # stable descending order keeps the lower class index first on ties
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((order == np.asarray(labels)[:, None]).any(axis=1).mean())


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckResult:
    numeric: np.ndarray
    analytic: np.ndarray
    rel_errors: np.ndarray
    coords: np.ndarray = field(default=None)

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0


def grad_check(f, point, analytic, h=GRAD_CHECK_STEP, coords=None):
    """Compare ``analytic`` against central differences of ``f``.

    ``point`` is perturbed in place (so it can be a live parameter array) and
    restored afterwards. ``coords`` optionally restricts the check to a subset
    of flat indices.
    """
    flat = point.reshape(-1)
    analytic = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    coords = np.asarray(coords, dtype=np.int64)
    numeric = np.empty(coords.size, dtype=DTYPE)
    for n, i in enumerate(coords):
        original = flat[i]
        flat[i] = original + h
        f_plus = f()
        flat[i] = original - h
        f_minus = f()
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"Objective is not finite around coordinate {i}")
        numeric[n] = (f_plus - f_minus) / (2.0 * h)
    chosen = analytic[coords]
    denom = np.maximum(np.maximum(np.abs(chosen), np.abs(numeric)), GRAD_CHECK_FLOOR)
    rel = np.abs(chosen - numeric) / denom
    logging.getLogger("GradCheck").debug("Checked %s coordinates, max rel err %s", coords.size, rel.max(initial=0.0))
    return GradCheckResult(numeric=numeric, analytic=chosen, rel_errors=rel, coords=coords)


# -- sparse row gradients ----------------------------------------------------

@dataclass
class SparseRows:
    """Sparse (slot index -> gradient row) map with unique, sorted indices."""
    indices: np.ndarray
    rows: np.ndarray

    def __len__(self):
        return int(self.indices.size)

    def to_dense(self, n_slots):
        dense = np.zeros((n_slots,) + self.rows.shape[1:], dtype=DTYPE)
        dense[self.indices] = self.rows
        return dense


def merge_sparse_rows(indices, rows):
    """Sum the rows that share an index (single-writer merge of shard output)."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    rows = np.asarray(rows, dtype=DTYPE).reshape(indices.size, -1)
    unique, inverse = np.unique(indices, return_inverse=True)
    merged = np.zeros((unique.size, rows.shape[1]), dtype=DTYPE)
    np.add.at(merged, inverse.reshape(-1), rows)
    return SparseRows(indices=unique, rows=merged)
