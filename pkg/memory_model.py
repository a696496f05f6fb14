"""Product-key memory layer.

A query network (projection + batch normalization) maps the input to q(x).
The query is split into ``heads`` slices and every head slice into two halves
that are scored against the head's two half-key tables. The k best keys of each
half form a k x k candidate grid whose combined score is the sum of the two half
scores; the k best candidates are softmax-weighted and their value rows summed.
All heads share one value table and their outputs are summed.

Flat value index of the key pair (i1, i2) is ``i1 * n2 + i2``. Ties are broken
by the lower index everywhere.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict

import numpy as np

from numerics import DTYPE, STORAGE_DTYPE, BN_EPS, BN_MOMENTUM, Linear, BatchNorm1d, SparseRows, softmax, \
    merge_sparse_rows
from memory_metrics import run_counters
from pkm_errors import ConfigurationError, ContractViolation

NORM_FLOOR = 1e-12
DISTANCES = ("dot", "cosine")


@dataclass
class MemoryConfig:
    d_in: int
    d_q: int
    d_v: int
    n1: int
    n2: int
    k: int
    heads: int = 1
    distance: str = "dot"
    alpha: float = 1.0
    value_init_scale: float = None
    batchnorm_affine: bool = True
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d_in", "d_q", "d_v", "n1", "n2", "k", "heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"Memory config field {name} must be >= 1, got {getattr(self, name)}")
        if self.d_q % 2:
            raise ConfigurationError(f"Query dimension d_q must be even, got {self.d_q}")
        if self.d_q % (2 * self.heads):
            raise ConfigurationError(
                f"d_q={self.d_q} cannot be split into {self.heads} heads of two equal halves")
        if self.k > self.n1 or self.k > self.n2:
            raise ConfigurationError(f"k={self.k} exceeds a half-key set (n1={self.n1}, n2={self.n2})")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"Unknown distance {self.distance!r}, expected one of {DISTANCES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"Cosine exponent alpha must lie in [0, 1], got {self.alpha}")
        if self.value_init_scale is not None and self.value_init_scale < 0:
            raise ConfigurationError(f"value_init_scale must be >= 0, got {self.value_init_scale}")

    @property
    def half_dim(self):
        return self.d_q // (2 * self.heads)

    @property
    def memory_size(self):
        return self.n1 * self.n2

    @property
    def value_scale(self):
        return 1.0 / np.sqrt(self.d_v) if self.value_init_scale is None else self.value_init_scale

    def as_dict(self):
        return asdict(self)


class ProductKeyStore:
    """Per head, two half-key tables: keys1 (h, n1, half_dim), keys2 (h, n2, half_dim)."""

    def __init__(self, cfg, rng=None):
        shape1 = (cfg.heads, cfg.n1, cfg.half_dim)
        shape2 = (cfg.heads, cfg.n2, cfg.half_dim)
        if rng is None:
            self.keys1 = np.zeros(shape1, dtype=DTYPE)
            self.keys2 = np.zeros(shape2, dtype=DTYPE)
        else:
            bound = 1.0 / np.sqrt(cfg.half_dim)
            self.keys1 = rng.uniform(-bound, bound, size=shape1)
            self.keys2 = rng.uniform(-bound, bound, size=shape2)

    def half(self, j):
        """Key tables of half j (1 or 2), shape (heads, n_j, half_dim)."""
        return self.keys1 if j == 1 else self.keys2


class ValueTable:
    def __init__(self, cfg, rng=None):
        self.n1 = cfg.n1
        self.n2 = cfg.n2
        if rng is None:
            self.slots = np.zeros((cfg.memory_size, cfg.d_v), dtype=DTYPE)
        else:
            self.slots = rng.normal(0.0, cfg.value_scale, size=(cfg.memory_size, cfg.d_v))

    def flat_index(self, i1, i2):
        return np.asarray(i1) * self.n2 + np.asarray(i2)

    def decompose(self, flat):
        flat = np.asarray(flat)
        return flat // self.n2, flat % self.n2

    def cross_section(self, j, slot):
        """Flat indices addressed through key ``slot`` of half ``j``."""
        if j == 1:
            return slot * self.n2 + np.arange(self.n2)
        return np.arange(self.n1) * self.n2 + slot


class QueryNetwork:
    """Projection d_in -> d_q followed by batch normalization."""

    def __init__(self, cfg, rng=None):
        self.projection = Linear(cfg.d_in, cfg.d_q, rng=rng, name="memory.query")
        self.bn = BatchNorm1d(cfg.d_q, momentum=cfg.bn_momentum, eps=cfg.bn_eps, affine=cfg.batchnorm_affine,
                              name="memory.bn")

    def forward(self, x, mode):
        return self.bn.forward(self.projection.forward(x), mode)

    def backward(self, dq):
        return self.projection.backward(self.bn.backward(dq))

    def parameters(self):
        return {**self.projection.parameters(), **self.bn.parameters()}

    def gradients(self):
        return {**self.projection.gradients(), **self.bn.gradients()}


# -- scoring and selection kernels -------------------------------------------

@dataclass
class ScoreAux:
    """What the backward pass needs to differentiate a block of scores."""
    dots: np.ndarray
    factor: np.ndarray = None
    q_norm: np.ndarray = None
    k_norm: np.ndarray = None
    clamped: int = 0


def head_scores(Q, K, distance="dot", alpha=1.0):
    """Score queries Q (B, h, d) against per-head keys K (h, n, d) -> (B, h, n)."""
    dots = np.einsum("bhd,hnd->bhn", Q, K)
    if distance == "dot":
        return dots, ScoreAux(dots=dots)
    q_raw = np.linalg.norm(Q, axis=-1)
    k_raw = np.linalg.norm(K, axis=-1)
    clamped = int((q_raw < NORM_FLOOR).sum() + (k_raw < NORM_FLOOR).sum())
    q_norm = np.maximum(q_raw, NORM_FLOOR)[..., None]
    k_norm = np.maximum(k_raw, NORM_FLOOR)[None, ...]
    # |q|^a |k|^a cos = q.k |q|^(a-1) |k|^(a-1)
    factor = q_norm ** (alpha - 1.0) * k_norm ** (alpha - 1.0)
    return dots * factor, ScoreAux(dots=dots, factor=factor, q_norm=q_norm, k_norm=k_norm, clamped=clamped)


def head_scores_backward(ds, Q, K, aux, distance="dot", alpha=1.0):
    """Gradients of sum(ds * scores) w.r.t. Q (B, h, d) and K (h, n, d)."""
    if distance == "dot":
        return np.einsum("bhn,hnd->bhd", ds, K), np.einsum("bhn,bhd->hnd", ds, Q)
    g = ds * aux.factor
    gp = g * aux.dots
    dQ = np.einsum("bhn,hnd->bhd", g, K) + (alpha - 1.0) * gp.sum(axis=-1)[..., None] * Q / aux.q_norm ** 2
    k_norm = aux.k_norm[0]
    dK = np.einsum("bhn,bhd->hnd", g, Q) + (alpha - 1.0) * gp.sum(axis=0)[..., None] * K / (k_norm ** 2)[..., None]
    return dQ, dK


def topk_desc(scores, k):
    """Indices and values of the k largest entries along the last axis,
    descending, lower index first on ties."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return order, np.take_along_axis(scores, order, axis=-1)


def combine_candidates(i1, s1, i2, s2, k, n2):
    """Top-k of the k x k candidate grid with additive scores; ties resolve to
    the lower flat index."""
    cand = s1[..., :, None] + s2[..., None, :]
    flat = i1[..., :, None] * n2 + i2[..., None, :]
    shape = cand.shape[:-2] + (cand.shape[-2] * cand.shape[-1],)
    cand = cand.reshape(shape)
    flat = flat.reshape(shape)
    order = np.lexsort((flat, -cand), axis=-1)[..., :k]
    return np.take_along_axis(flat, order, axis=-1), np.take_along_axis(cand, order, axis=-1)


def score(q_half, key, distance="dot", alpha=1.0):
    q_half = np.asarray(q_half, dtype=DTYPE)
    key = np.asarray(key, dtype=DTYPE)
    if q_half.shape != key.shape:
        raise ConfigurationError(f"Score dimension mismatch: {q_half.shape} vs {key.shape}")
    s, _ = head_scores(q_half[None, None, :], key[None, None, :], distance, alpha)
    return float(s[0, 0, 0])


def half_topk(q_half, keys, k, distance="dot", alpha=1.0):
    keys = np.asarray(keys, dtype=DTYPE)
    if k > keys.shape[0]:
        raise ConfigurationError(f"k={k} exceeds the {keys.shape[0]} keys of the half table")
    s, _ = head_scores(np.asarray(q_half, dtype=DTYPE)[None, None, :], keys[None], distance, alpha)
    idx, vals = topk_desc(s[0, 0], k)
    return [(int(i), float(v)) for i, v in zip(idx, vals)]


def combine_topk(top1, top2, k, n2):
    i1 = np.array([i for i, _ in top1], dtype=np.int64)
    s1 = np.array([s for _, s in top1], dtype=DTYPE)
    i2 = np.array([i for i, _ in top2], dtype=np.int64)
    s2 = np.array([s for _, s in top2], dtype=DTYPE)
    flat, vals = combine_candidates(i1, s1, i2, s2, k, n2)
    return [(int(f), float(v)) for f, v in zip(flat, vals)]


# -- the layer ---------------------------------------------------------------

@dataclass
class MemoryCache:
    mode: str
    q: np.ndarray
    aux1: ScoreAux
    aux2: ScoreAux
    i1: np.ndarray
    i2: np.ndarray
    gathered: np.ndarray


@dataclass
class MemoryOutput:
    m: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    cache: MemoryCache = field(default=None, repr=False)


@dataclass
class MemoryGrads:
    values: SparseRows
    keys1: np.ndarray
    keys2: np.ndarray
    selected1: list
    selected2: list
    query: dict
    dx: np.ndarray

    def key_rows(self, j, head):
        """Sparse rows of half ``j`` for one head; unselected keys carry no row."""
        dense = self.keys1 if j == 1 else self.keys2
        idx = (self.selected1 if j == 1 else self.selected2)[head]
        return SparseRows(indices=idx, rows=dense[head, idx])


class ProductKeyMemory:
    def __init__(self, cfg, rng=None, counters=None):
        self._l = logging.getLogger("ProductKeyMemory")
        cfg.validate()
        self.cfg = cfg
        self.query_network = QueryNetwork(cfg, rng)
        self.store = ProductKeyStore(cfg, rng)
        self.values = ValueTable(cfg, rng)
        self.counters = run_counters() if counters is None else counters
        self._exclusive = threading.Lock()
        self._last = None
        self._l.debug("Memory of %s slots (%s x %s), %s heads, k=%s, %s distance.",
                      cfg.memory_size, cfg.n1, cfg.n2, cfg.heads, cfg.k, cfg.distance)

    @contextmanager
    def exclusive_access(self):
        if not self._exclusive.acquire(blocking=False):
            raise ContractViolation("Memory store is already held exclusively (re-initialization in progress)")
        try:
            yield self
        finally:
            self._exclusive.release()

    def _check_not_held(self):
        if self._exclusive.locked():
            raise ContractViolation("Memory store accessed while held exclusively")

    def forward(self, x, mode="train"):
        self._check_not_held()
        cfg = self.cfg
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != cfg.d_in:
            raise ConfigurationError(f"Memory input must be (batch, {cfg.d_in}), got {x.shape}")
        B = x.shape[0]
        q = self.query_network.forward(x, mode).reshape(B, cfg.heads, 2, cfg.half_dim)
        q1 = q[:, :, 0, :]
        q2 = q[:, :, 1, :]
        s1, aux1 = head_scores(q1, self.store.keys1, cfg.distance, cfg.alpha)
        s2, aux2 = head_scores(q2, self.store.keys2, cfg.distance, cfg.alpha)
        top1, top1_s = topk_desc(s1, cfg.k)
        top2, top2_s = topk_desc(s2, cfg.k)
        selected, scores = combine_candidates(top1, top1_s, top2, top2_s, cfg.k, cfg.n2)
        weights = softmax(scores, axis=-1)
        gathered = self.values.slots[selected]
        m = np.einsum("bhk,bhkd->bd", weights, gathered)

        clamped = aux1.clamped + aux2.clamped
        if clamped:
            self._l.warning("Clamped %s near-zero norms in cosine scoring.", clamped)
        # half scores plus the k x k candidate grid actually formed
        score_ops = s1.size + s2.size + top1_s.size * top2_s.shape[-1]
        self.counters.add(score_ops=score_ops, value_reads=selected.size,
                          clamped_norms=clamped)

        i1, i2 = self.values.decompose(selected)
        cache = MemoryCache(mode=mode, q=q, aux1=aux1, aux2=aux2, i1=i1, i2=i2, gathered=gathered)
        out = MemoryOutput(m=m, selected=selected, weights=weights, scores=scores, cache=cache)
        self._last = out
        return out

    def backward(self, dm, out=None):
        """Backpropagate dL/dm through values, keys and the query network."""
        self._check_not_held()
        out = self._last if out is None else out
        if out is None or out.cache is None:
            raise ContractViolation("Memory backward called before forward")
        cache = out.cache
        if cache.mode != "train":
            raise ContractViolation("Memory backward needs a train-mode forward cache")
        cfg = self.cfg
        dm = np.asarray(dm, dtype=DTYPE)
        B = dm.shape[0]
        w = out.weights

        value_rows = w[..., None] * dm[:, None, None, :]
        values = merge_sparse_rows(out.selected, value_rows.reshape(-1, cfg.d_v))

        dw = np.einsum("bd,bhkd->bhk", dm, cache.gathered)
        dc = w * (dw - (w * dw).sum(axis=-1, keepdims=True))

        b_idx = np.arange(B)[:, None, None]
        h_idx = np.arange(cfg.heads)[None, :, None]
        ds1 = np.zeros((B, cfg.heads, cfg.n1), dtype=DTYPE)
        ds2 = np.zeros((B, cfg.heads, cfg.n2), dtype=DTYPE)
        np.add.at(ds1, (b_idx, h_idx, cache.i1), dc)
        np.add.at(ds2, (b_idx, h_idx, cache.i2), dc)

        q1 = cache.q[:, :, 0, :]
        q2 = cache.q[:, :, 1, :]
        dq1, dk1 = head_scores_backward(ds1, q1, self.store.keys1, cache.aux1, cfg.distance, cfg.alpha)
        dq2, dk2 = head_scores_backward(ds2, q2, self.store.keys2, cache.aux2, cfg.distance, cfg.alpha)
        dq = np.stack([dq1, dq2], axis=2).reshape(B, cfg.d_q)
        dx = self.query_network.backward(dq)

        selected1 = [np.unique(cache.i1[:, h, :]) for h in range(cfg.heads)]
        selected2 = [np.unique(cache.i2[:, h, :]) for h in range(cfg.heads)]
        return MemoryGrads(values=values, keys1=dk1, keys2=dk2, selected1=selected1, selected2=selected2,
                           query=self.query_network.gradients(), dx=dx)

    def parameters(self):
        """Dense parameters (query network and key tables)."""
        half = self.cfg.half_dim
        return {**self.query_network.parameters(),
                "memory.keys1": self.store.keys1.reshape(-1, half),
                "memory.keys2": self.store.keys2.reshape(-1, half)}

    @staticmethod
    def gradients(grads):
        """Dense gradients keyed like ``parameters()``."""
        return {**grads.query,
                "memory.keys1": grads.keys1.reshape(-1, grads.keys1.shape[-1]),
                "memory.keys2": grads.keys2.reshape(-1, grads.keys2.shape[-1])}

    def buffers(self):
        return self.query_network.bn.buffers()

    def cast_to_f32(self):
        """Round every parameter and buffer to float32 precision in place."""
        arrays = list(self.parameters().values()) + list(self.buffers().values()) + [self.values.slots]
        for array in arrays:
            array[...] = array.astype(STORAGE_DTYPE)
