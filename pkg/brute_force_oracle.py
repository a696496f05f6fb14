"""Brute-force references for the memory layer and the optimizers.

Nothing here imports the memory layer's scoring or selection code: the full
n1 x n2 grid is scored exhaustively and sorted, and the query network is
re-evaluated from the raw parameter arrays. Oracles are excluded from the
operation counters.
"""
import math
from dataclasses import dataclass

import numpy as np

FLOOR = 1e-12


@dataclass
class FullGridScores:
    """Combined scores of every key pair for one query; entry (i1, i2) is
    score1(i1) + score2(i2)."""
    grid: np.ndarray

    @property
    def evaluations(self):
        return int(self.grid.size)

    def ranked(self):
        flat_scores = self.grid.reshape(-1)
        flat_index = np.arange(flat_scores.size)
        # primary key: descending score, secondary: ascending flat index
        return np.lexsort((flat_index, -flat_scores))


def _half_scores(q, keys, distance, alpha):
    out = np.empty(keys.shape[0], dtype=np.float64)
    q_norm = max(math.sqrt(float(np.dot(q, q))), FLOOR)
    for i, key in enumerate(keys):
        dot = float(np.dot(q, key))
        if distance == "dot":
            out[i] = dot
        else:
            k_norm = max(math.sqrt(float(np.dot(key, key))), FLOOR)
            out[i] = (q_norm ** alpha) * (k_norm ** alpha) * dot / (q_norm * k_norm)
    return out


def full_grid(q1, q2, K1, K2, distance="dot", alpha=1.0):
    s1 = _half_scores(np.asarray(q1, dtype=np.float64), np.asarray(K1, dtype=np.float64), distance, alpha)
    s2 = _half_scores(np.asarray(q2, dtype=np.float64), np.asarray(K2, dtype=np.float64), distance, alpha)
    return FullGridScores(grid=s1[:, None] + s2[None, :])


def naive_topk(q1, q2, K1, K2, k, distance="dot", alpha=1.0):
    """Exhaustive top-k over all n1*n2 key pairs: (flat indices, scores)."""
    scores = full_grid(q1, q2, K1, K2, distance, alpha)
    if k > scores.grid.size:
        raise ValueError(f"k={k} exceeds the {scores.grid.size} keys of the full grid")
    order = scores.ranked()[:k]
    return order.astype(np.int64), scores.grid.reshape(-1)[order]


def _query(memory, x, mode):
    W = memory.query_network.projection.W
    b = memory.query_network.projection.b
    bn = memory.query_network.bn.state
    z = np.asarray(x, dtype=np.float64) @ W.T + b
    if mode == "train":
        mean, var = z.mean(axis=0), z.var(axis=0)
    else:
        mean, var = bn.running_mean, bn.running_var
    return (z - mean) / np.sqrt(var + bn.eps) * bn.gamma + bn.beta


def naive_forward(memory, x, mode="eval"):
    """m(x) by exhaustive scoring. Train mode uses batch statistics without
    touching the running statistics."""
    cfg = memory.cfg
    q = _query(memory, x, mode)
    half = cfg.half_dim
    values = memory.values.slots
    out = np.zeros((q.shape[0], cfg.d_v), dtype=np.float64)
    selected = np.zeros((q.shape[0], cfg.heads, cfg.k), dtype=np.int64)
    for b in range(q.shape[0]):
        for h in range(cfg.heads):
            chunk = q[b, h * 2 * half:(h + 1) * 2 * half]
            idx, scores = naive_topk(chunk[:half], chunk[half:], memory.store.keys1[h], memory.store.keys2[h],
                                     cfg.k, cfg.distance, cfg.alpha)
            shifted = np.exp(scores - scores.max())
            w = shifted / shifted.sum()
            for weight, slot in zip(w, idx):
                out[b] += weight * values[slot]
            selected[b, h] = idx
    return out, selected


# -- optimizer trajectory references -----------------------------------------

def scripted_adam(x0, grad_fn, steps, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-8):
    """Scalar Adam trajectory written out step by step."""
    x, m, v = float(x0), 0.0, 0.0
    trajectory = [x]
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        trajectory.append(x)
    return trajectory


def scripted_sgd(x0, grad_fn, steps, lr=0.1, momentum=0.0, weight_decay=0.0):
    x, velocity = float(x0), 0.0
    trajectory = [x]
    for _ in range(steps):
        g = grad_fn(x) + weight_decay * x
        velocity = momentum * velocity + g
        x = x - lr * velocity
        trajectory.append(x)
    return trajectory
