"""Memory-health diagnostics: access mass, KL-to-uniform, operation counters
and step timing."""
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import rel_entr

from communication.shared.protocol import from_ns_to_ms
from pkm_errors import ConfigurationError

KL_LOG_BASE = "nats"


COUNT_FIELDS = ("score_ops", "value_reads", "sparse_writes", "clamped_norms")


@dataclass
class OperationCounters:
    """Exact, deterministic counts of the work done by the memory layer.

    Updates are serialized by a lock, so one instance can be shared by
    worker threads (the process-wide instance is).
    """
    score_ops: int = 0
    value_reads: int = 0
    sparse_writes: int = 0
    clamped_norms: int = 0
    enabled: bool = True
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def add(self, score_ops=0, value_reads=0, sparse_writes=0, clamped_norms=0):
        if not self.enabled:
            return
        with self._lock:
            self.score_ops += int(score_ops)
            self.value_reads += int(value_reads)
            self.sparse_writes += int(sparse_writes)
            self.clamped_norms += int(clamped_norms)

    def merge(self, other):
        self.add(**other.as_dict())

    def reset(self):
        with self._lock:
            self.score_ops = self.value_reads = self.sparse_writes = self.clamped_norms = 0

    def as_dict(self):
        with self._lock:
            return {name: getattr(self, name) for name in COUNT_FIELDS}


_RUN_COUNTERS = OperationCounters()


def run_counters():
    """The process-wide counter instance memory layers attach to by default."""
    return _RUN_COUNTERS


def op_counters():
    """Snapshot of the process-wide counts."""
    return OperationCounters(**_RUN_COUNTERS.as_dict())


class AccessMass:
    """Softmax weight mass accumulated per flat value slot over a pass."""

    def __init__(self, n_slots):
        self.slots = np.zeros(n_slots, dtype=np.float64)

    @property
    def total(self):
        return float(self.slots.sum())

    def accumulate(self, selected, weights):
        np.add.at(self.slots, np.asarray(selected).reshape(-1), np.asarray(weights).reshape(-1))


def kl_to_uniform(mass):
    """KL(p || uniform) in nats, with 0 ln 0 = 0."""
    slots = mass.slots if isinstance(mass, AccessMass) else np.asarray(mass, dtype=np.float64)
    total = slots.sum()
    if total <= 0.0:
        raise ConfigurationError("KL-to-uniform needs a positive total access mass")
    p = slots / total
    return float(max(rel_entr(p, 1.0 / p.size).sum(), 0.0))


def fraction_nonzero(counts):
    counts = np.asarray(counts)
    return float(np.count_nonzero(counts)) / counts.size if counts.size else 0.0


class StepTimer:
    """Wall-clock accounting of optimizer steps."""

    def __init__(self):
        self._l = logging.getLogger("StepTimer")
        self.total_ns = 0
        self.steps = 0
        self._start = None

    def __enter__(self):
        self._start = time.perf_counter_ns()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.total_ns += time.perf_counter_ns() - self._start
        self.steps += 1

    @property
    def ms_per_step(self):
        return from_ns_to_ms(self.total_ns) / self.steps if self.steps else 0.0

    def reset(self):
        self.total_ns = 0
        self.steps = 0
