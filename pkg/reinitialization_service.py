"""Utilization tracking and re-initialization of dying keys.

Counters record how often each half-key slot (and each flat value slot) is
selected. When utilization plateaus, half-key slots used fewer than ``d_k``
times are overwritten in place by a randomly chosen surviving key of the same
half plus Gaussian noise; the value rows addressed through a replaced slot are
re-drawn and the optimizer state of every touched slot is cleared. Table sizes
never change, so flat indices stay valid.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from communication.shared.protocol import RECORD_REINIT
from memory_metrics import fraction_nonzero
from pkm_errors import ConfigurationError, ContractViolation

VALUE_POLICIES = ("resample", "zero")
COUNTER_POLICIES = ("reinit", "epoch")


@dataclass
class ReinitConfig:
    d_k: int = 1
    eps_d: float = None
    sigma_n: float = 0.1
    trigger_period: int = None
    plateau_delta: float = 0.01
    window: int = 5
    value_reinit: str = "resample"
    max_replacements: int = None
    counter_reset: str = "reinit"
    until_epoch: int = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d_k < 1:
            raise ConfigurationError(f"d_k must be >= 1, got {self.d_k}")
        if self.eps_d is not None and not 0.0 <= self.eps_d <= 1.0:
            raise ConfigurationError(f"eps_d must lie in [0, 1], got {self.eps_d}")
        if self.sigma_n < 0.0:
            raise ConfigurationError(f"sigma_n must be >= 0, got {self.sigma_n}")
        if self.trigger_period is not None and self.trigger_period < 1:
            raise ConfigurationError(f"trigger_period must be >= 1, got {self.trigger_period}")
        if self.window < 2:
            raise ConfigurationError(f"Plateau window needs at least 2 readings, got {self.window}")
        if self.value_reinit not in VALUE_POLICIES:
            raise ConfigurationError(f"value_reinit must be one of {VALUE_POLICIES}, got {self.value_reinit!r}")
        if self.counter_reset not in COUNTER_POLICIES:
            raise ConfigurationError(f"counter_reset must be one of {COUNTER_POLICIES}, got {self.counter_reset!r}")
        if self.max_replacements is not None and self.max_replacements < 1:
            raise ConfigurationError(f"max_replacements must be >= 1, got {self.max_replacements}")
        if self.until_epoch is not None and self.until_epoch < 0:
            raise ConfigurationError(f"until_epoch must be >= 0, got {self.until_epoch}")

    def threshold(self, selections_per_epoch):
        """d_k as a count; the fractional form eps_d wins when given."""
        if self.eps_d is None:
            return self.d_k
        return max(1, math.ceil(self.eps_d * selections_per_epoch))


class UtilizationState:
    def __init__(self, cfg, window=5):
        self.heads = cfg.heads
        self.n1 = cfg.n1
        self.n2 = cfg.n2
        self.counters1 = np.zeros((cfg.heads, cfg.n1), dtype=np.int64)
        self.counters2 = np.zeros((cfg.heads, cfg.n2), dtype=np.int64)
        self.slot_counts = np.zeros(cfg.memory_size, dtype=np.int64)
        self.window = deque(maxlen=window)
        self.step_of_last_reinit = 0
        self.events = 0

    def half(self, j):
        return self.counters1 if j == 1 else self.counters2

    def reset_counters(self):
        self.counters1[...] = 0
        self.counters2[...] = 0
        self.slot_counts[...] = 0
        self.events = 0

    def record_reading(self, fraction):
        self.window.append(float(fraction))


def observe(util, out):
    """Count every selection event of a forward pass, per half and per slot."""
    selected = np.asarray(out.selected, dtype=np.int64)
    if selected.size == 0:
        return
    if selected.ndim != 3 or selected.shape[1] != util.heads:
        raise ContractViolation(f"Selection of shape {selected.shape} does not match {util.heads} heads")
    if selected.min() < 0 or selected.max() >= util.n1 * util.n2:
        raise ContractViolation("Selected index out of range of the value table (corrupt cache)")
    i1, i2 = selected // util.n2, selected % util.n2
    h_idx = np.broadcast_to(np.arange(util.heads)[None, :, None], selected.shape)
    np.add.at(util.counters1, (h_idx, i1), 1)
    np.add.at(util.counters2, (h_idx, i2), 1)
    np.add.at(util.slot_counts, selected.reshape(-1), 1)
    util.events += selected.size


def utilization_fraction(util):
    """#{c_i != 0} / |half| per head and half, shape (heads, 2)."""
    return np.array([[fraction_nonzero(util.counters1[h]), fraction_nonzero(util.counters2[h])]
                     for h in range(util.heads)])


def slot_fraction(util):
    """Share of value slots selected at least once."""
    return fraction_nonzero(util.slot_counts)


def plateau_reached(util, cfg, step):
    period = cfg.trigger_period or 1
    if step - util.step_of_last_reinit < period or len(util.window) < util.window.maxlen:
        return False
    readings = np.array(util.window)
    top = readings.max()
    change = (top - readings.min()) / max(abs(top), 1e-12)
    return bool(change < cfg.plateau_delta)


@dataclass
class ReinitReport:
    step: int
    replaced: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    value_slots_reset: int = 0
    no_survivors: list = field(default_factory=list)
    utilization_before: float = 0.0
    utilization_after: float = 0.0

    @property
    def empty(self):
        return not any(len(v) for v in self.replaced.values())

    def replaced_counts(self):
        return {name: len(idx) for name, idx in self.replaced.items()}

    def as_record(self):
        record = asdict(self)
        record.pop("sources")
        record["replaced"] = self.replaced_counts()
        record["kind"] = RECORD_REINIT
        return record


def reinitialize(memory, util, optimizers, cfg, rng, step=0, threshold=None):
    """Replace under-used half-key slots in place.

    ``optimizers`` is an OptimizerSet (or None) holding states for
    ``memory.keys1``, ``memory.keys2`` and ``memory.values``; key optimizer
    slots are addressed as head * n_j + slot.
    """
    log = logging.getLogger("Reinitialization")
    cfg.validate()
    d_k = cfg.d_k if threshold is None else threshold
    mcfg = memory.cfg
    report = ReinitReport(step=step, utilization_before=slot_fraction(util))
    value_slots = []

    with memory.exclusive_access():
        for h in range(mcfg.heads):
            for j in (1, 2):
                name = f"head{h}.half{j}"
                counts = util.half(j)[h]
                dead = np.flatnonzero(counts < d_k)
                survivors = np.flatnonzero(counts >= d_k)
                report.replaced[name] = []
                if dead.size == 0:
                    continue
                if survivors.size == 0:
                    log.warning("No surviving keys in %s; leaving it untouched.", name)
                    report.no_survivors.append(name)
                    continue
                if cfg.max_replacements is not None:
                    # least utilized first, lower index on ties
                    dead = dead[np.lexsort((dead, counts[dead]))][:cfg.max_replacements]
                    dead.sort()
                sources = survivors[rng.integers(0, survivors.size, size=dead.size)]
                keys = memory.store.half(j)[h]
                noise = rng.normal(0.0, cfg.sigma_n, size=(dead.size, keys.shape[1])) if cfg.sigma_n > 0 \
                    else np.zeros((dead.size, keys.shape[1]))
                keys[dead] = keys[sources] + noise
                counts[dead] = 0
                if optimizers is not None and f"memory.keys{j}" in optimizers.states:
                    optimizers.reset_slots(f"memory.keys{j}", h * keys.shape[0] + dead)
                for slot in dead:
                    value_slots.append(memory.values.cross_section(j, slot))
                report.replaced[name] = dead.tolist()
                report.sources[name] = sources.tolist()

        if value_slots:
            flat = np.unique(np.concatenate(value_slots))
            if cfg.value_reinit == "resample":
                memory.values.slots[flat] = rng.normal(0.0, mcfg.value_scale, size=(flat.size, mcfg.d_v))
            else:
                memory.values.slots[flat] = 0.0
            util.slot_counts[flat] = 0
            if optimizers is not None and "memory.values" in optimizers.states:
                optimizers.reset_slots("memory.values", flat)
            report.value_slots_reset = int(flat.size)

    report.utilization_after = slot_fraction(util)
    util.step_of_last_reinit = step
    util.window.clear()
    if cfg.counter_reset == "reinit":
        util.reset_counters()
    log.info("Re-initialization at step %s replaced %s keys and %s value slots.",
             step, sum(report.replaced_counts().values()), report.value_slots_reset)
    return report
