from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from memory_metrics import OperationCounters
from memory_model import MemoryConfig, ProductKeyMemory
from numerics import Rng, SparseRows
from pkm_errors import ConfigurationError, ContractViolation
from reinitialization_service import ReinitConfig, UtilizationState, observe, utilization_fraction, \
    slot_fraction, plateau_reached, reinitialize
from sparse_optimizers import OptimizerSet, AdamState, sparse_step, dense_step


def _memory(n1, n2, k=1, d_q=2, d_v=2, heads=1, seed=0):
    cfg = MemoryConfig(d_in=2, d_q=d_q, d_v=d_v, n1=n1, n2=n2, k=k, heads=heads)
    return ProductKeyMemory(cfg, Rng(seed), counters=OperationCounters(enabled=False))


def _optimizers(memory):
    cfg = memory.cfg
    optimizers = OptimizerSet()
    optimizers.add("memory.keys1", AdamState(shape=(cfg.heads * cfg.n1, cfg.half_dim)))
    optimizers.add("memory.keys2", AdamState(shape=(cfg.heads * cfg.n2, cfg.half_dim)))
    optimizers.add("memory.values", AdamState(shape=(cfg.memory_size, cfg.d_v), sparse=True, lr_multiplier=10.0))
    return optimizers


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ReinitConfig(d_k=0)
    with pytest.raises(ConfigurationError):
        ReinitConfig(sigma_n=-0.1)
    with pytest.raises(ConfigurationError):
        ReinitConfig(window=1)
    with pytest.raises(ConfigurationError):
        ReinitConfig(value_reinit="keep")


def test_threshold_from_fraction():
    assert ReinitConfig(d_k=3).threshold(1000) == 3
    assert ReinitConfig(eps_d=1e-6).threshold(40960) == 1
    assert ReinitConfig(eps_d=0.01).threshold(1000) == 10
    assert ReinitConfig(eps_d=0.0).threshold(1000) == 1


def test_observe_counts_each_half_and_slot():
    memory = _memory(2, 3)
    util = UtilizationState(memory.cfg)
    observe(util, SimpleNamespace(selected=np.array([[[0, 4]]])))
    assert_array_equal(util.counters1[0], [1, 1])
    assert_array_equal(util.counters2[0], [1, 1, 0])
    assert_array_equal(np.flatnonzero(util.slot_counts), [0, 4])
    assert util.events == 2


def test_observe_rejects_corrupt_selection():
    memory = _memory(2, 3)
    util = UtilizationState(memory.cfg)
    with pytest.raises(ContractViolation):
        observe(util, SimpleNamespace(selected=np.array([[[6]]])))
    with pytest.raises(ContractViolation):
        observe(util, SimpleNamespace(selected=np.array([[0, 1]])))


def test_counts_are_conserved(small_memory):
    util = UtilizationState(small_memory.cfg)
    for seed in range(3):
        observe(util, small_memory.forward(np.random.default_rng(seed).normal(size=(7, 3)), "train"))
    expected = 3 * 7 * small_memory.cfg.k
    for h in range(small_memory.cfg.heads):
        assert util.counters1[h].sum() == expected
        assert util.counters2[h].sum() == expected
    assert util.slot_counts.sum() == expected * small_memory.cfg.heads


def test_utilization_fraction_example():
    memory = _memory(5, 5)
    util = UtilizationState(memory.cfg)
    util.counters1[0] = [5, 0, 3, 0, 1]
    util.counters2[0] = [1, 1, 1, 1, 1]
    assert_array_equal(utilization_fraction(util), [[0.6, 1.0]])
    util.slot_counts[:5] = 1
    assert slot_fraction(util) == pytest.approx(0.2)


def test_plateau_detection():
    memory = _memory(2, 2)
    cfg = ReinitConfig(trigger_period=10, plateau_delta=0.01, window=3)
    util = UtilizationState(memory.cfg, window=cfg.window)
    for _ in range(3):
        util.record_reading(0.3)
    assert plateau_reached(util, cfg, step=20)
    assert not plateau_reached(util, cfg, step=9)
    util.record_reading(0.1)
    util.record_reading(0.2)
    util.record_reading(0.3)
    assert not plateau_reached(util, cfg, step=20)
    for _ in range(3):
        util.record_reading(0.301)
    assert plateau_reached(util, cfg, step=20)


def test_plateau_waits_for_a_full_window():
    memory = _memory(2, 2)
    cfg = ReinitConfig(trigger_period=1, plateau_delta=0.01, window=5)
    util = UtilizationState(memory.cfg, window=cfg.window)
    for _ in range(4):
        util.record_reading(0.3)
        assert not plateau_reached(util, cfg, step=10)
    util.record_reading(0.3)
    assert plateau_reached(util, cfg, step=10)


def test_hand_trace_replaces_dead_key_and_its_values():
    memory = _memory(2, 3)
    optimizers = _optimizers(memory)
    keys1 = memory.parameters()["memory.keys1"]
    dense_step(optimizers.states["memory.keys1"], keys1, np.ones_like(keys1))
    sparse_step(optimizers.states["memory.values"], memory.values.slots,
                SparseRows(indices=np.arange(6), rows=np.ones((6, 2))))
    survivor = memory.store.keys1[0, 0].copy()
    values_before = memory.values.slots.copy()

    util = UtilizationState(memory.cfg)
    util.counters1[0] = [5, 0]
    util.counters2[0] = [2, 1, 3]
    report = reinitialize(memory, util, optimizers, ReinitConfig(sigma_n=0.1), Rng(3), step=17)

    assert report.replaced == {"head0.half1": [1], "head0.half2": []}
    assert report.sources["head0.half1"] == [0]
    assert report.value_slots_reset == 3
    assert not np.array_equal(memory.store.keys1[0, 1], survivor)
    assert_array_equal(memory.store.keys1[0, 0], survivor)
    assert memory.values.slots[:3].tobytes() == values_before[:3].tobytes()
    assert not np.array_equal(memory.values.slots[3:], values_before[3:])

    values_state = optimizers.states["memory.values"]
    assert_array_equal(values_state.m[3:], 0.0)
    assert_array_equal(values_state.v[3:], 0.0)
    assert_array_equal(values_state.steps, [1, 1, 1, 0, 0, 0])
    keys_state = optimizers.states["memory.keys1"]
    assert_array_equal(keys_state.m[1], 0.0)
    assert_array_equal(keys_state.steps, [1, 0])
    assert util.step_of_last_reinit == 17
    assert util.counters1.sum() == 0


def test_zero_noise_copies_the_source():
    memory = _memory(3, 3)
    util = UtilizationState(memory.cfg)
    util.counters1[0] = [0, 4, 0]
    util.counters2[0] = 1
    reinitialize(memory, util, None, ReinitConfig(sigma_n=0.0), Rng(1))
    assert_array_equal(memory.store.keys1[0, 0], memory.store.keys1[0, 1])
    assert_array_equal(memory.store.keys1[0, 2], memory.store.keys1[0, 1])


def test_noise_has_the_configured_spread():
    memory = _memory(101, 101, d_q=200, d_v=1)
    util = UtilizationState(memory.cfg)
    util.counters1[0, 0] = 1
    util.counters2[0] = 1
    survivor = memory.store.keys1[0, 0].copy()
    reinitialize(memory, util, None, ReinitConfig(sigma_n=0.1), Rng(5))
    noise = memory.store.keys1[0, 1:] - survivor
    assert noise.size == 10_000
    assert 0.09 <= noise.std() <= 0.11


def test_zero_value_policy():
    memory = _memory(2, 2)
    util = UtilizationState(memory.cfg)
    util.counters1[0] = [1, 1]
    util.counters2[0] = [0, 1]
    reinitialize(memory, util, None, ReinitConfig(value_reinit="zero"), Rng(0))
    assert_array_equal(memory.values.slots[[0, 2]], 0.0)
    assert np.all(memory.values.slots[[1, 3]] != 0.0)


def test_nothing_to_replace_gives_an_empty_report():
    memory = _memory(2, 2)
    util = UtilizationState(memory.cfg)
    util.counters1[0] = 1
    util.counters2[0] = 1
    keys_before = memory.store.keys1.copy()
    report = reinitialize(memory, util, None, ReinitConfig(), Rng(0))
    assert report.empty
    assert report.value_slots_reset == 0
    assert_array_equal(memory.store.keys1, keys_before)


def test_half_without_survivors_is_left_alone():
    memory = _memory(2, 2)
    util = UtilizationState(memory.cfg)
    util.counters2[0] = 1
    keys_before = memory.store.keys1.copy()
    report = reinitialize(memory, util, None, ReinitConfig(), Rng(0))
    assert report.no_survivors == ["head0.half1"]
    assert_array_equal(memory.store.keys1, keys_before)


def test_max_replacements_prefers_least_used():
    memory = _memory(5, 2)
    util = UtilizationState(memory.cfg)
    util.counters1[0] = [9, 2, 0, 1, 0]
    util.counters2[0] = 5
    report = reinitialize(memory, util, None, ReinitConfig(d_k=3, max_replacements=2), Rng(0))
    assert report.replaced["head0.half1"] == [2, 4]
    assert report.as_record()["replaced"] == {"head0.half1": 2, "head0.half2": 0}
    assert report.as_record()["kind"] == "reinit"


def test_reinit_needs_exclusive_access():
    memory = _memory(2, 2)
    util = UtilizationState(memory.cfg)
    with memory.exclusive_access():
        with pytest.raises(ContractViolation):
            reinitialize(memory, util, None, ReinitConfig(), Rng(0))


def test_epoch_counter_policy_keeps_counts():
    memory = _memory(2, 2)
    util = UtilizationState(memory.cfg)
    util.counters1[0] = [0, 3]
    util.counters2[0] = [3, 3]
    util.record_reading(0.5)
    reinitialize(memory, util, None, ReinitConfig(counter_reset="epoch"), Rng(0))
    assert_array_equal(util.counters1[0], [0, 3])
    assert len(util.window) == 0
