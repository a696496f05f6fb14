import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from memory_metrics import AccessMass, OperationCounters, StepTimer, kl_to_uniform, fraction_nonzero, run_counters, \
    op_counters
from pkm_errors import ConfigurationError


def test_kl_of_uniform_mass_is_zero():
    assert kl_to_uniform([1.0, 1.0, 1.0, 1.0]) == pytest.approx(0.0, abs=1e-15)


def test_kl_of_a_point_mass():
    assert kl_to_uniform([0.0, 3.0, 0.0, 0.0]) == pytest.approx(math.log(4.0), rel=1e-12)


def test_kl_of_half_the_slots():
    assert kl_to_uniform([2.0, 2.0, 0.0, 0.0]) == pytest.approx(math.log(2.0), rel=1e-12)


def test_kl_needs_mass():
    with pytest.raises(ConfigurationError):
        kl_to_uniform(np.zeros(3))


def test_access_mass_accumulates_weights():
    mass = AccessMass(4)
    mass.accumulate(np.array([[[0, 2]], [[2, 3]]]), np.array([[[0.75, 0.25]], [[0.5, 0.5]]]))
    assert mass.slots.tolist() == [0.75, 0.0, 0.75, 0.5]
    assert mass.total == pytest.approx(2.0)
    assert kl_to_uniform(mass) > 0.0


def test_fraction_nonzero():
    assert fraction_nonzero([5, 0, 3, 0, 1]) == pytest.approx(0.6)
    assert fraction_nonzero([]) == 0.0


def test_operation_counters():
    counters = OperationCounters()
    counters.add(score_ops=10, value_reads=2)
    other = OperationCounters(score_ops=5, sparse_writes=3)
    counters.merge(other)
    assert counters.as_dict() == {"score_ops": 15, "value_reads": 2, "sparse_writes": 3, "clamped_norms": 0}
    counters.reset()
    assert counters.score_ops == 0

    disabled = OperationCounters(enabled=False)
    disabled.add(score_ops=7)
    assert disabled.score_ops == 0


def test_step_timer():
    timer = StepTimer()
    assert timer.ms_per_step == 0.0
    for _ in range(3):
        with timer:
            sum(range(100))
    assert timer.steps == 3
    assert timer.ms_per_step >= 0.0
    timer.reset()
    assert timer.steps == 0


def test_process_wide_counters_snapshot():
    before = op_counters()
    run_counters().add(score_ops=3)
    after = op_counters()
    assert after.score_ops == before.score_ops + 3
    after.add(score_ops=100)
    assert op_counters().score_ops == before.score_ops + 3


def test_counters_shared_by_worker_threads():
    counters = OperationCounters()

    def work(_):
        for _ in range(1000):
            counters.add(score_ops=1, sparse_writes=2)

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(work, range(8)))
    assert counters.score_ops == 8000
    assert counters.sparse_writes == 16000
