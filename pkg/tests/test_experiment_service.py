import os
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

import experiment_service
from communication.server.metrics_recorder import read_metrics
from communication.shared.protocol import LIBRARY_VERSION
from experiment_spec import DatasetSpec
from experiment_service import train, evaluate, evaluate_model, load_checkpoint, save_checkpoint, epoch_batches, \
    build_optimizers, run_sweep, run_grid, grid_points, with_field, METRICS_FILE, CHECKPOINT_FILE
from memorization_models import build_model
from numerics import Rng, STREAM_INIT
from pkm_errors import CheckpointError, NonFiniteLossError, ConfigurationError
from random_label_data import generate
from software.config.config import load_run_config

EXPERIMENTS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "software", "config",
                           "experiments")


def _dataset(spec):
    ds = spec.dataset
    return generate(ds.N, ds.d, ds.m, spec.seed, ds.holdout_fraction)


def test_epoch_batches_fold_a_trailing_singleton():
    sizes = [b.size for b in epoch_batches(np.arange(33), 16)]
    assert sizes == [16, 17]
    assert [b.size for b in epoch_batches(np.arange(5), 16)] == [5]
    assert np.concatenate(epoch_batches(np.arange(40), 16)).tolist() == list(range(40))


def test_run_writes_metrics_and_checkpoint(tiny_spec, tmp_path):
    out = str(tmp_path / "run")
    result = train(tiny_spec, out)
    assert result.epochs_run == 2
    assert result.steps == 2 * tiny_spec.steps_per_epoch
    records, skipped = read_metrics(os.path.join(out, METRICS_FILE))
    assert skipped == 0
    assert records[0]["kind"] == "header"
    assert records[0]["library_version"] == LIBRARY_VERSION
    epochs = [r for r in records if r["kind"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [1, 2]
    for r in epochs:
        assert {"loss", "top1", "top5", "util_frac", "kl", "score_ops"} <= set(r)
        assert "ms_per_step" not in r
        assert r["top5"] >= r["top1"]
    assert records[-1]["split"] == "final"
    assert os.path.exists(os.path.join(out, CHECKPOINT_FILE))


def test_timings_are_recorded_on_request(tiny_spec):
    result = train(tiny_spec.with_overrides(record_timings=True, epochs=1))
    assert "ms_per_step" in [r for r in result.records if r["kind"] == "epoch"][0]


def test_checkpoint_round_trip_is_bit_exact(tiny_spec, tmp_path):
    out = str(tmp_path / "run")
    train(tiny_spec, out)
    path = os.path.join(out, CHECKPOINT_FILE)
    loaded = load_checkpoint(path)
    again = str(tmp_path / "again.ckpt")
    save_checkpoint(loaded.model, loaded.optimizers, again, loaded.spec, loaded.epoch, loaded.step)
    reloaded = load_checkpoint(again)
    for name, array in loaded.model.parameters().items():
        assert reloaded.model.parameters()[name].tobytes() == array.tobytes()
    assert reloaded.model.memory.values.slots.tobytes() == loaded.model.memory.values.slots.tobytes()
    for name, array in loaded.optimizers.state_arrays().items():
        assert_array_equal(reloaded.optimizers.state_arrays()[name], array)
    assert loaded.step == 2 * tiny_spec.steps_per_epoch


def test_evaluate_reproduces_the_final_metrics(tiny_spec, tmp_path):
    out = str(tmp_path / "run")
    result = train(tiny_spec, out)
    metrics = evaluate(os.path.join(out, CHECKPOINT_FILE), _dataset(tiny_spec))
    for name in ("loss", "top1", "top5", "util_frac", "kl"):
        assert metrics[name] == result.final[name]


def test_zero_epochs_stores_the_initial_model(tiny_spec, tmp_path):
    spec = tiny_spec.with_overrides(epochs=0)
    out = str(tmp_path / "run")
    result = train(spec, out)
    assert result.steps == 0
    fresh = build_model(spec.resolve(), Rng(spec.seed, STREAM_INIT))
    fresh.cast_to_f32()
    loaded = load_checkpoint(os.path.join(out, CHECKPOINT_FILE))
    for name, array in fresh.parameters().items():
        assert_array_equal(loaded.model.parameters()[name], array)
    data = _dataset(spec)
    assert evaluate_model(fresh, data.points, data.labels, spec.eval_batch_size) == result.final


def test_wide_mlp_run(tiny_spec, tmp_path):
    out = str(tmp_path / "wide")
    result = train(tiny_spec.with_overrides(model="wide_mlp", wide_mlp_width=16), out)
    assert "util_frac" not in result.final
    loaded = load_checkpoint(os.path.join(out, CHECKPOINT_FILE))
    assert loaded.model.memory is None
    assert evaluate(loaded, _dataset(tiny_spec))["top1"] == result.final["top1"]


@pytest.mark.parametrize("damage", ["truncate", "version", "magic"])
def test_damaged_checkpoints_are_rejected(tiny_spec, tmp_path, damage):
    out = str(tmp_path / "run")
    train(tiny_spec.with_overrides(epochs=1), out)
    path = os.path.join(out, CHECKPOINT_FILE)
    with open(path, "rb") as f:
        payload = bytearray(f.read())
    if damage == "truncate":
        payload = payload[:len(payload) // 2]
    elif damage == "version":
        payload[4] += 1
    else:
        payload[0:4] = b"NOPE"
    with open(path, "wb") as f:
        f.write(payload)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_runs_are_deterministic(tiny_spec, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    train(tiny_spec, a)
    train(tiny_spec, b)
    with open(os.path.join(a, METRICS_FILE), "rb") as fa, open(os.path.join(b, METRICS_FILE), "rb") as fb:
        assert fa.read() == fb.read()
    with open(os.path.join(a, CHECKPOINT_FILE), "rb") as fa, open(os.path.join(b, CHECKPOINT_FILE), "rb") as fb:
        assert fa.read() == fb.read()


def test_seed_changes_the_run(tiny_spec):
    a = train(tiny_spec)
    b = train(tiny_spec.with_overrides(seed=8))
    assert a.final["loss"] != b.final["loss"]


def test_non_finite_loss_aborts_with_diagnostics(tiny_spec, tmp_path, monkeypatch):
    def broken(logits, labels):
        return float("nan"), np.zeros_like(logits)

    monkeypatch.setattr(experiment_service, "cross_entropy", broken)
    with pytest.raises(NonFiniteLossError) as e:
        train(tiny_spec, str(tmp_path / "run"))
    assert e.value.diagnostics["step"] == 1
    assert len(e.value.diagnostics["batch_indices"]) == tiny_spec.batch_size
    assert "memory.values" in e.value.diagnostics["learning_rates"]


def test_plateau_triggers_reinitialization_records(tiny_spec):
    spec = tiny_spec.with_overrides(epochs=4, reinit_enabled=True)
    spec.reinit.plateau_delta = 1.0
    spec.reinit.window = 2
    result = train(spec)
    reinit = [r for r in result.records if r["kind"] == "reinit"]
    assert len(reinit) == len(result.reinit_reports) >= 1
    assert reinit[0]["step"] >= spec.steps_per_epoch
    assert {"replaced", "value_slots_reset", "utilization_before", "utilization_after"} <= set(reinit[0])


def test_reinit_disabled_never_fires(tiny_spec):
    spec = tiny_spec.with_overrides(epochs=3)
    spec.reinit.plateau_delta = 1.0
    spec.reinit.window = 2
    assert train(spec).reinit_reports == []


def test_reinitialization_stops_after_its_last_epoch(tiny_spec):
    spec = tiny_spec.with_overrides(epochs=6, reinit_enabled=True)
    spec.reinit.plateau_delta = 1.0
    spec.reinit.window = 2
    spec.reinit.until_epoch = 3
    result = train(spec)
    reinit = [r for r in result.records if r["kind"] == "reinit"]
    assert reinit
    assert max(r["epoch"] for r in reinit) <= 3


def test_untrained_model_is_near_chance(tiny_spec):
    spec = tiny_spec.with_overrides(dataset=DatasetSpec(N=2000, d=4, m=10), epochs=0,
                                    eval_batch_size=500)
    final = train(spec).final
    assert abs(final["top1"] - 0.1) <= 0.02
    assert final["top5"] >= final["top1"]


def test_holdout_split_is_evaluated(tiny_spec):
    spec = tiny_spec.with_overrides(dataset=DatasetSpec(N=64, d=4, m=3, holdout_fraction=0.25))
    result = train(spec)
    holdout = [r for r in result.records if r.get("split") == "holdout"]
    assert len(holdout) == spec.epochs


def test_optimizers_follow_the_parameter_layout(tiny_spec):
    model = build_model(tiny_spec, Rng(0))
    optimizers = build_optimizers(model, tiny_spec.optimizer)
    assert set(optimizers.states) == set(model.parameters()) | {"memory.values"}
    assert optimizers.states["memory.values"].sparse
    assert optimizers.states["memory.values"].lr_multiplier == 10.0
    assert optimizers.states["memory.keys1"].shape == model.parameters()["memory.keys1"].shape


def test_sigma_sweep_reports_rows_in_order(tiny_spec, tmp_path):
    report = run_sweep(tiny_spec.with_overrides(epochs=1), [0.5, 0.01], str(tmp_path), workers=2)
    assert [row["sigma_n"] for row in report["rows"]] == [0.01, 0.5]
    assert os.path.exists(os.path.join(str(tmp_path), "sigma_0.01", METRICS_FILE))
    assert isinstance(report["monotone_top1"], bool)


def test_heads_by_reinit_grid_runs_every_point(tiny_spec, tmp_path):
    base = tiny_spec.with_overrides(epochs=1, memory=replace(tiny_spec.memory, d_q=8))
    report = run_grid(base, {"memory.heads": [1, 2], "reinit_enabled": [False, True]}, str(tmp_path), workers=2)
    assert report["fields"] == ["memory.heads", "reinit_enabled"]
    points = [(row["memory.heads"], row["reinit_enabled"]) for row in report["rows"]]
    assert points == [(1, False), (1, True), (2, False), (2, True)]
    assert all(0.0 <= row["top1"] <= 1.0 for row in report["rows"])
    assert os.path.exists(os.path.join(str(tmp_path), "heads_2-reinit_enabled_true", METRICS_FILE))


def test_grid_fields_are_validated_before_training(tiny_spec):
    with pytest.raises(ConfigurationError, match="memory.width"):
        run_grid(tiny_spec, {"memory.width": [1]})
    with pytest.raises(ConfigurationError):
        run_grid(tiny_spec, {"memory.heads": [3]})
    with pytest.raises(ConfigurationError):
        grid_points({"seed": []})


def test_with_field_keeps_the_embedding_consistent(tiny_spec):
    spec = with_field(tiny_spec, "embed_dim", 16)
    assert spec.memory.d_in == 16
    assert with_field(tiny_spec, "reinit.sigma_n", 0.5).reinit.sigma_n == 0.5


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Full-size runs shared by the memorization checks, keyed by (config, seed)."""
    out = tmp_path_factory.mktemp("desk")
    cache = {}

    def run(name, seed=0):
        if (name, seed) not in cache:
            spec = load_run_config(os.path.join(EXPERIMENTS, f"{name}.json")).with_overrides(seed=seed)
            cache[(name, seed)] = train(spec, str(out / f"{name}_{seed}"))
        return cache[(name, seed)]
    return run


@pytest.mark.slow
def test_multi_head_memory_fits_random_labels(desk_runs):
    assert desk_runs("desk_h8").final["top1"] >= 0.99


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_reinitialization_beats_plain_single_head(desk_runs, seed):
    plain = desk_runs("desk_h1", seed).final
    with_reinit = desk_runs("desk_h1_reinit", seed).final
    assert with_reinit["top1"] > plain["top1"]
    assert with_reinit["util_frac"] >= 2.0 * plain["util_frac"]


@pytest.mark.slow
def test_wide_mlp_falls_short_of_the_memory(desk_runs):
    assert desk_runs("wide_mlp").final["top1"] <= desk_runs("desk_h8").final["top1"] - 0.05
