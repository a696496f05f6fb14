import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from communication.server.metrics_recorder import MetricsRecorder
from communication.shared.binary_codec import write_checkpoint, read_checkpoint
from communication.shared.protocol import LIBRARY_VERSION, RECORD_STEP, RECORD_EPOCH, RECORD_EVAL
from experiment_spec import ExperimentSpec
from memorization_models import build_model
from memory_metrics import OperationCounters, AccessMass, StepTimer, kl_to_uniform
from numerics import Rng, STREAM_INIT, STREAM_SHUFFLE, STREAM_REINIT, cross_entropy, top_k_accuracy
from pkm_errors import NonFiniteLossError, CheckpointError, ConfigurationError
from random_label_data import generate
from reinitialization_service import UtilizationState, observe, utilization_fraction, slot_fraction, \
    plateau_reached, reinitialize
from sparse_optimizers import OptimizerSet, make_state

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "final.ckpt"
RESOLVED_CONFIG_FILE = "resolved-config.json"


@dataclass
class TrainingResult:
    final: dict
    epochs_run: int
    steps: int
    records: list = field(default_factory=list, repr=False)
    reinit_reports: list = field(default_factory=list, repr=False)


def build_optimizers(model, opt_spec):
    optimizers = OptimizerSet()
    for name, param in model.parameters().items():
        optimizers.add(name, make_state(opt_spec.kind, param.shape, **opt_spec.hyper(opt_spec.kind)))
    for name, table in model.sparse_tables().items():
        optimizers.add(name, make_state(opt_spec.sparse_kind, table.shape, sparse=True,
                                        **opt_spec.hyper(opt_spec.sparse_kind, sparse=True)))
    return optimizers


def epoch_batches(order, batch_size):
    """Split a permutation into batches; a trailing batch of one sample joins
    the previous one."""
    batches = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def evaluate_model(model, points, labels, batch_size=1024):
    """Eval-mode pass: loss, top-1, top-5 and, for memory models, the
    utilization of a fresh counter state and the KL of the access mass."""
    n = points.shape[0]
    if n == 0:
        raise ConfigurationError("Cannot evaluate an empty split")
    loss_sum, top1_sum, top5_sum = 0.0, 0.0, 0.0
    memory = model.memory
    util = UtilizationState(memory.cfg) if memory is not None else None
    mass = AccessMass(memory.cfg.memory_size) if memory is not None else None
    for start in range(0, n, batch_size):
        xb = points[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits = model.forward(xb, "eval")
        loss, _ = cross_entropy(logits, yb)
        loss_sum += loss * yb.size
        top1_sum += top_k_accuracy(logits, yb, 1) * yb.size
        top5_sum += top_k_accuracy(logits, yb, 5) * yb.size
        if memory is not None:
            observe(util, model.last_memory)
            mass.accumulate(model.last_memory.selected, model.last_memory.weights)
    metrics = {"loss": loss_sum / n, "top1": top1_sum / n, "top5": top5_sum / n}
    if memory is not None:
        metrics["util_frac"] = slot_fraction(util)
        metrics["util_halves"] = utilization_fraction(util).tolist()
        metrics["kl"] = kl_to_uniform(mass)
    return metrics


class TrainingService:
    """Drives one memorization run: epochs of shuffled mini-batches, dense
    Adam on the dense parameters, sparse Adam on the value table, per-epoch
    evaluation, plateau-triggered re-initialization and the final checkpoint."""

    def __init__(self, spec, out_dir=None):
        self._l = logging.getLogger("TrainingService")
        spec.validate()
        self.spec = spec.resolve()
        self.out_dir = out_dir
        self.counters = OperationCounters()
        self.timer = StepTimer()
        self.records = []
        self.reinit_reports = []
        self.epoch = 0
        self.step = 0
        self._recorder = None
        self._last_grad_norms = {}

    def setup(self):
        spec = self.spec
        self._l.info("Setting up %s run, seed %s.", spec.model, spec.seed)
        try:
            self.dataset = generate(spec.dataset.N, spec.dataset.d, spec.dataset.m, spec.seed,
                                    spec.dataset.holdout_fraction)
            self.model = build_model(spec, Rng(spec.seed, STREAM_INIT), self.counters)
            self.optimizers = build_optimizers(self.model, spec.optimizer)
        except Exception as e:
            self._l.error("Failed to set up the training run: %s", e, exc_info=True)
            raise
        self.shuffle_rng = Rng(spec.seed, STREAM_SHUFFLE)
        self.reinit_rng = Rng(spec.seed, STREAM_REINIT)
        self.util = UtilizationState(spec.memory, window=spec.reinit.window) \
            if self.model.memory is not None else None
        self.train_x, self.train_y = self.dataset.split("train")
        if self.out_dir is not None:
            self._recorder = MetricsRecorder(os.path.join(self.out_dir, METRICS_FILE), header=self.header())
            self._recorder.open()
        self._l.info("TrainingService setup complete: %s train samples, %s steps per epoch.",
                     self.train_y.size, spec.steps_per_epoch)

    def header(self):
        spec = self.spec.to_dict()
        # output location does not change the run
        spec.pop("out_dir")
        return {"seed": self.spec.seed, "spec": spec}

    def _record(self, record):
        self.records.append(record)
        if self._recorder is not None:
            self._recorder.write(record)

    def _train_step(self, batch):
        xb = self.train_x[batch]
        yb = self.train_y[batch]
        logits = self.model.forward(xb, "train")
        loss, dlogits = cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"Non-finite loss {loss} at epoch {self.epoch}, step {self.step}",
                diagnostics={"epoch": self.epoch, "step": self.step, "loss": str(loss),
                             "batch_indices": batch.tolist(),
                             "learning_rates": self.optimizers.learning_rates(),
                             "grad_norms": self._last_grad_norms})
        grads = self.model.backward(dlogits)
        if self.util is not None:
            observe(self.util, self.model.last_memory)
        self._last_grad_norms = {name: float(np.linalg.norm(g)) for name, g in grads.dense.items()}
        self.optimizers.step(self.model.parameters(), grads.dense)
        tables = self.model.sparse_tables()
        for name, rows in grads.sparse.items():
            self.optimizers.sparse_step(name, tables[name], rows)
            self.counters.add(sparse_writes=len(rows))
        return loss

    def _maybe_reinitialize(self):
        cfg = self.spec.reinit
        self.util.record_reading(slot_fraction(self.util))
        if not self.spec.reinit_enabled or (cfg.until_epoch is not None and self.epoch > cfg.until_epoch):
            return None
        if not plateau_reached(self.util, cfg, self.step):
            return None
        report = reinitialize(self.model.memory, self.util, self.optimizers, cfg, self.reinit_rng,
                              step=self.step, threshold=cfg.d_k)
        self.reinit_reports.append(report)
        self._record({**report.as_record(), "epoch": self.epoch})
        return report

    def _epoch_record(self, train_loss, report):
        metrics = evaluate_model(self.model, self.train_x, self.train_y, self.spec.eval_batch_size)
        record = {"kind": RECORD_EPOCH, "epoch": self.epoch, "step": self.step, "split": "train",
                  "train_loss": train_loss, **metrics, **self.counters.as_dict(),
                  "lr_scale": self.optimizers.lr_scale}
        if self.util is not None:
            record["train_util"] = slot_fraction(self.util)
            record["replaced"] = 0 if report is None else sum(report.replaced_counts().values())
        if self.spec.record_timings:
            record["ms_per_step"] = self.timer.ms_per_step
        self._record(record)
        if self.dataset.holdout is not None:
            hx, hy = self.dataset.split("holdout")
            self._record({"kind": RECORD_EVAL, "epoch": self.epoch, "step": self.step, "split": "holdout",
                          **evaluate_model(self.model, hx, hy, self.spec.eval_batch_size)})
        return record

    def start_training(self):
        spec = self.spec
        self._l.info("Starting training for up to %s epochs.", spec.epochs)
        try:
            for self.epoch in range(1, spec.epochs + 1):
                losses = []
                order = self.shuffle_rng.permutation(self.train_y.size)
                for batch in epoch_batches(order, spec.batch_size):
                    self.step += 1
                    with self.timer:
                        loss = self._train_step(batch)
                    losses.append(loss)
                    if spec.log_every_steps and self.step % spec.log_every_steps == 0:
                        record = {"kind": RECORD_STEP, "epoch": self.epoch, "step": self.step, "loss": loss}
                        if self.util is not None:
                            record["train_util"] = slot_fraction(self.util)
                        self._record(record)
                report = self._maybe_reinitialize() if self.util is not None else None
                record = self._epoch_record(float(np.mean(losses)), report)
                self._l.info("Epoch %s: loss %.4f, top-1 %.4f, utilization %s.", self.epoch, record["loss"],
                             record["top1"], record.get("util_frac"))
                if self.util is not None and spec.reinit.counter_reset == "epoch":
                    self.util.reset_counters()
                self.optimizers.apply_step_decay(self.epoch, spec.optimizer.lr_decay_every,
                                                 spec.optimizer.lr_decay_gamma)
                if spec.early_stop and record["top1"] == 1.0:
                    self._l.info("Training set fitted exactly at epoch %s; stopping.", self.epoch)
                    break
            return self._finish()
        except NonFiniteLossError as e:
            self._l.error("Training aborted: %s", e, exc_info=True)
            raise
        finally:
            if self._recorder is not None:
                self._recorder.close()

    def _finish(self):
        # the final metrics describe the stored (f32) parameters
        self.model.cast_to_f32()
        final = evaluate_model(self.model, self.train_x, self.train_y, self.spec.eval_batch_size)
        final_record = {"kind": RECORD_EVAL, "epoch": self.epoch, "step": self.step, "split": "final", **final}
        self._record(final_record)
        if self.out_dir is not None:
            save_checkpoint(self.model, self.optimizers, os.path.join(self.out_dir, CHECKPOINT_FILE), self.spec,
                            epoch=self.epoch, step=self.step)
        return TrainingResult(final=final, epochs_run=self.epoch, steps=self.step, records=list(self.records),
                              reinit_reports=list(self.reinit_reports))


def train(spec, out_dir=None):
    service = TrainingService(spec, out_dir)
    service.setup()
    return service.start_training()


# -- checkpoints -------------------------------------------------------------

KEY_TABLES = ("memory.keys1", "memory.keys2")


def _model_tensors(model):
    tensors = {}
    params = model.parameters()
    # query network first, then the remaining layers
    for name in sorted(params, key=lambda n: not n.startswith("memory.")):
        if name not in KEY_TABLES:
            tensors[name] = params[name]
    tensors.update(model.buffers())
    return tensors


def save_checkpoint(model, optimizers, path, spec, epoch=0, step=0):
    """Store parameters and optimizer state in f32; cast the model first for
    a bit-exact round trip."""
    config = {"spec": spec.to_dict(), "epoch": epoch, "step": step, "library_version": LIBRARY_VERSION,
              "lr_scale": optimizers.lr_scale if optimizers is not None else 1.0}
    memory = None
    if model.memory is not None:
        store = model.memory.store
        memory = {"dims": model.memory.cfg.as_dict(), "keys1": store.keys1, "keys2": store.keys2,
                  "values": model.memory.values.slots}
    tensors = _model_tensors(model)
    if optimizers is not None:
        tensors.update({f"optim.{name}": array for name, array in optimizers.state_arrays().items()})
    write_checkpoint(path, config, tensors, memory)


@dataclass
class LoadedCheckpoint:
    spec: ExperimentSpec
    model: object
    optimizers: OptimizerSet
    epoch: int
    step: int


def load_checkpoint(path):
    data = read_checkpoint(path)
    try:
        spec = ExperimentSpec.from_dict(data.config["spec"])
    except (KeyError, ConfigurationError) as e:
        raise CheckpointError(f"Checkpoint config block is not a run config: {e}") from e
    model = build_model(spec, rng=None)
    if model.memory is not None:
        if data.dims is None:
            raise CheckpointError("Memory model checkpoint has no memory segment")
        expected = spec.memory.as_dict()
        for name, value in data.dims.items():
            if name != "alpha" and expected[name] != value:
                raise CheckpointError(f"Memory header {name}={value} does not match the config ({expected[name]})")
        model.memory.store.keys1[...] = data.keys1
        model.memory.store.keys2[...] = data.keys2
        model.memory.values.slots[...] = data.values
    optimizers = build_optimizers(model, spec.optimizer)
    optimizers.lr_scale = data.config.get("lr_scale", 1.0)
    targets = dict(_model_tensors(model))
    targets.update({f"optim.{name}": array for name, array in optimizers.state_arrays().items()})
    missing = sorted(set(targets) - set(data.tensors))
    if missing:
        raise CheckpointError(f"Checkpoint lacks segment {missing[0]}")
    for name, array in targets.items():
        stored = data.tensors[name]
        if stored.shape != array.shape:
            raise CheckpointError(f"Segment {name} has shape {stored.shape}, expected {array.shape}")
        array[...] = stored
    return LoadedCheckpoint(spec=spec, model=model, optimizers=optimizers, epoch=data.config.get("epoch", 0),
                            step=data.config.get("step", 0))


def evaluate(checkpoint, dataset, split="train"):
    """Metrics of a stored model on a dataset in eval mode."""
    loaded = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else checkpoint
    model = loaded.model
    if dataset.d != model.d or dataset.m > model.m:
        raise ConfigurationError(
            f"Dataset (d={dataset.d}, m={dataset.m}) does not match the model (d={model.d}, m={model.m})")
    points, labels = dataset.split(split)
    return evaluate_model(model, points, labels, loaded.spec.eval_batch_size)


# -- sigma sweep -------------------------------------------------------------

def _sweep_run(base_spec, sigma, out_dir):
    spec = replace(base_spec, reinit=replace(base_spec.reinit, sigma_n=sigma), reinit_enabled=True)
    run_dir = None if out_dir is None else os.path.join(out_dir, f"sigma_{sigma:g}")
    result = train(spec, run_dir)
    return {"sigma_n": sigma, "loss": result.final["loss"], "top1": result.final["top1"],
            "util_frac": result.final.get("util_frac"), "epochs": result.epochs_run}


def run_sweep(base_spec, sigma_values, out_dir=None, workers=1):
    """Train once per sigma_n and report the final metrics in sigma order."""
    log = logging.getLogger("SigmaSweep")
    sigmas = sorted(float(s) for s in sigma_values)
    if not sigmas:
        raise ConfigurationError("Sweep needs at least one sigma_n value")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda s: _sweep_run(base_spec, s, out_dir), sigmas))
    top1 = [row["top1"] for row in rows]
    monotone = all(a <= b for a, b in zip(top1, top1[1:]))
    log.info("Sigma sweep over %s: top-1 %s, monotone: %s.", sigmas, top1, monotone)
    return {"rows": rows, "monotone_top1": monotone}


# -- field grids -------------------------------------------------------------

def with_field(spec, dotted, value):
    """Copy of ``spec`` with one (dotted) run-config field replaced."""
    document = spec.to_dict()
    *parents, leaf = dotted.split(".")
    node = document
    for name in parents:
        if not isinstance(node.get(name), dict):
            raise ConfigurationError(f"Unknown config field {dotted}")
        node = node[name]
    if leaf not in node:
        raise ConfigurationError(f"Unknown config field {dotted}")
    node[leaf] = value
    if dotted == "embed_dim":
        document["memory"]["d_in"] = value
    return ExperimentSpec.from_dict(document)


def grid_points(grid):
    """Cartesian product of a {dotted field: [values]} grid, first field slowest."""
    if not grid or any(len(values) == 0 for values in grid.values()):
        raise ConfigurationError("Grid needs at least one field with at least one value")
    names = list(grid)
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid[name] for name in names))]


def _label(point):
    parts = []
    for name, value in point.items():
        text = f"{value:g}" if isinstance(value, float) else str(value).lower()
        parts.append(f"{name.rsplit('.', 1)[-1]}_{text}")
    return "-".join(parts)


def _grid_run(spec, point, out_dir):
    run_dir = None if out_dir is None else os.path.join(out_dir, _label(point))
    result = train(spec, run_dir)
    return {**point, "loss": result.final["loss"], "top1": result.final["top1"],
            "util_frac": result.final.get("util_frac"), "epochs": result.epochs_run,
            "reinits": len(result.reinit_reports)}


def run_grid(base_spec, grid, out_dir=None, workers=1):
    """Train once per point of the grid, e.g. heads x reinit on/off, and report
    the final metrics in grid order."""
    log = logging.getLogger("GridSweep")
    points = grid_points(grid)
    specs = []
    for point in points:
        spec = base_spec
        for name, value in point.items():
            spec = with_field(spec, name, value)
        specs.append(spec)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda job: _grid_run(job[0], job[1], out_dir), zip(specs, points)))
    log.info("Grid over %s: top-1 %s.", list(grid), [row["top1"] for row in rows])
    return {"fields": list(grid), "rows": rows}
