"""Command-line front end of the memorization harness.

Subcommands: train, evaluate, bench-topk, oracle-check, export, sweep and
generate-data. Exit codes: 0 success, 1 oracle divergence, 2 invalid
configuration, 3 runtime failure.
"""
import argparse
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from brute_force_oracle import naive_topk, naive_forward, full_grid
from communication.server.metrics_recorder import read_metrics
from communication.shared.protocol import LIBRARY_VERSION, RECORD_EPOCH, SERIES_FIELDS, encode_json
from experiment_service import train, evaluate, load_checkpoint, run_sweep, run_grid, METRICS_FILE, \
    RESOLVED_CONFIG_FILE
from memory_metrics import OperationCounters
from memory_model import MemoryConfig, ProductKeyMemory, DISTANCES
from numerics import Rng
from pkm_errors import ConfigurationError, ContractViolation, NonFiniteLossError, CheckpointError, \
    OracleDivergence
from random_label_data import generate, dump_dataset, load_dataset
from software.config.config import load_run_config, load_config, config_logger

EXIT_OK = 0
EXIT_DIVERGENCE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

FORWARD_TOLERANCE = 1e-9


def worker_count():
    raw = os.environ.get("PKM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"PKM_THREADS must be an integer, got {raw!r}")


def write_json(path, document):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_json(document))


# -- train / evaluate --------------------------------------------------------

def cmd_train(args):
    spec = load_run_config(args.config)
    out_dir = args.out or spec.out_dir
    spec = spec.with_overrides(seed=args.seed, out_dir=out_dir)
    write_json(os.path.join(out_dir, RESOLVED_CONFIG_FILE),
               {"library_version": LIBRARY_VERSION, "seed": spec.seed, "spec": spec.resolve().to_dict()})
    try:
        result = train(spec, out_dir)
    except NonFiniteLossError as e:
        write_json(os.path.join(out_dir, "diagnostic.json"), {"error": str(e), **e.diagnostics})
        raise
    print(encode_json({"epochs": result.epochs_run, "steps": result.steps, **result.final}).decode())
    return EXIT_OK


def cmd_evaluate(args):
    loaded = load_checkpoint(args.checkpoint)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        ds = loaded.spec.dataset
        dataset = generate(ds.N, ds.d, ds.m, loaded.spec.seed, ds.holdout_fraction)
    metrics = evaluate(loaded, dataset, args.split)
    print(encode_json(metrics).decode())
    return EXIT_OK


# -- bench-topk --------------------------------------------------------------

def parse_sizes(text):
    """``4096,16384`` (perfect squares) or ``64x64,128x128``."""
    sizes = []
    for item in text.split(","):
        item = item.strip().lower()
        if "x" in item:
            n1, n2 = (int(v) for v in item.split("x"))
        else:
            total = int(item)
            root = math.isqrt(total)
            if root * root != total:
                raise ConfigurationError(f"Size {total} is not a perfect square; pass n1xn2 instead")
            n1 = n2 = root
        sizes.append((n1, n2))
    return sizes


def bench_topk(sizes, k, repeats=3, batch=64, half_dim=16, seed=0):
    rows = []
    for n1, n2 in sizes:
        cfg = MemoryConfig(d_in=2 * half_dim, d_q=2 * half_dim, d_v=1, n1=n1, n2=n2, k=k)
        counters = OperationCounters()
        memory = ProductKeyMemory(cfg, Rng(seed), counters=counters)
        x = Rng(seed, 1).normal(size=(batch, cfg.d_in))

        start = time.perf_counter_ns()
        for _ in range(repeats):
            out = memory.forward(x, "eval")
        two_stage_ns = (time.perf_counter_ns() - start) / (repeats * batch)
        score_ops = counters.score_ops // (repeats * batch)

        q = out.cache.q[:, 0]
        keys1, keys2 = memory.store.keys1[0], memory.store.keys2[0]
        start = time.perf_counter_ns()
        for b in range(batch):
            naive_topk(q[b, 0], q[b, 1], keys1, keys2, k)
        naive_ns = (time.perf_counter_ns() - start) / batch
        naive_ops = full_grid(q[0, 0], q[0, 1], keys1, keys2).evaluations
        rows.append({"size": n1 * n2, "n1": n1, "n2": n2, "k": k, "two_stage_ops": score_ops,
                     "naive_ops": naive_ops, "two_stage_ns_per_query": two_stage_ns,
                     "naive_ns_per_query": naive_ns})
    return pd.DataFrame(rows)


def cmd_bench_topk(args):
    frame = bench_topk(parse_sizes(args.sizes), args.k, args.repeats)
    if args.out:
        frame.to_csv(args.out, index=False)
    else:
        frame.to_csv(sys.stdout, index=False)
    return EXIT_OK


# -- oracle-check ------------------------------------------------------------

def random_oracle_config(rng):
    heads = int((1, 2, 4)[rng.integers(0, 3)])
    n1, n2 = (int(v) for v in rng.integers(4, 65, size=2))
    k = int(rng.integers(1, min(16, n1, n2) + 1))
    half = int(rng.integers(1, 9))
    distance = DISTANCES[int(rng.integers(0, 2))]
    alpha = float(rng.uniform(0.0, 1.0)) if distance == "cosine" else 1.0
    return MemoryConfig(d_in=int(rng.integers(2, 9)), d_q=2 * heads * half, d_v=int(rng.integers(1, 5)),
                        n1=n1, n2=n2, k=k, heads=heads, distance=distance, alpha=alpha)


def oracle_trial(seed, trial, batch=3):
    """One random configuration checked against the brute-force references;
    raises OracleDivergence with a minimal reproduction."""
    rng = Rng(seed, trial + 1)
    cfg = random_oracle_config(rng)
    memory = ProductKeyMemory(cfg, rng, counters=OperationCounters(enabled=False))
    x = rng.normal(size=(batch, cfg.d_in))
    out = memory.forward(x, "eval")
    expected, expected_selected = naive_forward(memory, x, "eval")

    def reproduction(b, h):
        q = out.cache.q[b, h]
        return {"trial": trial, "seed": seed, "config": cfg.as_dict(), "query": q.reshape(-1).tolist(),
                "keys1": memory.store.keys1[h].tolist(), "keys2": memory.store.keys2[h].tolist()}

    mismatch = np.argwhere(out.selected != expected_selected)
    if mismatch.size:
        b, h, _ = mismatch[0]
        raise OracleDivergence(f"Trial {trial}: two-stage selection differs from the full grid",
                               reproduction(b, h))
    diff = float(np.abs(out.m - expected).max())
    if diff > FORWARD_TOLERANCE:
        raise OracleDivergence(f"Trial {trial}: forward differs from the exhaustive forward by {diff}",
                               reproduction(0, 0))
    return diff


def oracle_check(trials, seed, workers=1):
    """Run all trials; the divergence of the lowest failing trial wins."""
    def run(trial):
        try:
            return oracle_trial(seed, trial), None
        except OracleDivergence as e:
            return None, e

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, range(trials)))
    for diff, error in results:
        if error is not None:
            raise error
    return max((diff for diff, _ in results), default=0.0)


def cmd_oracle_check(args):
    log = logging.getLogger("OracleCheck")
    try:
        worst = oracle_check(args.trials, args.seed, worker_count())
    except OracleDivergence as e:
        path = os.path.join(args.out, "oracle-repro.json")
        write_json(path, e.reproduction)
        log.error("%s; reproduction written to %s", e, path)
        print(f"divergence: {e} (reproduction: {path})", file=sys.stderr)
        return EXIT_DIVERGENCE
    print(f"{args.trials} trials agree with the brute-force oracle (max forward diff {worst:.3e})")
    return EXIT_OK


# -- export ------------------------------------------------------------------

def epoch_frame(records):
    epochs = [r for r in records if r.get("kind") == RECORD_EPOCH]
    return pd.json_normalize(epochs) if epochs else pd.DataFrame()


def export_run(run_dir, fmt, out_dir):
    records, skipped = read_metrics(os.path.join(run_dir, METRICS_FILE))
    name = os.path.basename(os.path.normpath(run_dir))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt == "csv":
        frame = pd.json_normalize([r for r in records if r.get("kind") != "header"])
        path = os.path.join(out_dir, f"{name}.csv")
        frame.to_csv(path, index=False)
        written.append(path)
    elif fmt == "plotdata":
        frame = epoch_frame(records)
        for metric in SERIES_FIELDS:
            if metric not in frame:
                continue
            path = os.path.join(out_dir, f"{name}.{metric}.dat")
            frame[["epoch", metric]].to_csv(path, sep=" ", index=False, header=False)
            written.append(path)
    elif fmt == "png":
        written.append(plot_run(epoch_frame(records), name, out_dir))
    else:
        raise ConfigurationError(f"Unknown export format {fmt!r}")
    return written, skipped


def plot_run(frame, name, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for metric in ("top1", "top5"):
        if metric in frame:
            axes[0].plot(frame["epoch"], frame[metric], label=metric)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("accuracy")
    axes[0].legend()
    if "util_frac" in frame:
        axes[1].plot(frame["epoch"], frame["util_frac"], label="utilization")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("fraction of slots used")
    fig.suptitle(name)
    path = os.path.join(out_dir, f"{name}.png")
    fig.savefig(path)
    plt.close(fig)
    return path


def cmd_export(args):
    total_skipped = 0
    for run_dir in args.run:
        written, skipped = export_run(run_dir, args.format, args.out or run_dir)
        total_skipped += skipped
        for path in written:
            print(path)
    if total_skipped:
        print(f"skipped {total_skipped} corrupt metrics lines", file=sys.stderr)
    return EXIT_OK


# -- sweep / generate-data ---------------------------------------------------

def flatten_grid(tree, prefix=""):
    """{a: {b: [..]}} -> {"a.b": [..]}; every leaf must be a list of values."""
    flat = {}
    for name, value in tree.items():
        dotted = f"{prefix}{name}"
        if isinstance(value, dict):
            flat.update(flatten_grid(value, f"{dotted}."))
        elif isinstance(value, list):
            flat[dotted] = list(value)
        else:
            raise ConfigurationError(f"Grid field {dotted} must list its values, got {value!r}")
    return flat


def cmd_sweep(args):
    grid = load_config(args.grid)
    if "base" not in grid or ("sigma_n" not in grid and "grid" not in grid):
        raise ConfigurationError(f"Sweep grid {args.grid} needs 'base' and either 'sigma_n' or 'grid'")
    spec = load_run_config(grid.get_string("base"))
    spec = spec.with_overrides(seed=args.seed)
    if "grid" in grid:
        report = run_grid(spec, flatten_grid(grid.get_config("grid").as_plain_ordered_dict()), args.out,
                          worker_count())
    else:
        report = run_sweep(spec, grid.get_list("sigma_n"), args.out, worker_count())
    if args.out:
        write_json(os.path.join(args.out, "sweep.json"), report)
    print(encode_json(report).decode())
    return EXIT_OK


def cmd_generate_data(args):
    dataset = generate(args.N, args.d, args.m, args.seed)
    dump_dataset(dataset, args.out)
    print(f"{dataset.N} points, {dataset.duplicates} duplicates -> {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pkm", description="Product-key memory memorization harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset fixture; regenerated from the checkpoint config if omitted")
    p.add_argument("--split", default="train", choices=("train", "holdout"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-topk", help="count and time two-stage vs exhaustive top-k")
    p.add_argument("--sizes", default="4096,16384")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_topk)

    p = sub.add_parser("oracle-check", help="compare the memory layer against brute force")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("export", help="convert metrics.jsonl for plotting")
    p.add_argument("--run", required=True, nargs="+")
    p.add_argument("--format", default="csv", choices=("csv", "plotdata", "png"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="train once per sigma_n or per point of a HOCON field grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generate-data", help="dump a random-label dataset fixture")
    p.add_argument("--N", type=int, default=4096)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)
    return parser


def setup_logging():
    try:
        config_logger()
    except ConfigurationError:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging()
    log = logging.getLogger("PkmCli")
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"{e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, CheckpointError, ContractViolation, RuntimeError, OSError) as e:
        log.error("Command %s failed: %s", args.command, e, exc_info=True)
        print(f"{e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
