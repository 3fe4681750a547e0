"""Turn a ``RunConfig`` into datasets, networks, training runs and output files."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, set_keys
from .core import HiddenLayer, NetworkSpec, SimGrid, init_params
from .datasets import (augment_freq_shift, load_shd, mtsxor_generate, read_cache,
                       split_train_valid)
from .hierarchy import ConvSchedule, TauSchedule, sample_network_taus
from .training import DataSplits, Metrics, OptimSpec, evaluate, tau_stats, train

log = logging.getLogger(__name__)

CSV_FIELDS = ["trial", "seed", "epoch", "split", "loss", "accuracy", "lr"]


def trial_seed(cfg: RunConfig, trial: int) -> int:
    return cfg.seed + trial


def build_data(cfg: RunConfig, seed: int) -> DataSplits:
    """Train/valid/test splits for one trial."""
    if cfg.task == "mtsxor":
        m = cfg.data.mtsxor
        train_full = mtsxor_generate(m, cfg.data.n_train, seed=[m.seed, seed, 0])
        test = mtsxor_generate(m, cfg.data.n_test, seed=[m.seed, seed, 1])
    elif cfg.task in ("shd", "ssc"):
        if not cfg.data.shd_dir:
            raise FileNotFoundError(f"task {cfg.task} needs data.shd_dir")
        grid = SimGrid(cfg.data.dt, cfg.data.T)
        train_full = load_shd(os.path.join(cfg.data.shd_dir, f"{cfg.task}_train.h5"), grid)
        test = load_shd(os.path.join(cfg.data.shd_dir, f"{cfg.task}_test.h5"), grid)
    else:
        if not cfg.data.cache_train or not cfg.data.cache_test:
            raise FileNotFoundError("task custom-cache needs data.cache_train and data.cache_test")
        train_full = read_cache(cfg.data.cache_train, cfg.data.dt)
        test = read_cache(cfg.data.cache_test, cfg.data.dt, n_classes=train_full.n_classes)
    if cfg.data.test_as_valid:
        # leaks test data into model selection; only for comparison with such reports
        return DataSplits(train_full, test, test)
    train, valid = split_train_valid(train_full, cfg.data.valid_frac, seed)
    return DataSplits(train, valid, test)


def build_spec(cfg: RunConfig, data: DataSplits) -> NetworkSpec:
    ds = data.train
    n = cfg.network
    H = n.n_hidden
    if n.layer_kind == "conv":
        h = cfg.hierarchy
        kernels, dilations = ConvSchedule(h.mean_kernel, h.delta_ker, h.mean_dilation,
                                          h.delta_dil, H).kernels_and_dilations()
        hidden = tuple(HiddenLayer(n.hidden_size, "conv", int(k), int(d))
                       for k, d in zip(kernels, dilations))
    else:
        hidden = tuple(HiddenLayer(n.hidden_size) for _ in range(H))
    n_out = ds.n_classes
    return NetworkSpec(ds.grid, ds.channels, hidden, n_out, n.tau_out)


def tau_schedule(cfg: RunConfig, spec: NetworkSpec) -> TauSchedule:
    h = cfg.hierarchy
    return TauSchedule(h.shape, h.tau_mu, h.delta_tau, h.steepness, h.centering,
                       spec.n_hidden, spec.grid.dt)


def initial_params(cfg: RunConfig, spec: NetworkSpec, seed: int):
    rng = np.random.default_rng([seed, 2])
    means = tau_schedule(cfg, spec).means()
    taus = sample_network_taus(means, [h.size for h in spec.hidden], rng, spec.grid.dt)
    return init_params(spec, taus, rng, cfg.network.init_gain,
                       tau_scaled=cfg.network.init_scaling == "tau")


def optim_spec(cfg: RunConfig, seed: int) -> OptimSpec:
    o = cfg.optim
    fields = {k: getattr(o, k) for k in OptimSpec.__dataclass_fields__}
    fields["seed"] = seed
    return OptimSpec(**fields)


@dataclass
class TrialResult:
    trial: int
    seed: int
    spec: NetworkSpec
    params: list
    metrics: Metrics


def run_trial(cfg: RunConfig, trial: int) -> TrialResult:
    seed = trial_seed(cfg, trial)
    data = build_data(cfg, seed)
    spec = build_spec(cfg, data)
    params = initial_params(cfg, spec, seed)
    augment = augment_freq_shift if cfg.data.augment else None
    best, metrics = train(spec, optim_spec(cfg, seed), data, params, cfg.optim.loss, augment)
    return TrialResult(trial, seed, spec, best, metrics)


def metrics_csv(results) -> str:
    """CSV text of all per-epoch rows; column set depends only on layer count."""
    n_layers = max(r.spec.n_hidden for r in results)
    header = CSV_FIELDS + [f"tau_median_l{i + 1}" for i in range(n_layers)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in results:
        for row in r.metrics.rows:
            meds = [repr(m) for m in row.tau_median] + [""] * (n_layers - len(row.tau_median))
            w.writerow([r.trial, r.seed, row.epoch, row.split, repr(row.loss),
                        repr(row.accuracy), repr(row.lr)] + meds)
    return buf.getvalue()


def quartiles(values):
    v = np.asarray(values, dtype=np.float64)
    q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75),
            "values": [float(x) for x in v]}


def summarize(cfg: RunConfig, results) -> dict:
    trials = []
    for r in results:
        m = r.metrics
        trials.append({
            "trial": r.trial, "seed": r.seed, "test_accuracy": m.test_accuracy,
            "test_loss": m.test_loss, "best_epoch": m.best_epoch,
            "best_valid_accuracy": m.best_valid_accuracy,
            "init_test_accuracy": next((row.accuracy for row in m.rows
                                        if row.epoch == 0 and row.split == "test"), None),
            "tau": tau_stats(r.params) if cfg.optim.train_tau else None,
            "wall_clock_s": m.wall_clock,
        })
    summary = {
        "task": cfg.task,
        "n_trials": len(results),
        "epochs": cfg.optim.epochs,
        "test_accuracy": quartiles([t["test_accuracy"] for t in trials]),
        "trials": trials,
        "config": cfg.to_dict(),
    }
    if cfg.optim.train_tau:
        per_layer = [[t["tau"][l]["median"] for t in trials]
                     for l in range(results[0].spec.n_hidden)]
        summary["tau_median_per_layer"] = [quartiles(v) for v in per_layer]
    return summary


def write_outputs(cfg: RunConfig, results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        f.write(metrics_csv(results))
    summary = summarize(cfg, results)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    for r in results:
        save_checkpoint(os.path.join(out_dir, f"trial{r.trial}.tsnn"), r.spec, r.params,
                        r.metrics.optim_state,
                        meta={"trial": r.trial, "seed": r.seed, "config": cfg.to_dict(),
                              "test_accuracy": r.metrics.test_accuracy,
                              "test_loss": r.metrics.test_loss})
    return summary


def run_config(cfg: RunConfig, out_dir=None):
    results = [run_trial(cfg, i) for i in range(cfg.n_trials)]
    summary = write_outputs(cfg, results, out_dir or cfg.out_dir)
    return results, summary


def evaluate_checkpoint(cfg: RunConfig, spec, params, seed: int):
    data = build_data(cfg, seed)
    if spec.input_size != data.test.channels or spec.grid.T != data.test.grid.T:
        raise ValueError("checkpoint network does not match the configured dataset")
    acc, loss = evaluate(spec, params, data.test, cfg.optim.loss)
    return acc, loss


# ---------------------------------------------------------------------------
# sweeps


def sweep_cells(cfg: RunConfig, grid: dict):
    """Cross product of swept values as ``(assignment, config)`` pairs."""
    keys = list(grid)
    cells = []
    for values in itertools.product(*(grid[k] for k in keys)):
        assignment = dict(zip(keys, values))
        c = set_keys(cfg, {**assignment, "sweep": {}, "baseline": {}})
        cells.append((assignment, c))
    return cells


def _cell_dirname(i, assignment):
    parts = [f"{k.split('.')[-1]}={v}" for k, v in assignment.items()]
    return f"cell{i:03d}_" + "_".join(parts).replace("/", "-")


def _run_cell(args):
    c, out = args
    results, summary = run_config(c, out)
    return summary["test_accuracy"]


def run_sweep(cfg: RunConfig, grid: dict, out_dir, jobs=1, baseline=None):
    """Run every cell (plus an optional baseline cell) and tabulate accuracies."""
    if not grid or len(grid) > 2:
        raise ValueError("a sweep varies one or two keys")
    cells = sweep_cells(cfg, grid)
    jobs_list = [(c, os.path.join(out_dir, _cell_dirname(i, a))) for i, (a, c) in
                 enumerate(cells)]
    base_cfg = None
    if baseline:
        base_cfg = set_keys(cfg, {**baseline, "sweep": {}, "baseline": {}})
        jobs_list.append((base_cfg, os.path.join(out_dir, "baseline")))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            accs = list(ex.map(_run_cell, jobs_list))
    else:
        accs = [_run_cell(j) for j in jobs_list]
    base_acc = accs.pop() if base_cfg is not None else None
    rows = []
    for (assignment, _), acc in zip(cells, accs):
        row = dict(assignment)
        row.update({"median": acc["median"], "q25": acc["q25"], "q75": acc["q75"],
                    "n": len(acc["values"])})
        if base_acc is not None:
            row["delta_vs_baseline"] = acc["median"] - base_acc["median"]
        rows.append(row)
    table = {"keys": list(grid), "rows": rows,
             "baseline": None if base_acc is None else {"assignment": baseline, **base_acc}}
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.json"), "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
    cols = list(grid) + ["median", "q25", "q75", "n"] + (
        ["delta_vs_baseline"] if base_acc is not None else [])
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return table
