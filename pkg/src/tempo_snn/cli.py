"""Command line entry point ``tempo-snn``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 gradient check beyond tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, config_from_dict, load_config, parse_config, \
    parse_value, set_key, set_keys

log = logging.getLogger("tempo_snn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _key_value(text):
    if "=" not in text:
        raise UsageError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("", "<defaults>")
    return _overrides(cfg, args)


def _overrides(cfg, args):
    changes = {}
    for item in args.set or []:
        k, v = _key_value(item)
        changes[k] = parse_value(v)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return set_keys(cfg, changes)


def cmd_train(args):
    cfg = _load(args)
    from .experiment import run_config
    _, summary = run_config(cfg)
    acc = summary["test_accuracy"]
    print(f"test accuracy median {acc['median']:.4f} (q25 {acc['q25']:.4f}, "
          f"q75 {acc['q75']:.4f}) over {summary['n_trials']} trial(s); "
          f"outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    from .experiment import evaluate_checkpoint
    spec, params, _, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _load(args)
    else:
        if "config" not in meta:
            raise UsageError("checkpoint carries no config; pass --config")
        cfg = _overrides(config_from_dict(meta["config"]), args)
    seed = args.seed if args.seed is not None else meta.get("seed", cfg.seed)
    acc, loss = evaluate_checkpoint(cfg, spec, params, seed)
    if args.json:
        print(json.dumps({"checkpoint": str(args.checkpoint), "seed": seed,
                          "test_accuracy": acc, "test_loss": loss}, sort_keys=True))
    else:
        print(f"test accuracy {acc!r} loss {loss!r}")
    return EXIT_OK


def _parse_grid(items):
    grid = {}
    for item in items:
        k, v = _key_value(item)
        vals = parse_value(f"[{v}]")
        if not vals:
            raise UsageError(f"empty value list for {k}")
        grid[k] = vals
    return grid


def cmd_sweep(args):
    from .experiment import run_sweep
    cfg = _load(args)
    grid = _parse_grid(args.grid) if args.grid else dict(cfg.sweep)
    if not grid:
        raise UsageError("nothing to sweep; give --grid KEY=V1,V2 or a 'sweep' section")
    if len(grid) > 2:
        raise UsageError("a sweep varies one or two keys")
    baseline = dict(cfg.baseline)
    for item in args.baseline or []:
        k, v = _key_value(item)
        baseline[k] = parse_value(v)
    for k, vals in grid.items():  # validate every value before any run starts
        for v in vals:
            set_key(cfg, k, v)
    table = run_sweep(cfg, grid, cfg.out_dir, jobs=args.jobs, baseline=baseline or None)
    for row in table["rows"]:
        cell = ", ".join(f"{k}={row[k]}" for k in table["keys"])
        extra = f" delta {row['delta_vs_baseline']:+.4f}" if "delta_vs_baseline" in row else ""
        print(f"{cell}: median {row['median']:.4f}{extra}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck
    cfg = _load(args)
    gc = cfg.gradcheck
    report = run_gradcheck(gc, seed=cfg.seed, beta=cfg.optim.surrogate_beta,
                           train_tau=gc.train_tau)
    for c in report.checks:
        print(f"net {c.index:2d} {c.layer_kind:5s} {c.loss:16s} weights {c.err_weights:.3e} "
              f"tau {c.err_tau:.3e} {'ok' if c.passed else 'FAIL'}")
    print(f"max relative error: weights {report.max_err_weights:.3e} (tol {gc.tol_weights:g}), "
          f"tau {report.max_err_tau:.3e} (tol {gc.tol_tau:g})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_gen_mtsxor(args):
    from .datasets import mtsxor_generate, write_cache
    cfg = _load(args)
    m = cfg.data.mtsxor
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    # same streams as a training run's trial 0, so cached and regenerated data agree
    for name, n, stream in (("train", cfg.data.n_train, 0), ("test", cfg.data.n_test, 1)):
        ds = mtsxor_generate(m, n, seed=[m.seed, cfg.seed, stream])
        path = os.path.join(out, f"{name}.tsnc")
        write_cache(ds, path)
        print(f"wrote {path}: {n} samples, T={ds.grid.T}, {ds.channels} channels")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck, "gen-mtsxor": cmd_gen_mtsxor}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="base seed (trial i uses seed + i)")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. hierarchy.delta_tau=0.5")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="tempo-snn", description="Spiking networks with hierarchical "
                "time constants, trained by BPTT.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train n_trials networks")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on test data")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--json", action="store_true")
    sw = sub.add_parser("sweep", parents=[common], help="cross-product of config values")
    sw.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    sw.add_argument("--baseline", action="append", metavar="KEY=VALUE",
                    help="extra reference cell; rows report the difference to it")
    sub.add_parser("gradcheck", parents=[common], help="BPTT vs finite differences")
    sub.add_parser("gen-mtsxor", parents=[common], help="write MTS-XOR cache files")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("tempo-snn: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"tempo-snn: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, ValueError, FloatingPointError, RuntimeError) as e:
        print(f"tempo-snn: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
