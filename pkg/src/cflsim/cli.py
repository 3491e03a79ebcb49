"""Command-line entry point: ``cflsim run | table | connectivity | bench | init-config``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import arithmetic
from .analysis import connectivity_sweep, write_sweep_csv
from .crypto import NonceRegistry, StampedPayload, ae_decrypt, ae_encrypt, ae_gen, encode_vector
from .errors import ClusterInfeasible, ConfigError, RingInfeasible, RouteInfeasible
from .experiment import (
    DROPOUT_LEVELS,
    TABLE_HEADER,
    ExperimentConfig,
    Seeds,
    build_scenario,
    dropout_table,
    run_experiment,
    write_outputs,
)

log = logging.getLogger("cflsim")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3
BENCH_OPS = ("encrypt", "decrypt", "noise generation", "noise addition", "noise subtraction")
BENCH_HEADER = ["operation", "dim", "payload_bytes", "iterations", "mean_us"]


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.replace(",", " ").split()]


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "protocol", None):
        cfg.protocol = args.protocol
    if getattr(args, "dropout", None) is not None:
        if not 0 <= args.dropout < 100:
            raise ConfigError("--dropout is a percentage in [0, 100)")
        cfg.faults.dropout_fraction = args.dropout / 100.0
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg.seeds = Seeds(s, s + 1, s + 2, s + 3, s + 4, s + 5, s + 6)
        cfg.faults.dropout_seed = s + 7
    if getattr(args, "rounds", None) is not None:
        cfg.rounds = args.rounds
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "plot", False):
        cfg.plot = True
    cfg.validate()
    return cfg


# -- subcommands ------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load_config(args)
    sc = build_scenario(cfg)
    res = run_experiment(cfg, sc)
    paths = write_outputs(res, cfg.out_dir)
    if cfg.plot:
        from . import plotting

        out = Path(cfg.out_dir)
        if sc.topology is not None:
            routes = res.reports[-1].routes if res.reports and cfg.protocol == "cfl" else None
            plotting.plot_topology(sc.topology, sc.plan, out / "topology.png", routes)
        if res.accuracy:
            plotting.plot_accuracy(res.accuracy, res.central_accuracy, out / "accuracy.png")
    s = res.summary()
    print(f"# rounds={s['rounds_run']} converged={s['converged']} accuracy={s['final_accuracy']} "
          f"central={s['central_accuracy']:.4f} messages={s['aggregation_messages']}")
    print(f"# outputs in {paths['rounds'].parent}")
    return EXIT_OK


def cmd_table(args) -> int:
    cfg = _load_config(args)
    levels = [p / 100.0 for p in args.levels] if args.levels else DROPOUT_LEVELS
    rows = dropout_table(cfg, levels, workers=args.workers)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dropout_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(rows)
    w = csv.writer(sys.stdout)
    w.writerow(TABLE_HEADER)
    w.writerows(rows)
    if cfg.plot:
        from . import plotting

        plotting.plot_dropout_table(rows, out / "dropout_table.png")
    return EXIT_OK


def cmd_connectivity(args) -> int:
    rows = connectivity_sweep(args.n, args.pc, args.trials, args.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_sweep_csv(rows, fh)
        if args.plot and rows:
            from . import plotting

            plotting.plot_connectivity(rows, Path(args.out).with_suffix(".png"))
    write_sweep_csv(rows, sys.stdout)
    return EXIT_OK


def bench_rows(dims, iterations: int = 100, arith_name: str = "fixed", seed: int = 0) -> list[list]:
    arith = arithmetic(arith_name)
    rng = np.random.default_rng(seed)
    key = ae_gen(seed=rng)
    rows = []
    for d in dims:
        x = arith.encode_update(rng.normal(size=d), 1)
        payload = StampedPayload(encode_vector(x), 0, 0)
        registry = NonceRegistry()
        env = None

        def enc():
            nonlocal env
            env = ae_encrypt(payload, key, registry.next_nonce(key, 0, 0), registry)

        s = arith.draw_mask(d, 1e3, 1, rng)
        ops = {
            "encrypt": enc,
            "decrypt": lambda: ae_decrypt(env, key),
            "noise generation": lambda: arith.draw_mask(d, 1e3, 1, rng),
            "noise addition": lambda: arith.add(x, s),
            "noise subtraction": lambda: arith.sub(x, s),
        }
        enc()
        for name in BENCH_OPS:
            fn = ops[name]
            t0 = time.perf_counter()
            for _ in range(iterations):
                fn()
            mean_us = (time.perf_counter() - t0) / iterations * 1e6
            nbytes = env.nbytes if name in ("encrypt", "decrypt") else x.nbytes
            rows.append([name, d, nbytes, iterations, f"{mean_us:.3f}"])
    return rows


def cmd_bench(args) -> int:
    rows = bench_rows(args.dims, args.iterations, args.arithmetic, args.seed)
    w = csv.writer(sys.stdout)
    w.writerow(BENCH_HEADER)
    w.writerows(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(BENCH_HEADER)
            cw.writerows(rows)
    return EXIT_OK


def cmd_init_config(args) -> int:
    text = ExperimentConfig().to_json()
    if args.path:
        Path(args.path).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cflsim", description="Clustered federated learning protocol simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_flags(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="derive every seed from this value")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")

    r = sub.add_parser("run", help="train for the configured rounds and write per-round reports")
    scenario_flags(r)
    r.add_argument("--protocol", choices=("cfl", "ppt"))
    r.add_argument("--dropout", type=float, help="per-round dropout percentage")
    r.add_argument("--rounds", type=int)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("table", help="aggregation messages of both protocols across dropout levels")
    scenario_flags(t)
    t.add_argument("--levels", type=_float_list, help="dropout percentages (default 0,1,2,5,10,15)")
    t.add_argument("--workers", type=int, default=1, help="threads, one dropout level each")
    t.set_defaults(func=cmd_table)

    c = sub.add_parser("connectivity", help="Monte Carlo connectivity of key-ring graphs")
    c.add_argument("--n", type=_int_list, required=True, help="cluster sizes, comma separated")
    c.add_argument("--pc", type=_float_list, required=True, help="target connectivity probabilities")
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="also write the CSV here")
    c.add_argument("--plot", action="store_true")
    c.set_defaults(func=cmd_connectivity)

    b = sub.add_parser("bench", help="per-operation timings of the aggregation primitives")
    b.add_argument("--dims", type=_int_list, default=[1000, 10000])
    b.add_argument("--iterations", type=int, default=100)
    b.add_argument("--arithmetic", choices=("fixed", "float"), default="fixed")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("init-config", help="print or write the default config")
    i.add_argument("path", nargs="?")
    i.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RouteInfeasible, ClusterInfeasible, RingInfeasible) as exc:
        print(f"infeasible: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
