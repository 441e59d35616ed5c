"""Command line: ``transnas run ...`` and ``transnas export-surrogate ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .baselines import cell_genotypes, random_cells
from .harness import ConfigError, KINDS, make_config, read_config_file, run_experiment
from .oracles import OracleError, Surrogate, cell_spaces
from .space import Genotype, validate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="transnas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run an experiment with replicas")
    r.add_argument("--experiment", choices=KINDS)
    r.add_argument("--config", help="key = value file; flags override it")
    r.add_argument("--seed-base", type=int)
    r.add_argument("--replicas", type=int)
    r.add_argument("--budget", type=int, help="trials per replica (full-space phase for transfer)")
    r.add_argument("--joint-budget", type=int, help="transfer: trials on the subspaces")
    r.add_argument("--out")
    r.add_argument("--window", type=int)
    r.add_argument("--threshold", type=float, help="fraction of the best validation value")
    r.add_argument("--checkpoint-in")
    r.add_argument("--checkpoint-out")
    r.add_argument("--surrogate-seed", type=int)
    r.add_argument("--tabular")
    r.add_argument("--num-vertices", type=int)
    r.add_argument("--stop-at-threshold", action="store_true", default=None)

    e = sub.add_parser("export-surrogate", help="write surrogate accuracies as a tabular CSV")
    e.add_argument("--out", required=True)
    e.add_argument("--surrogate-seed", type=int, default=42)
    e.add_argument("--num-vertices", type=int, default=7)
    e.add_argument("--count", type=int, default=10_000,
                   help="random valid genotypes to export (0 = every valid genotype; small cells only)")
    e.add_argument("--seed", type=int, default=0)
    return p


def _run(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    for key in ("experiment", "seed_base", "replicas", "budget", "joint_budget", "out", "window",
                "threshold", "checkpoint_in", "checkpoint_out", "surrogate_seed", "tabular",
                "num_vertices", "stop_at_threshold"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    cfg = make_config(values)
    res = run_experiment(cfg)
    s = res.summary
    print(f"{cfg.experiment}: {cfg.replicas} replicas -> {cfg.out}")
    if "median_best" in s:
        print(f"median best validation {s['median_best']:.6f} (target {s['target_best_valid']:.6f})")
        print(f"median trials to threshold {s['median_trials_to_threshold']:g}"
              f" ({sum(s['censored'])} censored)")
    return EXIT_OK


def _export(args) -> int:
    sur = Surrogate(args.surrogate_seed, args.num_vertices)
    cell = cell_spaces(args.num_vertices)["full"]
    if args.count == 0:
        gs = cell_genotypes(cell)
    else:
        rng = np.random.default_rng(args.seed)
        seen: dict[str, Genotype] = {}
        while len(seen) < args.count:
            masks, ops = random_cells(cell, 4 * args.count, rng)
            for m, o in zip(masks, ops):
                g = Genotype(tuple((int(m) >> k) & 1 for k in range(sur.num_edges)), tuple(int(x) for x in o))
                if validate(g):
                    seen.setdefault(g.key(), g)
                    if len(seen) == args.count:
                        break
        gs = list(seen.values())
    sur.export_csv(args.out, gs)
    print(f"wrote {len(gs)} genotypes to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        return _export(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OracleError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
