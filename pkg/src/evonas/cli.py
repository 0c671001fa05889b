"""Command-line entry point: ``evonas <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, EvonasError


def _cmd_search(args) -> int:
    from .engine import EvolutionConfig, checkpoint_load, run_search

    if args.config:
        cfg = EvolutionConfig.load(args.config)
    elif args.resume:
        _, cfg = checkpoint_load(args.resume)
        if cfg is None:
            raise ConfigError("checkpoint carries no config; pass --config")
    else:
        raise ConfigError("search needs --config (or --resume)")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    t0 = time.perf_counter()
    res = run_search(cfg, args.out, resume=args.resume)
    recs = res.state.population_records()
    print(f"generation {res.state.generation}: mean accuracy {res.mean_accuracy[res.state.generation]:.4f}, "
          f"params {min(r.params for r in recs)}..{max(r.params for r in recs)}, "
          f"{time.perf_counter() - t0:.1f}s; outputs in {res.out_dir}")
    return 0


def _cmd_estimate(args) -> int:
    from .engine import EvolutionConfig, TimeModel, estimate_search_time

    cfg = EvolutionConfig.load(args.config) if args.config else EvolutionConfig()
    b = estimate_search_time(cfg, TimeModel(args.t_tr, args.t_val))
    print(json.dumps(b.to_dict(), indent=1))
    return 0


def _cmd_export(args) -> int:
    from .engine import EvolutionConfig, checkpoint_load
    from .export import export_pareto

    state, cfg = checkpoint_load(args.checkpoint)
    cfg = cfg or EvolutionConfig(P=len(state.population), space=state.net.space)
    out = args.out or str(Path(args.checkpoint).with_name(f"pareto.{args.format}"))
    export_pareto(state, cfg, out, args.format)
    print(out)
    return 0


def _cmd_gradcheck(args) -> int:
    from .nn.gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(seed=args.seed)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:36s} rel_err={r.rel_error:.3e} n={r.n_checked}")
    bad = sum(not r.passed for r in results)
    print(f"{len(results) - bad}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return 1 if bad else 0


def _cmd_trap(args) -> int:
    import numpy as np

    from .trap import TrapConfig, compare, write_distribution

    tc = TrapConfig(P=args.P, generations=args.generations)
    runs = compare(range(args.seeds), tc)
    write_distribution(runs, args.out)
    for method, rs in runs.items():
        ratios = [r.retained for r in rs]
        print(f"{method}: final/initial max params median {np.median(ratios):.3f} "
              f"({', '.join(f'{x:.2f}' for x in ratios)})")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evonas", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run warmup and evolution")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--resume", help="state.ckpt to continue from")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs/search")
    s.set_defaults(func=_cmd_search)

    s = sub.add_parser("estimate-time", help="search cost model")
    s.add_argument("--config")
    s.add_argument("--t-tr", type=float, required=True, help="seconds per training epoch per architecture")
    s.add_argument("--t-val", type=float, required=True, help="seconds per full validation pass")
    s.set_defaults(func=_cmd_estimate)

    s = sub.add_parser("export-pareto", help="write front 0 of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="json")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_export)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("simulate-trap", help="NSGA-III vs pNSGA-III under the size/convergence oracle")
    s.add_argument("--generations", type=int, default=20)
    s.add_argument("--P", type=int, default=32)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--out", default="trap_population.csv")
    s.set_defaults(func=_cmd_trap)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (EvonasError, OSError) as exc:
        print(f"evonas: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
