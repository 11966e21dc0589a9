"""``mpcache`` command line: argparse front end over :mod:`mpcache.harness`.

Flags mirror RunConfig fields one-to-one and override values loaded with
``--config``.  Exit codes: 0 ok, 1 property failure, 2 config or IO error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .eviction import ConfigError
from .harness import EXIT_CONFIG, RunConfig, run


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for report.json and CSV tables")
    p.add_argument("--dump-config", action="store_true", help="print the effective RunConfig and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpcache", description="Secure KV-cache eviction simulator on 3-party replicated sharing.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", help="run the invariant suite at small sizes")
    _common(p)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds to run")
    p.add_argument("--inject-fault", choices=["truncation", "trunc"], help="corrupt a protocol constant; the run must fail")
    p.add_argument("--workers", type=int, help="parallel worker processes, one seed each")

    p = sub.add_parser("bench-gather", help="token vs cluster gather cost")
    _common(p)
    for name in ("T", "C", "k1", "k2"):
        p.add_argument(f"--{name}", type=int, dest=name)
    p.add_argument("--row-dim", type=int)
    p.add_argument("--sweep", type=_int_list, help="list of T values for the formula sweep, e.g. 256,512,1024")
    p.add_argument("--backend", choices=["boolean", "ideal"])

    p = sub.add_parser("demo-decode", help="prefill + decode in plaintext and secure mode")
    _common(p)
    p.add_argument("--mode", choices=["plaintext", "secure"])
    p.add_argument("--backend", choices=["boolean", "ideal"])
    p.add_argument("--preset", choices=["none", "longbench", "xsum"])
    p.add_argument("--final-ratio", type=float)
    p.add_argument("--eviction", help="EvictionConfig as a JSON object")
    p.add_argument("--weights", help="MPCT weight tensor [L, 4, D, D]")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--synthetic-cache", type=int, help="use a random retained cache of this size instead of prefill")
    p.add_argument("--planted", action="store_const", const=True, help="also report planted-relevance recall")

    p = sub.add_parser("analyze-commonality", help="cross-layer commonality from a selection trace CSV")
    _common(p)
    p.add_argument("--trace", help="selection_trace.csv written by demo-decode")
    p.add_argument("--m-values", type=_int_list)

    p = sub.add_parser("ingest-check", help="validate an MPCT weight or trace file")
    _common(p)
    p.add_argument("path", nargs="?")
    p.add_argument("--kind", choices=["weights", "trace", "tensor"])
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    return ap


_SKIP = {"config", "dump_config", "command", "workers"}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.command = args.command
    for key, val in vars(args).items():
        if key in _SKIP or val is None:
            continue
        if key == "eviction":
            try:
                val = json.loads(val)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"--eviction: invalid JSON ({exc})"]) from exc
        if key == "inject_fault":
            val = "truncation"
        setattr(cfg, key, val)
    return cfg


def _run_seed(cfg_dict):
    cfg = RunConfig.from_dict(cfg_dict)
    rep, code, errs = run(cfg)
    return (rep.checks if rep else []), code, errs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        print(cfg.to_json())
        return 0
    workers = getattr(args, "workers", None)
    if cfg.command == "selftest" and workers and workers > 1 and cfg.seeds > 1:
        return _parallel_selftest(cfg, workers)
    rep, code, errs = run(cfg)
    for e in errs:
        print(("config error: " if code == EXIT_CONFIG else "FAILED ") + e, file=sys.stderr)
    if rep is None:
        return code
    for c in rep.checks:
        print(f"{'PASS' if c['ok'] else 'FAIL'}  {c['name']}  ({c['detail']})")
    for name, entry in rep.entries.items():
        print(f"{name} = {entry['value']}  [{entry['source']}: {entry['how']}]")
    for note in rep.notes:
        print(f"note: {note}")
    if cfg.out:
        for p in rep.write(cfg.out):
            print(f"wrote {p}")
    return code


def _parallel_selftest(cfg: RunConfig, workers: int) -> int:
    from concurrent.futures import ProcessPoolExecutor

    jobs = []
    for s in range(cfg.seed, cfg.seed + cfg.seeds):
        d = cfg.to_dict()
        d.update(seed=s, seeds=1)
        jobs.append(d)
    worst = 0
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for checks, code, errs in pool.map(_run_seed, jobs):
            for c in checks:
                print(f"{'PASS' if c['ok'] else 'FAIL'}  {c['name']}  ({c['detail']})")
            for e in errs if code == EXIT_CONFIG else []:
                print(f"config error: {e}", file=sys.stderr)
            worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
