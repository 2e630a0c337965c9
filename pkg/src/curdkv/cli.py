"""``curdkv`` command line: gen | compress | eval | sweep | bound-check.

Exit status: 0 success, 1 validation error, 2 runtime error, errored sweep
cell or a violated bound.
"""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .cache import SYNTHETIC_KINDS, generate_synthetic
from .config import ConfigError, RunConfig
from .evaluate import random_bound_trials, reports_to_csv, reports_to_json, run_sweep
from .linalg import ShapeError
from .policy import (
    DEFAULT_ALPHA,
    DEFAULT_SINKS,
    BudgetError,
    CompressionConfig,
    Policy,
    apply_selection,
    apply_selection_per_group,
    select,
)
from .scoring import DEFAULT_OBS_WINDOW, DEFAULT_SKETCH_DIM, Method
from .tensorfile import TensorFileError, read_cache, read_cache_files, read_tensor, write_cache, write_tensor

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_compression_flags(p):
    budget = p.add_mutually_exclusive_group()
    budget.add_argument("--ratio", type=float, help="fraction of tokens to evict, in [0, 1)")
    budget.add_argument("--budget-k", type=int, help="tokens retained per group")
    p.add_argument("--policy", choices=[x.value for x in Policy], default=Policy.CURDKV.value)
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.SKETCH_KV.value)
    p.add_argument("--sketch-dim", type=int, default=DEFAULT_SKETCH_DIM)
    p.add_argument("--sinks", type=int, default=DEFAULT_SINKS)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="adaptive per-group safeguard fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--obs-window", type=int, default=DEFAULT_OBS_WINDOW)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curdkv", description="CUR leverage-score KV-cache compression toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic cache as CKV1 files plus a manifest")
    p.add_argument("--kind", choices=SYNTHETIC_KINDS, default="planted_heavy")
    p.add_argument("-g", "--groups", type=int, default=4)
    p.add_argument("-n", "--tokens", type=int, default=512)
    p.add_argument("-d", "--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, help="planted_heavy: fraction of heavy rows")
    p.add_argument("--m", type=float, help="planted_heavy: heavy-row scale")
    p.add_argument("--sink-count", type=int, help="sink_pattern: number of sink tokens")
    p.add_argument("--sink-scale", type=float, help="sink_pattern: sink key scale")
    p.add_argument("--dtype", choices=["f4", "f8"], default="f8")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compress", help="compress a cache and write K', V' and the retained indices")
    p.add_argument("--cache", help="cache directory written by 'gen'")
    p.add_argument("--keys", help="keys CKV1 file (with --values)")
    p.add_argument("--values", help="values CKV1 file (with --keys)")
    p.add_argument("--queries", help="CKV1 (g, w, d) observation queries for attention_sum")
    _add_compression_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate one policy/method/ratio cell, or a run config")
    p.add_argument("--config", help="run config JSON; overrides the cell flags")
    p.add_argument("--cache", help="cache directory written by 'gen'")
    p.add_argument("--queries-source", choices=["gaussian", "tail", "file"], default="gaussian")
    p.add_argument("--queries", help="CKV1 (g, w, d) query file for --queries-source file")
    _add_compression_flags(p)
    p.add_argument("--per-group", action="store_true", help="add one CSV row per group")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run a run-config grid, write CSV/JSON reports and figures")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--workers", type=int, help="concurrent cells (output order is unaffected)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--per-group", action="store_true")

    p = sub.add_parser("bound-check", help="randomized check of the zero-padding eviction bound")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-n", type=int, default=32)
    p.add_argument("--max-d", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config_from_flags(args) -> CompressionConfig:
    ratio = args.ratio if args.budget_k is None and args.ratio is not None else None
    if args.budget_k is None and ratio is None:
        ratio = 0.0
    return CompressionConfig(
        budget_k=args.budget_k,
        compression_ratio=ratio,
        sketch_dim=args.sketch_dim,
        sinks=args.sinks,
        method=args.method,
        adaptive=args.policy == Policy.ADACURDKV.value,
        safeguard_alpha=args.alpha,
        seed=args.seed,
        obs_window=args.obs_window,
    )


def cmd_gen(args) -> int:
    params = {}
    if args.kind == "planted_heavy":
        params = {k: v for k, v in (("p", args.p), ("m", args.m)) if v is not None}
    elif args.kind == "sink_pattern":
        params = {k: v for k, v in (("sinks", args.sink_count), ("scale", args.sink_scale)) if v is not None}
    cache = generate_synthetic(args.kind, args.groups, args.tokens, args.dim, args.seed, **params)
    manifest = {"kind": args.kind, "seed": args.seed, "params": params}
    if "planted" in cache.info:
        manifest["planted"] = cache.info["planted"]
    out = write_cache(args.out, cache, args.dtype, manifest)
    print(f"wrote {cache.groups}x{cache.tokens}x{cache.dim} {args.kind} cache to {out}")
    return EXIT_OK


def _load_cache_args(args):
    if args.cache:
        cache, code, _ = read_cache(args.cache)
        return cache, code
    if args.keys and args.values:
        return read_cache_files(args.keys, args.values)
    raise UsageError("give --cache DIR or both --keys and --values")


def cmd_compress(args) -> int:
    cache, code = _load_cache_args(args)
    cfg = _config_from_flags(args)
    obs = None
    if args.queries:
        obs, _ = read_tensor(args.queries)
    sel = select(args.policy, cache, cfg, obs_queries=obs, chunk_len=args.chunk_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = "f4" if code == 1 else "f8"
    if sel.uniform:
        write_cache(out, apply_selection(cache, sel), dtype, {"compressed_from": sel.tokens})
        files = ["keys.ckv", "values.ckv"]
    else:
        files = []
        for i, part in enumerate(apply_selection_per_group(cache, sel)):
            write_tensor(out / f"keys_g{i}.ckv", part.keys[0], dtype)
            write_tensor(out / f"values_g{i}.ckv", part.values[0], dtype)
            files += [f"keys_g{i}.ckv", f"values_g{i}.ckv"]
    doc = sel.to_dict()
    doc["files"] = files
    doc["config"] = {
        "ratio": cfg.compression_ratio,
        "budget_k": cfg.budget_k,
        "sketch_dim": cfg.sketch_dim,
        "sinks": cfg.sinks,
        "alpha": cfg.safeguard_alpha,
        "seed": cfg.seed,
        "obs_window": cfg.obs_window,
        "chunk_len": args.chunk_len,
    }
    (out / "selection.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"retained {sel.granted} of {sel.tokens} tokens per group -> {out}")
    return EXIT_OK


def _write_reports(reports, out, per_group, figures) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports.csv").write_text(reports_to_csv(reports, per_group))
    (out / "reports.json").write_text(reports_to_json(reports, per_group))
    if figures:
        from .plotting import render_report_figures

        render_report_figures(reports, out / "figures")
    errors = [r for r in reports if r.error is not None]
    violated = [r for r in reports if r.error is None and not all(r.bound_holds)]
    for r in errors:
        print(f"cell error: {r.policy}/{r.method} ratio={r.ratio} seed={r.seed}: {r.error}", file=sys.stderr)
    print(f"reports: {len(reports)}  errors: {len(errors)}  bound violations: {len(violated)}  -> {out}")
    return EXIT_OK if not errors and not violated else EXIT_RUNTIME


def _run_config(rc: RunConfig, out, per_group, figures, workers=None) -> int:
    reports = run_sweep(
        rc.cache_source(),
        rc.grid["policies"],
        rc.grid["methods"],
        rc.grid["ratios"],
        rc.grid["seeds"],
        rc.queries_source(),
        base_cfg=rc.compression_config(),
        chunk_len=rc.chunk_len,
        bytes_per_element=rc.bytes_per_element,
        workers=workers or rc.workers,
    )
    return _write_reports(reports, out, per_group, figures)


def cmd_eval(args) -> int:
    if args.config:
        rc = RunConfig.load(args.config)
    else:
        if not args.cache:
            raise UsageError("give --config or --cache")
        if args.budget_k is not None:
            raise UsageError("eval cells are defined by --ratio; --budget-k is only for compress")
        queries = {"source": args.queries_source, "window": args.obs_window, "seed": args.seed}
        if args.queries:
            queries["path"] = str(Path(args.queries).resolve())
        doc = {
            "cache": {"path": str(Path(args.cache).resolve())},
            "queries": queries,
            "grid": {
                "policies": [args.policy],
                "methods": [args.method],
                "ratios": [args.ratio if args.ratio is not None else 0.0],
                "seeds": [args.seed],
            },
            "compression": {
                "sketch_dim": args.sketch_dim,
                "sinks": args.sinks,
                "alpha": args.alpha,
                "obs_window": args.obs_window,
                "chunk_len": args.chunk_len,
            },
        }
        rc = RunConfig.from_dict(doc)
    return _run_config(rc, args.out, args.per_group, figures=False)


def cmd_sweep(args) -> int:
    rc = RunConfig.load(args.config)
    out = args.out or rc.output.get("dir")
    if not out:
        raise UsageError("no output directory: pass --out or set output.dir")
    if not args.out and not Path(out).is_absolute():
        out = rc.base_dir / out
    figures = rc.output.get("figures", True) and not args.no_figures
    per_group = args.per_group or rc.output.get("per_group", False)
    return _run_config(rc, out, per_group, figures, args.workers)


def cmd_bound_check(args) -> int:
    if args.trials < 1 or args.max_n < 1 or args.max_d < 1:
        raise UsageError("--trials, --max-n and --max-d must be >= 1")
    records = random_bound_trials(args.trials, args.max_n, args.max_d, args.seed)
    held = sum(r.holds for r in records)
    worst = max(r.ratio for r in records)
    print(f"trials: {len(records)}")
    print(f"holds: {held}/{len(records)}")
    print(f"max lhs/rhs: {worst:.12f}")
    print("bound holds on every trial" if held == len(records) else "BOUND VIOLATED")
    return EXIT_OK if held == len(records) else EXIT_RUNTIME


COMMANDS = {
    "gen": cmd_gen,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bound-check": cmd_bound_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"curdkv: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, TensorFileError, ShapeError, BudgetError, ValueError, FileNotFoundError) as exc:
        print(f"curdkv: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"curdkv: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
