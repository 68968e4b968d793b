"""Command-line interface: merge, inspect, diagnose, and verify.

Exit codes for merge/inspect/diagnose: 0 success, 2 usage, 3 checkpoint
parse or adapter alignment failure, 4 I/O failure. verify exits 0 when
every selected suite's property holds, 1 when one is violated, 2 on usage
errors. Identical invocations with the same seed produce byte-identical
outputs and reports.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import (
    DEFAULT_A_PATTERN,
    DEFAULT_B_PATTERN,
    AlignmentError,
    ParseError,
    TensorRecord,
    _match_factors,
    extract_adapters,
    load_base,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
)
from .diagnostics import (
    atomic_write_text,
    build_report,
    dumps_deterministic,
    emit_report,
    format_float,
)
from .experiments import (
    run_balance_suite,
    run_conflict_suite,
    run_crossterm_suite,
    run_decoupling_suite,
)
from .linalg import MAGNITUDE_MODES
from .merge import METHODS, MergeConfig, merge_adapter_set, resolve_base_key
from .ortho import OrthoConfig

EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_IO = 4

SUITE_NAMES = ("theorem31", "theorem32", "theorem33", "crossterm")


class _CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _emit_error(code: int, kind: str, message: str, json_mode: bool) -> int:
    if json_mode:
        payload = {"error": {"type": kind, "message": message}}
        sys.stderr.write(dumps_deterministic(payload) + "\n")
    else:
        sys.stderr.write(f"domerge: error: {message}\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domerge",
        description="Merge LoRA adapter checkpoints with orthogonalized, "
        "magnitude-decoupled averaging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="merge adapter checkpoints into one delta")
    m.add_argument("adapters", nargs="*", help="adapter checkpoint paths")
    m.add_argument("--manifest", help="JSON manifest listing adapter paths/names/scalings")
    m.add_argument("--base", help="base checkpoint; required for fused output")
    m.add_argument("--method", choices=METHODS, default="do_merging")
    m.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="merged-delta scale; default 1/n^2 for n adapters",
    )
    m.add_argument("--magnitude-mode", choices=MAGNITUDE_MODES, default="column")
    m.add_argument("--no-ortho", action="store_true", help="skip factor orthogonalization")
    m.add_argument("--no-decouple", action="store_true", help="skip magnitude/direction split")
    m.add_argument("--ortho-steps", type=int, default=200, help="descent step cap")
    m.add_argument(
        "--ortho-budget", type=float, default=0.05, help="per-member relative perturbation cap"
    )
    m.add_argument("--output", required=True, help="output checkpoint path")
    m.add_argument(
        "--output-mode",
        default="delta",
        help="delta (default), fused, or lowrank:R for a rank-R refactorization",
    )
    m.add_argument("--seed", type=int, default=0)
    strictness = m.add_mutually_exclusive_group()
    strictness.add_argument(
        "--strict",
        dest="strict",
        action="store_true",
        default=True,
        help="fail on missing layers or shape conflicts (default)",
    )
    strictness.add_argument(
        "--lenient",
        dest="strict",
        action="store_false",
        help="drop misaligned layers with a warning instead of failing",
    )
    m.add_argument("--force", action="store_true", help="overwrite an existing output file")
    m.add_argument(
        "--threads",
        type=int,
        default=None,
        help="layer parallelism; falls back to DO_MERGE_THREADS, then CPU count",
    )
    m.add_argument("--json", action="store_true", help="structured JSON errors on stderr")
    m.set_defaults(func=cmd_merge)

    i = sub.add_parser("inspect", help="list a checkpoint's tensors and LoRA pairs")
    i.add_argument("path")
    i.add_argument("--json", action="store_true", help="emit the listing as JSON")
    i.set_defaults(func=cmd_inspect)

    d = sub.add_parser("diagnose", help="write a diagnostics report for adapter checkpoints")
    d.add_argument("adapters", nargs="*", help="adapter checkpoint paths")
    d.add_argument("--manifest", help="JSON manifest listing adapter paths")
    d.add_argument("--report", required=True, help="report output path")
    d.add_argument("--format", choices=("json", "csv"), default="json")
    d.add_argument("--json", action="store_true", help="structured JSON errors on stderr")
    d.set_defaults(func=cmd_diagnose)

    v = sub.add_parser("verify", help="run the seeded Monte Carlo property suites")
    v.add_argument("--suite", choices=SUITE_NAMES + ("all",), default="all")
    v.add_argument(
        "--samples",
        type=int,
        default=None,
        help="per-suite sample/trial count; defaults differ per suite",
    )
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", help="write all suite results as JSON")
    v.set_defaults(func=cmd_verify)

    return parser


def _gather_sources(args):
    """Adapter paths plus optional names/scalings, from positionals or manifest."""
    if args.manifest and args.adapters:
        raise _CliError(EXIT_USAGE, "usage", "give adapter paths or --manifest, not both")
    if args.manifest:
        return load_manifest(args.manifest)
    if not args.adapters:
        raise _CliError(EXIT_USAGE, "usage", "no adapters given (positional paths or --manifest)")
    return [Path(a) for a in args.adapters], None, None


def _parse_output_mode(text: str) -> tuple[str, int | None]:
    if text in ("delta", "fused"):
        return text, None
    head, sep, tail = text.partition(":")
    if head == "lowrank":
        if not sep:
            raise _CliError(
                EXIT_USAGE, "usage", "lowrank output mode needs a rank, e.g. --output-mode lowrank:8"
            )
        try:
            rank = int(tail)
        except ValueError:
            rank = 0
        if rank < 1:
            raise _CliError(EXIT_USAGE, "usage", f"invalid lowrank rank {tail!r}")
        return "lowrank", rank
    raise _CliError(EXIT_USAGE, "usage", f"unknown output mode {text!r}")


def _resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("DO_MERGE_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise _CliError(
                    EXIT_USAGE, "usage", f"DO_MERGE_THREADS must be an integer, got {env!r}"
                ) from None
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise _CliError(EXIT_USAGE, "usage", "--threads must be >= 1")
    return value


def _stats_dict(stats) -> dict:
    return {
        "initial_lo": stats.initial_lo,
        "final_lo": stats.final_lo,
        "steps_taken": stats.steps_taken,
        "max_rel_perturbation": max(stats.per_member_rel_perturbation, default=0.0),
    }


def cmd_merge(args) -> int:
    mode, rank = _parse_output_mode(args.output_mode)
    if mode == "fused" and not args.base:
        raise _CliError(EXIT_USAGE, "usage", "--output-mode fused requires --base")
    threads = _resolve_threads(args.threads)
    out_path = Path(args.output)
    if out_path.exists() and not args.force:
        raise _CliError(EXIT_IO, "io", f"{out_path} exists; pass --force to overwrite")

    ortho = None
    if not args.no_ortho:
        try:
            ortho = OrthoConfig(
                max_steps=args.ortho_steps,
                max_rel_perturbation=args.ortho_budget,
                seed=args.seed,
            )
        except ValueError as e:
            raise _CliError(EXIT_USAGE, "usage", str(e)) from None
    try:
        config = MergeConfig(
            lam=args.lam,
            magnitude_mode=args.magnitude_mode,
            method=args.method,
            ortho=ortho,
            decouple_enabled=not args.no_decouple,
            output_mode=mode,
            lowrank_rank=rank,
        )
    except ValueError as e:
        raise _CliError(EXIT_USAGE, "usage", str(e)) from None

    paths, names, scalings = _gather_sources(args)
    adapters = extract_adapters(paths, scalings=scalings, names=names, strict=args.strict)
    base = load_base(args.base) if args.base else None
    merged = merge_adapter_set(adapters, base=base, config=config, threads=threads)

    records: dict[str, TensorRecord] = {}
    for key, layer in merged.items():
        if mode == "delta":
            records[key] = TensorRecord.from_array(key, layer.delta, "f32")
        elif mode == "fused":
            out_key = resolve_base_key(base, key)
            records[out_key] = TensorRecord.from_array(out_key, layer.fused, "f32")
        else:
            b, a = layer.lowrank
            b_key = key + ".lora_B.weight"
            a_key = key + ".lora_A.weight"
            records[b_key] = TensorRecord.from_array(b_key, b, "f32")
            records[a_key] = TensorRecord.from_array(a_key, a, "f32")
    save_checkpoint(records, out_path, overwrite=True)

    layer_stats = {}
    for key, layer in merged.items():
        entry: dict = {"shape": list(layer.delta.shape)}
        if layer.ortho_stats is not None:
            entry["ortho"] = {g: _stats_dict(s) for g, s in sorted(layer.ortho_stats.items())}
        layer_stats[key] = entry
    summary = {
        "command": "merge",
        "output": str(out_path),
        "output_mode": args.output_mode,
        "method": config.method,
        "lambda": config.resolve_lam(adapters.n),
        "magnitude_mode": config.magnitude_mode,
        "ortho_enabled": ortho is not None,
        "decouple_enabled": config.decouple_enabled,
        "adapters": list(adapters.names),
        "layers": layer_stats,
        "warnings": list(adapters.warnings),
    }
    sys.stdout.write(dumps_deterministic(summary) + "\n")
    return 0


def cmd_inspect(args) -> int:
    records = load_checkpoint(args.path)
    tensors = [
        {"key": k, "dtype": r.dtype, "shape": list(r.shape)} for k, r in sorted(records.items())
    ]
    a_keys = _match_factors(records, DEFAULT_A_PATTERN)
    b_keys = _match_factors(records, DEFAULT_B_PATTERN)
    pairs = []
    for prefix in sorted(set(a_keys) & set(b_keys)):
        a = records[a_keys[prefix]]
        b = records[b_keys[prefix]]
        rank = a.shape[0] if len(a.shape) == 2 and len(b.shape) == 2 and b.shape[1] == a.shape[0] else None
        pairs.append(
            {
                "layer": prefix,
                "rank": rank,
                "full_shape": [b.shape[0], a.shape[1]] if rank is not None else None,
            }
        )
    if args.json:
        sys.stdout.write(dumps_deterministic({"tensors": tensors, "lora_pairs": pairs}) + "\n")
        return 0
    for t in tensors:
        shape = "x".join(str(s) for s in t["shape"])
        sys.stdout.write(f"{t['key']}  {t['dtype']}  {shape}\n")
    sys.stdout.write(f"lora pairs: {len(pairs)}\n")
    for p in pairs:
        if p["rank"] is None:
            sys.stdout.write(f"  {p['layer']}  (factor shapes do not chain)\n")
        else:
            m, n = p["full_shape"]
            sys.stdout.write(f"  {p['layer']}  rank {p['rank']}  full {m}x{n}\n")
    return 0


def cmd_diagnose(args) -> int:
    paths, names, scalings = _gather_sources(args)
    adapters = extract_adapters(paths, scalings=scalings, names=names, strict=True)
    report = build_report(adapters)
    emit_report(report, args.report, args.format)
    sys.stdout.write(f"magnitude_variance {format_float(report.magnitude_variance)}\n")
    for key in sorted(report.per_layer_cross_gram):
        gram = report.per_layer_cross_gram[key]
        n = gram.shape[0]
        off = [gram[i, j] for i in range(n) for j in range(i + 1, n)]
        peak = max(off) if off else 0.0
        sys.stdout.write(f"layer {key} max_cross_gram {format_float(peak)}\n")
    sys.stdout.write(f"report written to {args.report}\n")
    return 0


def cmd_verify(args) -> int:
    if args.samples is not None and args.samples < 2:
        raise _CliError(EXIT_USAGE, "usage", "--samples must be >= 2")
    selected = SUITE_NAMES if args.suite == "all" else (args.suite,)
    runners = {
        "theorem31": lambda: run_balance_suite(samples=args.samples or 200, seed=args.seed),
        "theorem32": lambda: run_decoupling_suite(samples=args.samples or 500, seed=args.seed),
        "theorem33": lambda: run_conflict_suite(trials=args.samples or 100, seed=args.seed),
        "crossterm": lambda: run_crossterm_suite(trials=args.samples or 200, seed=args.seed),
    }
    results = {name: runners[name]() for name in selected}
    for name in selected:
        sys.stdout.write(dumps_deterministic(results[name]) + "\n")
    if args.report:
        atomic_write_text(args.report, dumps_deterministic(results) + "\n")
    return 0 if all(r["pass"] for r in results.values()) else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    json_mode = bool(getattr(args, "json", False))
    try:
        return args.func(args)
    except _CliError as e:
        return _emit_error(e.code, e.kind, str(e), json_mode)
    except ParseError as e:
        return _emit_error(EXIT_PARSE, "parse", str(e), json_mode)
    except AlignmentError as e:
        return _emit_error(EXIT_PARSE, "alignment", str(e), json_mode)
    except OSError as e:
        return _emit_error(EXIT_IO, "io", str(e), json_mode)
    except ValueError as e:
        return _emit_error(EXIT_USAGE, "usage", str(e), json_mode)


if __name__ == "__main__":
    sys.exit(main())
