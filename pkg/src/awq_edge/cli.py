"""awq-edge command line: synth, quantize, inspect, generate, profile, score.

Exit codes: 0 ok, 2 usage error, 3 data or format error.  Errors go to
stderr as a single ``awq-edge: error: ...`` line.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config, shipped_config
from .container import FormatError, inspect_model, read_model, write_model
from .macro import CorruptMacroError, LayoutError
from .model import ByteTokenizer, Model, Temperature, TokenError
from . import perf
from .synth import quantize_model, synth_fp16

EXIT_USAGE = 2
EXIT_DATA = 3
PROG = "awq-edge"


class DataError(Exception):
    pass


def _workers(value) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid worker count {value!r}") from None
    if not 1 <= n <= 4:
        raise argparse.ArgumentTypeError("workers must be between 1 and 4")
    return n


def _config_arg(value: str):
    if value in ("qwen2.5-0.5b", "tiny") and not Path(value).exists():
        return shipped_config(value)
    return load_config(value)


def _emit_rows(rows, fmt, columns, out):
    if fmt == "json":
        out.write(json.dumps(rows, indent=2) + "\n")
    elif fmt == "csv":
        w = csv.DictWriter(out, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
        out.write("  ".join(c.ljust(widths[c]) for c in columns) + "\n")
        for r in rows:
            out.write("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns) + "\n")


def cmd_synth(args, out):
    cfg = _config_arg(args.config)
    tensors = synth_fp16(cfg, args.seed)
    if args.fp16:
        cfg = cfg.replace(quantized_tensors=[], awq_channel_scales=False)
    else:
        cfg, tensors = quantize_model(cfg, tensors, args.gs, args.awq_scale, args.calib, args.seed)
    bin_path, json_path = write_model(args.out, cfg, tensors)
    print(f"wrote {bin_path} and {json_path}", file=sys.stderr)


def cmd_quantize(args, out):
    cfg, tensors = read_model(args.model)
    if cfg.quantized_tensors:
        raise DataError(f"{args.model} is already quantized")
    cfg, tensors = quantize_model(cfg, tensors, args.gs, args.awq_scale, args.calib, args.seed)
    bin_path, json_path = write_model(args.out, cfg, tensors)
    print(f"wrote {bin_path} and {json_path}", file=sys.stderr)


def cmd_inspect(args, out):
    if args.config:
        cfg = _config_arg(args.config)
        rep = perf.compression_report(cfg)
        rows = [{"original_bytes": rep.original_bytes, "packed_bytes": rep.packed_bytes,
                 "reduction_percent": round(rep.reduction_percent, 4), "bits_per_weight": rep.bits_per_weight}]
        _emit_rows(rows, args.format, list(rows[0]), out)
        return
    if not args.model:
        raise DataError("inspect needs --model or --config")
    cfg, rows = inspect_model(args.model)
    _emit_rows(rows, args.format, ["name", "dtype", "shape", "bytes", "group_size", "macros", "bits_per_weight"], out)
    if args.format == "table":
        q = [r for r in rows if r["dtype"] == "awq_macro"]
        total_bytes = sum(r["bytes"] for r in rows) + 16 + 36 * len(rows)
        out.write(f"\ntensors: {len(rows)}  file bytes: {total_bytes}\n")
        if q:
            bits = sum(r["bytes"] for r in q) * 8
            weights = sum(r["shape"][0] * r["shape"][1] for r in q)
            out.write(f"quantized tensors: {len(q)}  macros: {sum(r['macros'] for r in q)}  "
                      f"bits/weight: {bits / weights}\n")


def _load(args) -> Model:
    return Model.load(args.model, workers=args.workers, max_seq=args.max_seq)


def cmd_generate(args, out):
    model = _load(args)
    tok = ByteTokenizer(model.config.vocab)
    prompt = tok.encode(args.prompt)
    sampler = Temperature(args.temp, args.seed) if args.temp else None
    t0 = time.perf_counter()
    ids = model.generate(prompt, args.n, sampler)
    dt = time.perf_counter() - t0
    out.write(args.prompt + tok.decode(ids) + "\n")
    if args.stats:
        rate = len(ids) / dt if dt > 0 and ids else 0.0
        print(f"generated {len(ids)} tokens in {dt:.3f} s ({rate:.2f} tokens/s)", file=sys.stderr)


def cmd_profile(args, out):
    model = _load(args)
    prompt = ByteTokenizer().encode(args.prompt)
    report = perf.profile_generate(model, prompt, args.n, args.runs)
    fmt = {"table": perf.format_table, "csv": perf.format_csv, "json": perf.format_json}[args.format]
    out.write(fmt(report) + "\n")


def cmd_score(args, out):
    inputs = perf.ScoreInputs(tuple(args.accuracy), tuple(args.memory), tuple(args.prefill), tuple(args.decode))
    value = perf.score(inputs)
    ref = perf.REFERENCE_SCORES
    if args.format == "json":
        out.write(json.dumps({"score": value, "reference": ref}) + "\n")
    elif args.format == "csv":
        out.write(f"score\n{value!r}\n")
    else:
        out.write(f"{value!r}\n")
        print(f"reference totals: baseline {ref['baseline']:.2f}, AWQ GS=64 {ref['awq_gs64']:.2f}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    env_workers = os.environ.get("AWQ_EDGE_WORKERS", "1")
    p = argparse.ArgumentParser(prog=PROG, description="INT4 AWQ_MACRO model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def quant_flags(sp):
        sp.add_argument("--gs", type=int, default=None, help="group size (default: from config)")
        sp.add_argument("--awq-scale", action="store_true", help="search activation-aware channel scales")
        sp.add_argument("--calib", type=int, default=32, help="synthetic calibration samples")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("synth", help="generate, quantize and pack a seeded synthetic model")
    sp.add_argument("--config", required=True, help="architecture JSON, or 'tiny' / 'qwen2.5-0.5b'")
    sp.add_argument("--out", required=True, help="output stem (writes STEM.bin and STEM.json)")
    sp.add_argument("--fp16", action="store_true", help="write the unquantized FP16 pair instead")
    quant_flags(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("quantize", help="quantize an FP16 pair into a packed pair")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    quant_flags(sp)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("inspect", help="print the tensor directory, or the analytic size of a config")
    sp.add_argument("--model")
    sp.add_argument("--config")
    sp.add_argument("--format", choices=("table", "csv", "json"), default="table")
    sp.set_defaults(func=cmd_inspect)

    for name, func in (("generate", cmd_generate), ("profile", cmd_profile)):
        sp = sub.add_parser(name)
        sp.add_argument("--model", required=True)
        sp.add_argument("--prompt", required=True)
        sp.add_argument("--n", type=int, default=16)
        sp.add_argument("--workers", type=_workers, default=env_workers)
        sp.add_argument("--max-seq", type=int, default=2048)
        sp.set_defaults(func=func)
        if name == "generate":
            sp.add_argument("--temp", type=float, default=0.0)
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--stats", action="store_true")
        else:
            sp.add_argument("--runs", type=int, default=5)
            sp.add_argument("--format", choices=("table", "csv", "json"), default="table")

    sp = sub.add_parser("score", help="weighted benchmark score from (candidate, max) pairs")
    for flag in ("accuracy", "memory", "prefill", "decode"):
        sp.add_argument(f"--{flag}", type=float, nargs=2, metavar=("VALUE", "MAX"), required=True)
    sp.add_argument("--format", choices=("table", "csv", "json"), default="table")
    sp.set_defaults(func=cmd_score)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    if getattr(args, "n", 0) is not None and getattr(args, "n", 0) < 0:
        print(f"{PROG}: error: --n must be nonnegative", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args, out)
    except (FormatError, ConfigError, CorruptMacroError, LayoutError, TokenError, DataError,
            FileNotFoundError, KeyError, ValueError) as e:
        msg = str(e).strip("'\"")
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
