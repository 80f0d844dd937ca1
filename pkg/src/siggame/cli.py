"""Command-line entry point: ``siggame {train,sweep,analyze,verify,dump-language}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import (
    PRESETS,
    ExperimentConfig,
    MetricsConfig,
    analyze,
    dump_language,
    preset,
    sweep,
    train,
)
from .game import CorpusFormatError, ObjectDistribution, object_to_index, read_corpus


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = _parse_value(value)
    return out


def _config(args, preset_name=None) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = preset(preset_name or args.preset, args.objective)
    overrides = _overrides(args.set)
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    return cfg.with_overrides(overrides) if overrides else cfg


def _add_config_args(p, multi: bool = False):
    if multi:
        p.add_argument("--preset", action="append", choices=sorted(PRESETS), help="repeatable")
        p.add_argument("--objective", action="append", choices=["ours", "bl1", "bl2"], help="repeatable")
    else:
        p.add_argument("--preset", default="desk-2x8", choices=sorted(PRESETS))
        p.add_argument("--objective", default="ours", choices=["ours", "bl1", "bl2"])
    p.add_argument("--config", help="JSON experiment config; overrides the preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. optim.lr=0.001")
    p.add_argument("--output-dir", help="output root (default: $SIGGAME_OUTPUT_ROOT or ./runs)")


def cmd_train(args) -> int:
    cfg = _config(args)
    seeds = args.seed if args.seed is not None else list(cfg.seeds)
    for seed in seeds:
        progress = None
        if args.verbose:
            progress = lambda row: print(json.dumps(row), file=sys.stderr)
        rec = train(cfg, seed, progress)
        print(json.dumps({"seed": seed, "accuracy": rec.accuracy, "run": str(Path(rec.log_path).parent),
                          **rec.metrics}))
    return 0


def cmd_sweep(args) -> int:
    configs = []
    if args.config:
        configs.append(_config(args))
    else:
        for name in args.preset or ["desk-2x8"]:
            for obj in args.objective or ["ours"]:
                args_single = argparse.Namespace(**{**vars(args), "objective": obj, "config": None})
                configs.append(_config(args_single, name))
    result = sweep(configs, args.seeds, args.parallel, args.out)
    for row in result.summary:
        print(json.dumps(row))
    for f in result.failures:
        print(f"FAILED {f['name']} seed {f['seed']}: {f['error']}", file=sys.stderr)
    return 0 if not result.failures else 1


def cmd_analyze(args) -> int:
    metrics = MetricsConfig(args.threshold, args.strip_eos, args.add_k)
    try:
        freqs = None
        if args.power_law is not None:
            objects, _ = read_corpus(args.corpus)
            n_val = args.n_val or int(objects.max()) + 1
            dist = ObjectDistribution(objects.shape[1], n_val, "power-law", args.power_law)
            freqs = dist.probs[object_to_index(objects, n_val)]
        report = analyze(args.corpus, args.out, metrics, freqs, svg=args.svg)
    except CorpusFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report.row()))
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def cmd_dump(args) -> int:
    n = dump_language(args.checkpoint, args.out)
    print(f"wrote {n} messages to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siggame", description="Signaling-game experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one config for one or more seeds")
    _add_config_args(p)
    p.add_argument("--seed", type=int, action="append", help="repeatable; default: the config's seeds")
    p.add_argument("-v", "--verbose", action="store_true", help="print a log row every 100 updates")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train configs x seeds and aggregate mean and SEM")
    _add_config_args(p, multi=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True, help="directory for runs.csv, summary.csv and panel CSVs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="compute metrics for a JSON-lines corpus")
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--strip-eos", action="store_true")
    p.add_argument("--add-k", type=float, default=0.0)
    p.add_argument("--power-law", type=float, metavar="EXPONENT", help="object frequencies ∝ (index+1)^-EXPONENT")
    p.add_argument("--n-val", type=int, help="values per attribute (default: inferred from the corpus)")
    p.add_argument("--svg", action="store_true", help="also render the ZLA curve as SVG")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="run the enumeration and property oracle suite")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dump-language", help="greedy corpus from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())
