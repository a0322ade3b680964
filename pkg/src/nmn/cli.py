"""``nmn`` command line: gen-data, train, eval, trace, gradcheck.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataset import DataSpec, generate_dataset, load_dataset
from .executor import ExecutionError, GuidancePolicy, NumericError, execute, instantiate
from .guidance import build_targets
from .synthdata import DataError
from .training import (
    PRESETS,
    ConfigError,
    TrainConfig,
    check_compatible,
    evaluate,
    flatten,
    load_checkpoint,
    neural,
    oracle,
    parse_override,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return flatten(json.load(fh))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}")


def _merged(args, extra: dict) -> dict:
    cfg = _read_config(args.config)
    for item in args.set or []:
        k, v = parse_override(item)
        cfg[k] = v
    cfg.update({k: v for k, v in extra.items() if v is not None})
    return cfg


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _merged(args, {"seed": args.seed})
    if args.out is None:
        raise UsageError("gen-data needs --out <dir>")
    try:
        spec = DataSpec.from_dict(cfg)
    except TypeError as exc:
        raise DataError(str(exc))
    generate_dataset(spec, args.out)
    print(f"wrote {spec.n_train} train / {spec.n_test} test examples to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {"seed": args.seed, "out": args.out, "data": args.data}
    cfg_dict = dict(PRESETS[args.preset]) if args.preset else {}
    cfg_dict.update(_merged(args, extra))
    cfg = TrainConfig.from_dict(cfg_dict)
    if args.verbose:
        cfg.verbose = True
    print(f"seed={cfg.seed} out={cfg.out}", file=sys.stderr)
    train(cfg, log=lambda line: print(line, flush=True))
    return EXIT_OK


def _limit(args):
    return {args.split: args.limit} if args.limit is not None else None


def cmd_eval(args) -> int:
    if args.data is None:
        raise UsageError("eval needs --data <dir>")
    ds = load_dataset(args.data, _limit(args))
    examples = ds.split(args.split)
    if args.oracle:
        report = evaluate(examples, oracle(ds.answer_vocab))
        report["model"] = "oracle"
        fields = {}
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        ck = load_checkpoint(args.checkpoint)
        lib = ck.modules()
        check_compatible(lib, ds)
        report = evaluate(examples, neural(lib))
        report["model"] = str(args.checkpoint)
        fields = ck.config.ablation_fields()
    report["split"] = args.split
    report.update(fields)
    _emit(json.dumps(report, sort_keys=True, indent=1) + "\n", args.out)
    return EXIT_OK


def cmd_trace(args) -> int:
    from .render import render_html, trace_document

    if args.data is None or args.checkpoint is None or args.example is None:
        raise UsageError("trace needs --checkpoint, --data and --example")
    ds = load_dataset(args.data)
    if args.example not in ds.examples:
        raise DataError(f"unknown example {args.example!r}")
    ex = ds.examples[args.example]
    ck = load_checkpoint(args.checkpoint)
    lib = ck.modules()
    check_compatible(lib, ds)
    gt = build_targets(ex.truth, ex.scene, ex.features.boxes, ck.config.match)
    tr = execute(instantiate(ex.program, ex.features, lib), GuidancePolicy(0.0, "inference"), gt, ex.truth.answer)
    doc = trace_document(tr, ex.features.boxes, ex.program.question)
    if args.render == "html":
        text = render_html(doc)
    else:
        text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    _emit(text, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    summary = gradcheck.run(float32=args.float32, detach=not args.no_detach)
    text = summary.render() + "\n"
    _emit(text, args.out)
    if args.out is not None:
        sys.stdout.write(text)
    return EXIT_OK if summary.ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (nested or dotted keys)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = _Parser(prog="nmn", description="Neural module networks with guided intermediate supervision.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train modules on a dataset")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--preset", choices=sorted(PRESETS), help="start from a named ablation config")
    t.add_argument("--verbose", action="store_true", help="also log every batch loss")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy report for a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint file or run directory")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--limit", type=int, help="evaluate only the first N examples")
    e.add_argument("--oracle", action="store_true", help="use the symbolic oracle in place of the modules")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("trace", parents=[common], help="render one example's execution")
    r.add_argument("--checkpoint", help="checkpoint file or run directory")
    r.add_argument("--data", help="dataset directory")
    r.add_argument("--example", help="example id, e.g. test-000042")
    r.add_argument("--render", choices=("json", "html"), default="json")
    r.set_defaults(func=cmd_trace)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--float32", action="store_true", help="single precision (tolerance 1e-2)")
    c.add_argument("--no-detach", action="store_true", help="debug: let gradient leak through ground-truth inputs")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: --help (0) or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"nmn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"nmn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ExecutionError, dc.ShapeError, OSError) as exc:
        print(f"nmn: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
