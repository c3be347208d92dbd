"""Command-line entry points.

Subcommands: generate-corpus, train, evaluate, infill-eval, sweep.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from . import autodiff as ad
from . import corpus as corpus_mod
from . import harness

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

_USAGE_ERRORS = (harness.ConfigError, corpus_mod.InvalidConfig,
                 corpus_mod.InvalidSplit)
_DATA_ERRORS = (harness.DataEmpty, harness.CorruptManifest,
                harness.CheckpointMismatch, ad.ShapeMismatch,
                corpus_mod.MalformedLine, corpus_mod.TooManySlots,
                corpus_mod.RecordRejected, FileNotFoundError,
                IsADirectoryError, PermissionError)


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_generate_corpus(args) -> int:
    cfg = corpus_mod.SynthConfig.from_dict(_load_json(args.config))
    rows = corpus_mod.generate_synthetic_rows(cfg, args.seed)
    corpus_mod.write_jsonl(rows, args.out)
    print(f"wrote {len(rows)} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = harness.RunConfig.from_json(args.config)
    _, _, _, rejects = harness.load_corpus(config)
    if rejects:
        print(json.dumps(rejects, sort_keys=True), file=sys.stderr)
    model, report = harness.train(config, checkpoint_dir=args.out)
    report.save(os.path.join(args.out, "report.json"))
    infill = "" if report.infill_acc is None else (
        f"  infill_acc={report.infill_acc:.4f} pmr={report.infill_pmr:.4f}")
    print(f"expr_acc={report.expr_acc:.4f}  value_acc={report.value_acc:.4f}"
          f"{infill}  ({report.wall_clock:.1f}s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _ = harness.load_checkpoint(args.checkpoint)
    records, rejects = corpus_mod.load_jsonl(
        args.data, model.config.constants, model.config.n_max)
    if rejects:
        print(json.dumps(rejects, sort_keys=True), file=sys.stderr)
    metrics = harness.evaluate_records(model, records, beam=args.beam)
    report = harness.MetricsReport(
        expr_acc=metrics["expr_acc"], value_acc=metrics["value_acc"],
        infill_acc=None, infill_pmr=None, n_records=metrics["n"],
        beam=args.beam, seed=model.config.seed, config=model.config.to_dict(),
    )
    report.save(args.out)
    print(f"expr_acc={report.expr_acc:.4f}  value_acc={report.value_acc:.4f}")
    return EXIT_OK


def cmd_infill_eval(args) -> int:
    model, _ = harness.load_checkpoint(args.checkpoint)
    records, rejects = corpus_mod.load_jsonl(
        args.data, model.config.constants, model.config.n_max)
    if rejects:
        print(json.dumps(rejects, sort_keys=True), file=sys.stderr)
    metrics = harness.infill_eval(model, records)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"infill_acc={metrics['acc']:.4f}  pmr={metrics['pmr']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = harness.RunConfig.from_json(args.config)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rows = harness.sweep_train_size(config, sizes, args.repeats)
    harness.write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mwpdual",
        description="Math word problem solving with a joint number-infilling task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-corpus", help="write a synthetic JSONL corpus")
    p.add_argument("--config", required=True, help="generator config JSON file")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(fn=cmd_generate_corpus)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--beam", type=int, default=1, choices=harness.BEAM_SIZES)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("infill-eval",
                       help="number-infilling metrics with gold expressions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(fn=cmd_infill_eval)

    p = sub.add_parser("sweep", help="training-set-size sweep")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--sizes", required=True, help="comma-separated sizes")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - boundary: anything else is internal
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
