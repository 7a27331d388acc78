"""Command-line interface.

Subcommands mirror the pipeline's public operations: run one exam, batch a
directory tree, evaluate results against stored truth, generate phantom
exams, and train models on a directory of exams. Exit code 0 means no
fatal error; per-exam failures inside a batch are reported, not fatal.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ContractViolation, WeightFormatError
from .nn.weights import save_model
from .phantom_gen import PhantomSpec, generate_phantom_exam
from .pipeline import (
    ModelBundle,
    PipelineConfig,
    aggregate_metrics,
    evaluate_exam,
    format_summary,
    load_result,
    run_batch,
    run_pipeline,
    write_result,
)
from .training import train_all_models, train_model


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "workers", None):
        cfg = dataclasses.replace(cfg, workers=args.workers)
    return cfg


def _status_line(report) -> str:
    parts = [f"{report.exam_id}: {report.status}"]
    if report.function:
        fn = report.function
        parts.append(f"EDV {fn['edv_ml']:.1f} mL, ESV {fn['esv_ml']:.1f} mL, "
                     f"EF {fn['ef']:.2f}, mass {fn['mass_g']:.1f} g")
    flagged = [k for k, v in report.flags.items() if v]
    if flagged:
        parts.append("flags: " + ",".join(flagged))
    return "  ".join(parts)


def _cmd_run(args) -> int:
    models = ModelBundle.load(args.weights)
    config = _load_config(args)
    result = run_pipeline(args.exam_dir, models, config)
    print(_status_line(result.report))
    if args.out:
        write_result(result, args.out)
        print(f"wrote {Path(args.out) / 'report.json'}")
    return 0


def _cmd_batch(args) -> int:
    models = ModelBundle.load(args.weights)
    config = _load_config(args)
    results, summary = run_batch(args.root_dir, models, config)
    for r in results:
        print(_status_line(r.report))
    print(format_summary(summary))
    if args.out:
        out = Path(args.out)
        for r in results:
            write_result(r, out / r.report.exam_id)
        (out / "summary.json").write_text(
            json.dumps(summary, indent=1, sort_keys=True))
        print(f"wrote {len(results)} reports under {out}")
    return 0


def _eval_one(result_dir, truth_dir) -> dict:
    return evaluate_exam(load_result(result_dir), truth_dir)


def _cmd_eval(args) -> int:
    result_root = Path(args.result_dir)
    truth_root = Path(args.truth_dir)
    if (result_root / "report.json").is_file():
        payload = _eval_one(result_root, truth_root)
    else:
        # roots of many results/exams, matched by directory name
        records = []
        for sub in sorted(p for p in result_root.iterdir() if p.is_dir()):
            if not (sub / "report.json").is_file():
                continue
            truth = truth_root / sub.name
            if not (truth / "truth.json").is_file():
                print(f"skipping {sub.name}: no truth directory", file=sys.stderr)
                continue
            records.append(_eval_one(sub, truth))
        if not records:
            raise ContractViolation("no evaluable (result, truth) pairs found")
        payload = {"exams": records, "aggregate": aggregate_metrics(records)}
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_phantom(args) -> int:
    data = json.loads(Path(args.spec).read_text())
    out = Path(args.out)
    count = data.pop("count", None)
    if args.seed is not None:
        data["seed"] = args.seed
    if count is None:
        spec = PhantomSpec(**data)
        truth = generate_phantom_exam(spec, out)
        print(f"wrote exam to {out} ({truth.n_files} files, "
              f"sax stack {truth.sax_stack_id})")
    else:
        base = data.pop("seed", 0)
        from .datasets import generate_training_exams
        dirs = generate_training_exams(int(count), out, base_seed=base, **data)
        print(f"wrote {len(dirs)} exams under {out}")
    return 0


def _cmd_train(args) -> int:
    root = Path(args.exams_root)
    exam_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not exam_dirs:
        raise ContractViolation(f"{root} contains no exam directories")
    out = Path(args.out)
    if args.kind == "all":
        histories = train_all_models(exam_dirs, out, seed=args.seed)
        for kind, h in histories.items():
            print(f"{kind}: final loss {h['loss'][-1]:.4f}")
    else:
        model, history = train_model(args.kind, exam_dirs, seed=args.seed)
        save_model(model, out / args.kind)
        print(f"{args.kind}: final loss {history['loss'][-1]:.4f}")
    print(f"saved under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmrpipe",
        description="Cardiac cine MR ventricular function pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process one exam directory")
    p_run.add_argument("exam_dir")
    p_run.add_argument("--weights", required=True, help="weight bundle directory")
    p_run.add_argument("--config", help="pipeline config JSON")
    p_run.add_argument("--out", help="directory for report.json + predictions")
    p_run.set_defaults(func=_cmd_run)

    p_batch = sub.add_parser("batch", help="process every exam under a root")
    p_batch.add_argument("root_dir")
    p_batch.add_argument("--weights", required=True)
    p_batch.add_argument("--config")
    p_batch.add_argument("--out")
    p_batch.add_argument("--workers", type=int, help="concurrent exams")
    p_batch.set_defaults(func=_cmd_batch)

    p_eval = sub.add_parser(
        "eval", help="score results against stored ground truth")
    p_eval.add_argument("result_dir",
                        help="one result directory, or a root of them")
    p_eval.add_argument("truth_dir",
                        help="matching exam directory, or a root of them")
    p_eval.add_argument("--out", help="write metrics JSON here")
    p_eval.set_defaults(func=_cmd_eval)

    p_phantom = sub.add_parser("phantom", help="generate synthetic exams")
    p_phantom.add_argument("spec", help="spec JSON; a 'count' key makes a suite")
    p_phantom.add_argument("--out", required=True)
    p_phantom.add_argument("--seed", type=int)
    p_phantom.set_defaults(func=_cmd_phantom)

    p_train = sub.add_parser("train", help="train models on phantom exams")
    p_train.add_argument("exams_root")
    p_train.add_argument("kind",
                         choices=("classifier", "locator", "segmenter", "all"))
    p_train.add_argument("--out", required=True, help="weight bundle directory")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.set_defaults(func=_cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, WeightFormatError, FileNotFoundError,
            json.JSONDecodeError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
