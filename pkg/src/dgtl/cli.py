"""``dgtl`` command line: gen-data, train, eval, ablate, grad-check.

Every subcommand accepts ``--config <file.json>``; flags named after
RunConfig keys (``--margin-coarse 0.8``) override file values, and
``DGTL_SEED`` overrides every seed. Exit status: 0 success, 1 config or
data error, 2 numerical error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .config import RunConfig, default_config
from .errors import DGTLError, NumericalError
from .retrieval import evaluate, read_features_csv
from .synthetic import generate, save_dataset
from .trainer import grad_check

logger = logging.getLogger("dgtl")

_CHOICES = {
    "pool_fine": ("avg", "max", "gem"),
    "pool_coarse": ("avg", "max", "gem"),
    "fusion": ("sum", "cat"),
    "arrangement": ("f2f", "c2c", "c2f", "f2c", "FineOnly_f", "FineOnly_c", "FineOnly_fc"),
    "fine_feature": ("f_p", "f_bn"),
    "coarse_feature": ("f_pf", "f_bnf"),
}


def _add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON run config (defaults to the shipped benchmark)")
    defaults = RunConfig()
    group = parser.add_argument_group("run config overrides")
    for key in RunConfig.keys():
        flag = "--" + key.replace("_", "-")
        value = getattr(defaults, key)
        kwargs = {"dest": key, "default": None}
        if isinstance(value, tuple):
            kwargs.update(type=int, nargs="+")
        elif key in _CHOICES:
            kwargs.update(choices=_CHOICES[key])
        elif isinstance(value, bool) or value is None:
            kwargs.update(type=str)
        else:
            kwargs.update(type=type(value))
        group.add_argument(flag, **kwargs)


def resolve_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else default_config()
    overrides = {k: getattr(args, k) for k in RunConfig.keys() if getattr(args, k, None) is not None}
    return run.replace(**overrides).with_env_seed()


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args):
    run = resolve_config(args)
    out = save_dataset(generate(run.synthetic_spec()), args.out_dir)
    print(f"wrote {out}")
    return 0


def cmd_train(args):
    run = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.npz"
    history_path = Path(args.history_out) if args.history_out else out / "history.jsonl"
    trainer, results, untrained = experiment.run_experiment(run, checkpoint_path=ckpt)
    echo = run.to_dict()
    with open(history_path, "w") as fh:
        fh.write(json.dumps({"record": "config", "config": echo}, sort_keys=True) + "\n")
        for rec in trainer.history.records:
            fh.write(json.dumps({"record": "step", **rec}, sort_keys=True) + "\n")
    summary = {"config": echo, "results": experiment.summary_record(results),
               "untrained": experiment.summary_record(untrained)}
    _write_json(out / "summary.json", summary)
    print(experiment.format_train_table(results))
    print(f"checkpoint: {ckpt}\nhistory: {history_path}\nsummary: {out / 'summary.json'}")
    return 0


def cmd_eval(args):
    query = read_features_csv(args.query)
    gallery = read_features_csv(args.gallery)
    result = evaluate(query, gallery, check_modalities=not args.allow_same_modality)
    record = result.record()
    if args.out:
        _write_json(args.out, record)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_ablate(args):
    run = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = experiment.run_ablation(run, args.axis, args.grid, args.jobs)
    with open(out / f"ablation_{args.axis}.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps({**row, "axis": args.axis}, sort_keys=True) + "\n")
    table = experiment.format_table(rows)
    (out / f"ablation_{args.axis}.txt").write_text(table + "\n")
    print(table)
    for fail in failures:
        print(f"cell {fail['cell_id']} failed: {fail['error']}", file=sys.stderr)
    return 1 if failures else 0


def cmd_grad_check(args):
    run = resolve_config(args)
    cfg = run.train_config(run.P)
    report = grad_check(cfg, args.num_params, run.model_seed)
    summary = {"config": run.to_dict(), **report.summary()}
    if args.out:
        _write_json(args.out, summary)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_error:.3e} at {report.worst} "
          f"({report.checked} coordinates, {len(report.ties)} tie exclusions)")
    return 0 if report.passed else 2


def build_parser():
    parser = argparse.ArgumentParser(prog="dgtl", description=__doc__.splitlines()[0].replace("``", ""))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (samples.npy, index.csv, spec.json)")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train, then evaluate both query directions for f_bn and f_bnf")
    _add_config_flags(p)
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--history-out", help="history JSONL path (default <out-dir>/history.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score query/gallery feature CSVs")
    p.add_argument("query")
    p.add_argument("gallery")
    p.add_argument("--out", help="write the result record as JSON")
    p.add_argument("--allow-same-modality", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every cell of one ablation axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=experiment.AXES)
    p.add_argument("--grid", type=float, nargs="+", help="margin_mc values (default 0.1 .. 0.9)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model on one small batch")
    _add_config_flags(p)
    p.add_argument("--num-params", type=int, default=20)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (DGTLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
