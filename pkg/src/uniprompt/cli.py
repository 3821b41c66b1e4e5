"""Command-line entry point: ``python -m uniprompt <subcommand> [config.json] [--set key=value]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation error.
Failures print one JSON object on a single stderr line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from uniprompt import config as config_mod
from uniprompt.checkpoint import load_strategy, save_encoder, save_strategy
from uniprompt.data import generate_synthetic, shifted_split
from uniprompt.diagnostics import (
    attention_response_map,
    gain_table_csv,
    gain_vs_variance_table,
    variance_report,
)
from uniprompt.errors import ConfigurationError, DimensionError, LengthError
from uniprompt.harness import (
    EpisodeSpec,
    RunRecord,
    evaluate,
    evaluate_targets,
    run_cell,
    run_matrix,
    sample_few_shot,
    summarize,
    train,
)
from uniprompt.prompts import make_strategy

EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 1, 2, 3
VALIDATION_ERRORS = (ConfigurationError, DimensionError, LengthError)
COMMANDS = ("gen-data", "init-backbone", "train", "eval", "matrix", "variance", "attn-map", "shift-eval")

RESULT_FIELDS = ["strategy", "shots", "seed", "accuracy", "ood_average"]
SUMMARY_FIELDS = ["strategy", "shots", "seeds", "failed", "accuracy", "ood_average"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="uniprompt", description="Prompt tuning experiments on a desk-scale dual encoder.")
    parser.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
    parser.add_argument("--precision", choices=sorted(config_mod.PRECISIONS), default=None)
    parser.add_argument("--threads", type=int, default=None, help="worker threads for grid cells")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", default=None, help="JSON config file (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.epochs=5")
        p.add_argument("--out", default=None, help="output directory")
        if name in ("train", "eval", "attn-map", "shift-eval"):
            p.add_argument("--strategy", default=None)
        if name in ("train", "eval", "shift-eval"):
            p.add_argument("--shots", type=int, default=None)
    return parser


# helpers ----------------------------------------------------------------------

def _write_csv(path, rows, fields):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    Path(path).write_text(buf.getvalue())
    return path


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _setup(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.resolved.json")
    dataset = config_mod.build_dataset(cfg)
    encoder = config_mod.build_encoder(cfg, dataset)
    return out, dataset, encoder


def _strategy_kwargs(cfg, kind):
    if kind == cfg["strategy"]["kind"] and cfg["strategy"]["hyperparameters"]:
        return dict(cfg["strategy"]["hyperparameters"])
    return dict(cfg["strategy_hyperparameters"].get(kind, {}))


def _shift_targets(cfg, dataset):
    spec = config_mod.synthetic_spec(cfg)
    targets = {}
    for i, t in enumerate(cfg["shift"]["targets"]):
        split = shifted_split(dataset.splits["test"], t["kind"], t["magnitude"], seed=spec.seed + i, spec=spec)
        targets[t["name"]] = (split, dataset.class_names)
    return targets


def _trained_strategy(cfg, out, encoder):
    path = cfg["strategy"]["checkpoint"] or (out / "strategy")
    if Path(path, "strategy.json").exists():
        return load_strategy(path, encoder)
    kind = cfg["strategy"]["kind"]
    if kind != "zero_shot":
        raise ConfigurationError(f"no trained {kind!r} checkpoint at {path}; run `train` first")
    return make_strategy(kind, encoder, seed=cfg["episode"]["seed"])


# subcommands -------------------------------------------------------------------

def cmd_gen_data(cfg):
    target = cfg["dataset"]["path"] or str(Path(cfg["output_dir"]) / "data")
    manifest = generate_synthetic(config_mod.synthetic_spec(cfg), target)
    config_mod.dump(cfg, Path(cfg["output_dir"]) / "config.resolved.json")
    _emit({"command": "gen-data", "path": target, "classes": manifest["class_names"]})


def cmd_init_backbone(cfg):
    out, _, encoder = _setup(cfg)
    save_encoder(encoder, out / "backbone")
    _emit({"command": "init-backbone", "path": str(out / "backbone"), "checksum": encoder.checksum()})


def cmd_train(cfg):
    out, dataset, encoder = _setup(cfg)
    kind = cfg["strategy"]["kind"]
    record, strategy = run_cell(encoder, dataset, kind, cfg["episode"]["shots"], cfg["episode"]["seed"],
                                config_mod.train_config(cfg), _strategy_kwargs(cfg, kind))
    save_strategy(strategy, out / "strategy", extra={"dataset": dataset.name, "shots": record.shots})
    (out / "train_record.json").write_text(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    _emit({"command": "train", "strategy": kind, "train_accuracy": record.train_accuracy,
           "test_accuracy": record.test_accuracy, "record": str(out / "train_record.json")})


def cmd_eval(cfg):
    out, dataset, encoder = _setup(cfg)
    strategy = _trained_strategy(cfg, out, encoder)
    acc = evaluate(strategy, encoder, dataset.splits["test"], dataset.class_names, cfg["train"]["eval_batch_size"])
    result = {"command": "eval", "strategy": strategy.kind.value, "accuracy": acc}
    (out / "eval.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    _emit(result)


def cmd_matrix(cfg):
    out, dataset, encoder = _setup(cfg)
    kinds = cfg["strategies"]
    kwargs = {k: _strategy_kwargs(cfg, k) for k in kinds}
    shifted = _shift_targets(cfg, dataset) if cfg["shift"]["targets"] else None
    records = run_matrix(encoder, dataset, kinds, cfg["grid"]["shots"], cfg["grid"]["seeds"],
                         config_mod.train_config(cfg), kwargs, threads=cfg["threads"], shifted=shifted)
    with open(out / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    rows = [{"strategy": r.strategy, "shots": r.shots, "seed": r.seed, "accuracy": r.test_accuracy,
             "ood_average": r.ood["ood_average"] if r.ood else None} for r in records]
    _write_csv(out / "results.csv", rows, RESULT_FIELDS)
    _write_csv(out / "summary.csv", summarize(records), SUMMARY_FIELDS)
    failed = sum(r.status != "ok" for r in records)
    _emit({"command": "matrix", "cells": len(records), "failed": failed,
           "results": str(out / "results.csv"), "summary": str(out / "summary.csv")})


def _read_records(path):
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(RunRecord(**json.loads(line)))
    return records


def cmd_variance(cfg):
    out, dataset, encoder = _setup(cfg)
    report = variance_report(encoder, dataset, cfg["variance"]["split"])
    (out / "variance.csv").write_text(report.to_csv())
    result = {"command": "variance", "dataset": dataset.name, "var_v": report.var_v, "var_t": report.var_t}
    records_path = cfg["variance"]["records"]
    if records_path:
        rows = gain_vs_variance_table(_read_records(records_path), [report])
        (out / "gain_vs_variance.csv").write_text(gain_table_csv(rows))
        result["gain_table"] = str(out / "gain_vs_variance.csv")
    _emit(result)


def cmd_attn_map(cfg):
    out, dataset, encoder = _setup(cfg)
    strategy = _trained_strategy(cfg, out, encoder)
    images = dataset.splits["test"].images
    written = []
    for idx in cfg["attention"]["images"]:
        if not 0 <= idx < len(images):
            raise ConfigurationError(f"attention image index {idx} outside the test split (size {len(images)})")
        amap = attention_response_map(encoder, strategy, images[idx], cfg["attention"]["layer"], image_id=f"test/{idx}")
        written.append(str(amap.save(out / "attention" / f"test_{idx}")))
    _emit({"command": "attn-map", "maps": written})


def cmd_shift_eval(cfg):
    out, dataset, encoder = _setup(cfg)
    kind = cfg["strategy"]["kind"]
    seed = cfg["episode"]["seed"]
    tcfg = config_mod.train_config(cfg, seed)
    strategy = make_strategy(kind, encoder, seed=seed, **_strategy_kwargs(cfg, kind))
    episode = EpisodeSpec(cfg["episode"]["shots"], seed, tuple(dataset.class_names))
    idx = sample_few_shot(dataset.splits["train"], episode, dataset.k)
    train(strategy, encoder, dataset.splits["train"].subset(idx), dataset.class_names, tcfg)
    result = evaluate_targets(strategy, encoder, _shift_targets(cfg, dataset), dataset.class_names, tcfg.eval_batch_size)
    result["source"] = evaluate(strategy, encoder, dataset.splits["test"], dataset.class_names, tcfg.eval_batch_size)
    rows = [{"target": name, "accuracy": acc} for name, acc in result["targets"].items()]
    rows.append({"target": "ood_average", "accuracy": result["ood_average"]})
    _write_csv(out / "shift.csv", rows, ["target", "accuracy"])
    _emit({"command": "shift-eval", "strategy": kind, **result})


HANDLERS = {
    "gen-data": cmd_gen_data,
    "init-backbone": cmd_init_backbone,
    "train": cmd_train,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "variance": cmd_variance,
    "attn-map": cmd_attn_map,
    "shift-eval": cmd_shift_eval,
}


def _fail(code, exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if getattr(args, "strategy", None):
            overrides.append(f"strategy.kind={json.dumps(args.strategy)}")
        if getattr(args, "shots", None) is not None:
            overrides.append(f"episode.shots={args.shots}")
        if args.out:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        cfg = config_mod.resolve(config_mod.load_config_file(args.config), overrides,
                                 seed=args.seed, precision=args.precision, threads=args.threads)
        HANDLERS[args.command](cfg)
    except VALIDATION_ERRORS as exc:
        return _fail(EXIT_VALIDATION, exc)
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        return _fail(EXIT_RUNTIME, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
