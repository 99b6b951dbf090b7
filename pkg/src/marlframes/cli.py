"""Command-line entry point: ``marlframes <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classify import mean_average_precision, pooled_prediction, write_predictions_csv
from .config import ConfigError, ExperimentConfig, load_config, parse_kv
from .envdata import DatasetFormatError, SyntheticSpec, generate_synthetic, pad_dataset, read_dataset, write_dataset
from .gradcheck import run_gradcheck
from .learn import DivergenceError, TrainReport, train
from .sampler import Action, run_episode

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

_SPEC_FIELDS = {f.name: f for f in fields(SyntheticSpec)}
_SPEC_KEYS = dict(_SPEC_FIELDS, val_videos_per_class=None)


def parse_synthetic_spec(text: str, source: str = "<spec>") -> tuple[SyntheticSpec, int]:
    """SyntheticSpec from ``key = value`` text; also returns ``val_videos_per_class``."""
    raw = parse_kv(text, _SPEC_KEYS, source)
    values, n_val = {}, 0
    for key, (lineno, value) in raw.items():
        try:
            if key == "val_videos_per_class":
                n_val = int(value)
                continue
            kind = _SPEC_FIELDS[key].type
            values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    spec = SyntheticSpec(**values)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if n_val < 0:
        raise ConfigError(f"{source}: val_videos_per_class must be >= 0")
    return spec, n_val


def cmd_generate_data(args) -> int:
    spec, n_val = parse_synthetic_spec(Path(args.spec_file).read_text(encoding="utf-8"), args.spec_file)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out_dir)
    splits = [("train", spec)]
    if n_val:
        splits.append(("val", replace(spec, split="val", videos_per_class=n_val)))
    for name, s in splits:
        ds = generate_synthetic(replace(s, split=name))
        write_dataset(ds, out / name)
        print(f"{name}: {len(ds)} sequences, C={ds.num_classes}, F={spec.F}, D={spec.D} -> {out / name}")
    return EXIT_OK


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    base = Path(args.config).parent
    train_ds = read_dataset(base / cfg.train_path)
    val_ds = read_dataset(base / cfg.val_path) if cfg.val_path else None
    out = Path(args.out) if args.out else base / cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    report_path.write_text(TrainReport.CSV_HEADER + "\n")

    def on_epoch(stats, params):
        line = TrainReport(epochs=[stats]).csv_lines()[1]
        with open(report_path, "a") as fh:
            fh.write(line + "\n")
        save_checkpoint(out / "last.mckp", params, cfg)

    try:
        params, report = train(cfg, train_ds, val_ds, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    save_checkpoint(out / "best.mckp", params, cfg)
    print(f"best epoch {report.best_epoch} val top1 {report.best_val_top1:.4f}; checkpoint {out / 'best.mckp'}")
    return EXIT_OK


def _eval_setup(args):
    params, cfg = load_checkpoint(args.checkpoint)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    ds = pad_dataset(read_dataset(args.dataset, params.dims.C), cfg.F)
    if ds.dim != params.dims.D:
        raise ConfigError(f"dataset D={ds.dim} does not match checkpoint D={params.dims.D}")
    N = args.N if args.N is not None else cfg.N_test
    return params, cfg, ds, N


def cmd_evaluate(args) -> int:
    params, cfg, ds, N = _eval_setup(args)
    preds = []
    for seq in ds:
        tr = run_episode(params, seq, N, params.dims.M, cfg.delta, cfg.T_max, mode="greedy")
        preds.append(pooled_prediction(seq.id, tr.logits[-1], tr.final_positions))
    metrics = mean_average_precision(preds, ds.labels)
    if args.predictions:
        write_predictions_csv(args.predictions, preds, ds.labels)
    print(f"N={N} top1={metrics.top1:.6f} mAP={metrics.mAP:.6f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    params, cfg, ds, N = _eval_setup(args)
    sweep = [int(x) for x in args.n_sweep.split(",")] if args.n_sweep else []
    rows = bench.compare(params, ds, cfg, K=N, repeats=args.repeats, n_sweep=sweep,
                         oracle_cap=args.oracle_cap, oracle=not args.no_oracle)
    text = bench.results_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = run_gradcheck(args.seed or 0)
    if res.passed(args.tol):
        print(f"PASS, max rel err < {args.tol:g} (max {res.max_rel_err:.3e} over {res.n_entries} entries)")
        return EXIT_OK
    print(f"FAIL, max rel err {res.max_rel_err:.3e} at {res.worst_param} (tolerance {args.tol:g})")
    return EXIT_VALIDATION


def trace_record(seq, trace, scores) -> dict:
    return {
        "id": seq.id,
        "label": int(seq.label),
        "t_stop": int(trace.t_stop),
        "positions": trace.positions.tolist(),
        "actions": [[Action(int(a)).name for a in step] for step in trace.actions],
        "scores": [float(s) for s in scores],
    }


def cmd_trace(args) -> int:
    params, cfg, ds, N = _eval_setup(args)
    seqs = ds.sequences[: args.limit] if args.limit else ds.sequences
    with open(args.out, "w", encoding="utf-8") as fh:
        for seq in seqs:
            tr = run_episode(params, seq, N, params.dims.M, cfg.delta, cfg.T_max, mode="greedy")
            pred = pooled_prediction(seq.id, tr.logits[-1], tr.final_positions)
            fh.write(json.dumps(trace_record(seq, tr, pred.scores)) + "\n")
    print(f"wrote {len(seqs)} traces to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marlframes", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override every seed")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic planted-saliency dataset")
    g.add_argument("spec_file")
    g.add_argument("out_dir")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train agents and classifier from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.set_defaults(func=cmd_train)

    def eval_args(sp):
        sp.add_argument("checkpoint")
        sp.add_argument("dataset")
        sp.add_argument("--N", type=int, default=None, help="test-time agents (default N_test)")

    e = sub.add_parser("evaluate", help="greedy MARL top-1 and mAP")
    eval_args(e)
    e.add_argument("--predictions", help="write per-video predictions CSV")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="R-K / U-K / All / MARL (/ oracle) table")
    eval_args(c)
    c.add_argument("--repeats", type=int, default=3)
    c.add_argument("--n-sweep", default="", help="comma-separated extra agent counts")
    c.add_argument("--oracle-cap", type=int, default=bench.DEFAULT_ORACLE_CAP)
    c.add_argument("--no-oracle", action="store_true")
    c.add_argument("--out", help="also write the CSV here")
    c.set_defaults(func=cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference check on the tiny model")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    tr = sub.add_parser("trace", help="write per-video episode traces as JSON lines")
    eval_args(tr)
    tr.add_argument("out")
    tr.add_argument("--limit", type=int, default=0)
    tr.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
