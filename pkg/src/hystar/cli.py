"""``hystar`` command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate, read_dataset, write_dataset
from .errors import ConfigError, FormatError, HystarError, NumericAbort
from .gradcheck import THRESHOLDS, run_gradcheck
from .losses import cost_matrix, similarity_matrix, sinkhorn, write_matrix_csv
from .tensor_core import precision
from .training import (
    ABLATION_ROWS,
    GAMMA_SWEEP,
    LAMBDA_SWEEP,
    METRICS_COLUMNS,
    EpochRecord,
    build_model,
    eval_split,
    evaluate,
    export_embeddings,
    metrics_rows,
    run_ablation,
    run_sweep,
    table_rows,
    train,
    write_csv,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "model.hyst"


class UsageError(HystarError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> config_mod.RunConfig:
    return config_mod.load_config(args.config, args.set)


def _dataset(args):
    if not args.data:
        raise UsageError("--data is required")
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    return read_dataset(args.data)


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds: expected a comma list of integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _run_id(cfg: config_mod.RunConfig) -> str:
    return f"{cfg.train.ablation_mode}-{cfg.train.loss}-s{cfg.seed}"


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    ds = generate(cfg.data)
    out = _out_dir(args)
    write_dataset(ds, out)
    config_mod.write_resolved(cfg, out)
    n_styles = len(ds.styles)
    print(f"wrote {len(ds)} items ({cfg.data.n_classes} classes x {cfg.data.samples_per_class_per_style} "
          f"instances x {n_styles} styles) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    ds = _dataset(args)
    out = _out_dir(args)
    config_mod.write_resolved(cfg, out)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.encoder, cfg.train)
    try:
        history = train(model, ds, cfg.train, dump_dir=out)
    except NumericAbort as exc:
        print(f"numeric abort: {exc} (state dumped to {exc.dump_path})", file=sys.stderr)
        return EXIT_NUMERIC
    write_csv(out / "metrics.csv", METRICS_COLUMNS, metrics_rows(history, _run_id(cfg), cfg.seed, cfg.train.ablation_mode))
    save_checkpoint(model, out / CHECKPOINT_NAME)
    final = history[-1].metrics
    if final is not None:
        print(f"epoch {history[-1].epoch}: mean top1 {final.mean_top1:.2f} top5 {final.mean_top5:.2f}")
    return EXIT_OK


def _restore(args, cfg):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = build_model(cfg.encoder, cfg.train)
    load_checkpoint(model, args.checkpoint)
    return model


def cmd_eval(args) -> int:
    cfg = _load(args)
    ds = _dataset(args)
    model = _restore(args, cfg)
    out = _out_dir(args)
    config_mod.write_resolved(cfg, out)
    metrics = evaluate(model, ds, eval_split(ds, cfg.train))
    # labelled with the final training epoch so the row matches the training log
    record = EpochRecord(cfg.train.epochs, float("nan"), metrics)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, metrics_rows([record], _run_id(cfg), cfg.seed, cfg.train.ablation_mode))
    for style in metrics.top1:
        print(f"{style}: top1 {metrics.top1[style]:.2f} top5 {metrics.top5[style]:.2f}")
    print(f"mean: top1 {metrics.mean_top1:.2f} top5 {metrics.mean_top5:.2f}")
    return EXIT_OK


def _history_rows(results) -> list[list[str]]:
    rows = []
    for r in results:
        rows += metrics_rows(r["history"], f"{r['label']}-s{r['seed']}", r["seed"], r["label"])
    return rows


def cmd_ablate(args) -> int:
    cfg = _load(args)
    ds = _dataset(args)
    out = _out_dir(args)
    config_mod.write_resolved(cfg, out)
    results = run_ablation(ds, cfg.encoder, cfg.train, seeds=_seeds(args.seeds), rows=ABLATION_ROWS)
    header, rows = table_rows(results, ds.styles[1:])
    write_csv(out / "ablation.csv", header, rows)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, _history_rows(results))
    for row in rows:
        print(",".join(row))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    ds = _dataset(args)
    out = _out_dir(args)
    config_mod.write_resolved(cfg, out)
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--values: expected a comma list of numbers, got {args.values!r}") from None
    else:
        values = list(GAMMA_SWEEP if args.param == "gamma" else LAMBDA_SWEEP)
    results = run_sweep(ds, cfg.encoder, cfg.train, args.param, values, seeds=_seeds(args.seeds))
    header, rows = table_rows(results, ds.styles[1:])
    write_csv(out / f"sweep_{args.param}.csv", header, rows)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, _history_rows(results))
    for row in rows:
        print(",".join(row))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    cfg = _load(args)
    ds = _dataset(args)
    model = _restore(args, cfg)
    out = _out_dir(args)
    config_mod.write_resolved(cfg, out)
    export_embeddings(model, ds, out / "embeddings.csv")
    print(f"wrote {len(ds)} embeddings to {out / 'embeddings.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    threshold = THRESHOLDS[args.scope]
    errs = run_gradcheck(args.scope, seed=args.seed, corrupt_adjoint=args.corrupt_adjoint)
    print(f"scope {args.scope}: threshold {threshold:g}")
    failed = []
    for name, err in errs.items():
        ok = err <= threshold
        print(f"  {name}: max relative error {err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_sinkhorn_demo(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    if args.iters < 1:
        raise UsageError("--iters must be positive")
    with precision(torch.float64):
        g = torch.Generator().manual_seed(args.seed)
        S = similarity_matrix(torch.randn(args.n, args.dim, generator=g), torch.randn(args.n, args.dim, generator=g))
        plan = sinkhorn(cost_matrix(S, args.lambda_), args.epsilon, args.iters, record_every=10)
    for k, dev in enumerate(plan.history, start=1):
        print(f"iter {10 * k}: marginal deviation {dev:.3e}")
    print(f"final ({args.iters} iters): marginal deviation {plan.deviation:.3e}")
    if args.n <= 8:
        print(plan.plan.tolist())
    out = _out_dir(args)
    write_matrix_csv(plan.plan, out / "T.csv")
    return EXIT_OK


def _common(p: argparse.ArgumentParser, data=True, checkpoint=False) -> None:
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=True, help="output directory")
    if data:
        p.add_argument("--data", help="dataset directory written by gen-data")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint written by train")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hystar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-style benchmark")
    _common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _common(p, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="frozen / static / hybrid ablation table")
    _common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="loss hyperparameter sweep")
    _common(p)
    p.add_argument("--param", choices=("gamma", "lambda"), required=True)
    p.add_argument("--values", help="comma list; defaults to the standard grid for --param")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="write embeddings of every item as CSV")
    _common(p, checkpoint=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient check")
    p.add_argument("--scope", choices=tuple(THRESHOLDS), default="loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sinkhorn-demo", help="transport plan on a random similarity batch")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--lambda", dest="lambda_", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--dim", type=int, default=16, help="embedding width of the random batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_sinkhorn_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
