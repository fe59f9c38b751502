"""Command-line front end: train, eval, predict, latents, sweep.

Every subcommand writes CSV with a fixed header so downstream tooling can
parse the output without guessing. `predict` consumes an .npz trajectory
log; `eval --record-dir` produces such logs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .autodiff import ConfigurationError, F32
from .config import TrainConfig, load_config
from .evalkit import (
    EVAL_HEADER,
    PREDICT_HEADER,
    SWEEP_HEADER,
    evaluate,
    export_latents,
    linear_probe,
    load_bundle,
    open_loop_report,
    run_episode,
    sweep,
    write_csv,
    write_latents_csv,
)
from .terrain import TerrainFamily


def _load_train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_depth:
        cfg.no_depth = True
        cfg.wm.no_depth = True
    if args.no_prop:
        cfg.no_prop = True
        cfg.wm.no_prop = True
    if args.k is not None:
        cfg.wm.k = args.k
        cfg.wm.segment_length -= cfg.wm.segment_length % cfg.wm.k
        cfg.wm.segment_length = max(cfg.wm.segment_length, cfg.wm.k)
    if args.train_seconds is not None:
        cfg.set_segment_seconds(args.train_seconds)
    if args.run_dir is not None:
        cfg.run_dir = args.run_dir
    if args.iterations is not None:
        cfg.iterations = args.iterations
    return cfg


def _parse_families(spec: str) -> list[str]:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    if not names:
        raise ConfigurationError("no terrain families given")
    valid = {fam.value for fam in TerrainFamily}
    for name in names:
        if name not in valid:
            raise ConfigurationError(
                f"unknown terrain family {name!r}; choose from {sorted(valid)}")
    return names


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _load_train_config(args)
    Trainer(cfg).train()
    print(f"run complete; diagnostics at {os.path.join(cfg.run_dir, 'diagnostics.csv')}")
    return 0


def cmd_eval(args) -> int:
    cfg, wm, policy, disc = load_bundle(args.checkpoint)
    families = _parse_families(args.terrains)
    rows = evaluate(cfg, wm, policy, disc, families,
                    episodes=args.episodes, seed=args.seed)
    write_csv(args.out, rows, EVAL_HEADER)
    for row in rows:
        print(f"{row['family']}: return {row['return_mean']:.2f} "
              f"± {row['return_std']:.2f}, tracking mse "
              f"{row['tracking_mse_mean']:.4f}, success {row['success_rate']:.2f}")
    if args.record_dir:
        os.makedirs(args.record_dir, exist_ok=True)
        for family in families:
            stats = run_episode(cfg, wm, policy, disc, TerrainFamily(family),
                                level=3, seed=args.seed, record=True)
            np.savez(os.path.join(args.record_dir, f"{family}.npz"),
                     **stats["log"])
    print(f"wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    cfg, wm, _, _ = load_bundle(args.checkpoint)
    with np.load(args.log) as data:
        log = {key: data[key].astype(F32)
               for key in ("proprio", "depth", "actions")}
    rows = open_loop_report(wm, log, horizon=args.horizon)
    write_csv(args.out, rows, PREDICT_HEADER)
    wins = sum(r["model_mse"] < r["persistence_mse"] for r in rows[1:])
    print(f"model beats persistence at {wins}/{max(len(rows) - 1, 1)} steps; "
          f"wrote {args.out}")
    return 0


def cmd_latents(args) -> int:
    cfg, wm, policy, _ = load_bundle(args.checkpoint)
    families = _parse_families(args.terrains)
    rows = export_latents(cfg, wm, policy, families,
                          n_per_terrain=args.n, seed=args.seed)
    write_latents_csv(args.out, rows)
    acc = linear_probe(rows, seed=args.seed)
    print(f"{len(rows)} rows written to {args.out}; "
          f"linear probe held-out accuracy {acc:.3f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    values_type = int if args.param == "k" else float
    values = [values_type(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, args.param, values, iterations=args.iterations,
                 run_root=args.run_root)
    write_csv(args.out, rows, SWEEP_HEADER)
    for row in rows:
        print(f"{args.param}={row['value']}: mean return {row['mean_return']:.3f}")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terrarun",
        description="Train and evaluate a latent world-model runner "
                    "on procedural 2D terrain.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training loop")
    p_train.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--no-depth", action="store_true", dest="no_depth")
    p_train.add_argument("--no-prop", action="store_true", dest="no_prop")
    p_train.add_argument("--k", type=int, help="world-model update interval (control steps)")
    p_train.add_argument("--train-seconds", type=float, dest="train_seconds",
                         help="training segment length in seconds")
    p_train.add_argument("--run-dir", dest="run_dir")
    p_train.add_argument("--iterations", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="per-terrain score table from a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--terrains", default="slope,stair,gap,climb,crawl",
                        help="comma-separated terrain families")
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default="eval_report.csv")
    p_eval.add_argument("--record-dir", dest="record_dir",
                        help="also dump one .npz trajectory log per family")
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="open-loop depth prediction report")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--log", required=True,
                        help=".npz with proprio/depth/actions arrays")
    p_pred.add_argument("--horizon", type=int, default=50)
    p_pred.add_argument("--out", default="predict_report.csv")
    p_pred.set_defaults(func=cmd_predict)

    p_lat = sub.add_parser("latents", help="export labelled recurrent states")
    p_lat.add_argument("--checkpoint", required=True)
    p_lat.add_argument("--terrains", default="slope,stair,gap,climb,crawl")
    p_lat.add_argument("--n", type=int, default=500, help="rows per family")
    p_lat.add_argument("--seed", type=int, default=0)
    p_lat.add_argument("--out", default="latents.csv")
    p_lat.set_defaults(func=cmd_latents)

    p_sweep = sub.add_parser("sweep", help="train once per parameter value")
    p_sweep.add_argument("--param", required=True,
                         choices=["k", "train_seconds"])
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values, e.g. 1,5,15")
    p_sweep.add_argument("--config")
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--iterations", type=int, default=200)
    p_sweep.add_argument("--run-root", dest="run_root", default="sweep_runs")
    p_sweep.add_argument("--out", default="sweep_report.csv")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
