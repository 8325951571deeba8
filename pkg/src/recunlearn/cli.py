"""Command-line entry point: ``python -m recunlearn <command>``.

Commands: prepare, train, unlearn, attack, eval, cka, run. Exit status is 0 on
success, 1 if any grid cell failed, and 2 for bad input (missing files,
malformed data or config).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .dataset import DatasetError
from .metrics import ranking_long_rows, ranking_report
from .mio import assess_completeness
from .model import load_params, save_params, train
from .pipeline import (
    COMPLETENESS_SCHEMA,
    RANKING_SCHEMA,
    cka_rows,
    cka_study,
    load_prepared,
    obtain_data,
    original_hyper,
    prepare,
    read_json,
    remaining_users,
    request_from_dict,
    request_seed,
    request_to_dict,
    run_grid,
    write_json,
    write_prepared,
    write_rows,
)
from .unlearner import StrategyConfig, make_rand_at, unlearn

logger = logging.getLogger("recunlearn")

EXIT_OK, EXIT_FAILED_CELLS, EXIT_BAD_INPUT = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _words(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="global seed; all stage seeds derive from it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="prepared-data directory (prepare: raw ratings file)")
    common.add_argument("--format", help="raw ratings format: ml1m, ml100k, tab, csv or a literal separator")
    common.add_argument("--alpha", type=_floats, help="rand@alpha percentage(s), comma separated")
    common.add_argument("--strategy", type=_words, help="strategy name(s), comma separated")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="recunlearn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="load, filter and split a dataset")
    sub.add_parser("train", parents=[common], help="train the original model")
    u = sub.add_parser("unlearn", parents=[common], help="serve one rand@alpha request")
    u.add_argument("--params", required=True, help="original model checkpoint (.npz)")
    a = sub.add_parser("attack", parents=[common], help="MIO completeness report for a model")
    a.add_argument("--params", required=True)
    a.add_argument("--request", required=True, help="request JSON written by `unlearn`")
    e = sub.add_parser("eval", parents=[common], help="ranking metrics for a model")
    e.add_argument("--params", required=True)
    e.add_argument("--request", help="restrict to users not in this request")
    c = sub.add_parser("cka", parents=[common], help="relative-CKA study of parameter blocks")
    c.add_argument("--m", type=int, help="number of original models (>= 2)")
    c.add_argument("--repetitions", type=int)
    r = sub.add_parser("run", parents=[common], help="full strategy x alpha x seed grid")
    r.add_argument("--repetitions", type=int)
    r.add_argument("--jobs", type=int, help="run repetitions in parallel (timings then invalid)")
    return p


def resolve_config(args) -> ExperimentConfig:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = args.out
    if args.alpha:
        over["alphas"] = args.alpha
        over["cka_alpha"] = args.alpha[0]
    if args.strategy:
        over["strategies"] = args.strategy
    if args.format is not None:
        over.setdefault("data", {})["format"] = args.format
    if args.command == "prepare" and args.data is not None:
        over.setdefault("data", {})["path"] = args.data
    if getattr(args, "repetitions", None) is not None:
        over["repetitions"] = args.repetitions
    if getattr(args, "m", None) is not None:
        over["cka_m"] = args.m
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    return load_config(args.config, over)


def _data_dir(args, cfg):
    return args.data if args.data is not None else Path(cfg.out_dir) / "data"


def cmd_prepare(args, cfg) -> int:
    tr, te, stats = prepare(cfg)
    out = Path(cfg.out_dir) / "data"
    write_prepared(tr, te, stats, out)
    print(f"wrote {out}: {stats['filtered']}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tr, _ = load_prepared(_data_dir(args, cfg))
    hyper = original_hyper(cfg, 0)
    model = train(tr, hyper)
    out = Path(cfg.out_dir) / "model"
    save_params(model, out / "params.npz")
    write_json({"schema": "recunlearn.train/1", "config": cfg.to_dict(), "seed": hyper.seed,
                "loss_history": model.loss_history}, out / "train.json")
    print(f"wrote {out / 'params.npz'} (final loss {model.loss_history[-1]:.4f})")
    return EXIT_OK


def cmd_unlearn(args, cfg) -> int:
    tr, _ = load_prepared(_data_dir(args, cfg))
    model = load_params(args.params)
    alpha = cfg.alphas[0]
    req = make_rand_at(tr, alpha, request_seed(cfg, 0, alpha))
    out = Path(cfg.out_dir) / "unlearn"
    write_json(request_to_dict(req), out / "request.json")
    for s in cfg.strategies:
        outcome = unlearn(model, tr, req, StrategyConfig(s, cfg.solver, retrain_seed_mode=cfg.retrain_seed_mode))
        save_params(outcome.params_after, out / f"{s}.npz")
        write_json({"schema": "recunlearn.unlearn/1", "config": cfg.to_dict(), **outcome.report()},
                   out / f"{s}.json")
        print(f"{s}: {outcome.num_points} points in {outcome.wall_time_seconds:.4f}s")
    return EXIT_OK


def cmd_attack(args, cfg) -> int:
    tr, te = load_prepared(_data_dir(args, cfg))
    params = load_params(args.params)
    req = request_from_dict(read_json(args.request))
    seed = cfg.seeds()["mio"][0]
    report = assess_completeness(params, tr, te, req, cfg.mio, seed=seed)
    out = Path(cfg.out_dir) / "attack" / f"{Path(args.params).stem}.json"
    write_json({"schema": COMPLETENESS_SCHEMA, "config": cfg.to_dict(), "params": str(args.params),
                **report}, out)
    q = report.get("query")
    print(f"query auc {q['auc']:.3f}" if q else "no query samples (targets lack test data)")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    tr, te = load_prepared(_data_dir(args, cfg))
    params = load_params(args.params)
    users = None
    if args.request:
        users = remaining_users(te, request_from_dict(read_json(args.request)))
    report = ranking_report(params, tr, te, users=users, ks=cfg.ks)
    stem = Path(args.params).stem
    out = Path(cfg.out_dir) / "eval"
    write_json({"schema": RANKING_SCHEMA, "config": cfg.to_dict(), "params": str(args.params), **report},
               out / f"{stem}.json")
    write_rows([{"metric": m, "k": k, "value": v} for m, k, v in ranking_long_rows(report)],
               out / f"{stem}.csv")
    print(" ".join(f"ndcg@{k}={row['ndcg']:.4f}" for k, row in report["per_k"].items()))
    return EXIT_OK


def cmd_cka(args, cfg) -> int:
    tr, _ = obtain_data(cfg, args.data)
    report = cka_study(cfg, tr)
    out = Path(cfg.out_dir) / "cka"
    write_json(report, out / "cka.json")
    write_rows(cka_rows(report), out / "cka.csv")
    print(" ".join(f"{b}={v:.3f}" for b, v in report["mean"].items()))
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    tr, te = obtain_data(cfg, args.data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")
    summary = run_grid(cfg, tr, te, out)
    failed = summary["failed_cells"]
    print(f"wrote {out / 'summary.json'}; {len(failed)} failed cell(s)")
    return EXIT_FAILED_CELLS if failed else EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "unlearn": cmd_unlearn, "attack": cmd_attack,
            "eval": cmd_eval, "cka": cmd_cka, "run": cmd_run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (FileNotFoundError, DatasetError, ConfigError) as exc:
        print(f"recunlearn {args.command}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
