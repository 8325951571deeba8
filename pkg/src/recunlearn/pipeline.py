"""End-to-end experiment stages shared by the CLI and the scripts.

Every JSON artifact carries a ``schema`` field. ``summary.json`` holds only
quantities that are a deterministic function of the config; wall-clock times
go to ``timing.json`` so reruns with the same seed produce identical summaries.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .dataset import (
    DatasetError,
    InteractionSet,
    filter_min_interactions,
    load_movielens,
    read_csv,
    split,
    write_csv,
)
from .metrics import CKA_BLOCKS, ranking_report, relative_cka
from .mio import assess_completeness
from .model import train
from .seeding import derive_seed
from .synthetic import synthetic_ratings
from .unlearner import (
    RequestKind,
    StrategyConfig,
    UnlearnRequest,
    make_rand_at,
    unlearn,
    user_request,
)

logger = logging.getLogger(__name__)

STATS_SCHEMA = "recunlearn.stats/1"
REQUEST_SCHEMA = "recunlearn.request/1"
CELL_SCHEMA = "recunlearn.cell/1"
SUMMARY_SCHEMA = "recunlearn.summary/1"
TIMING_SCHEMA = "recunlearn.timing/1"
CKA_SCHEMA = "recunlearn.cka/1"
RANKING_SCHEMA = "recunlearn.ranking/1"
COMPLETENESS_SCHEMA = "recunlearn.completeness/1"

ORIGINAL = "original"


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------- data

def load_dataset(cfg: ExperimentConfig) -> InteractionSet:
    """Raw dataset from ``cfg.data``: a ratings file, or synthetic data when no path is set."""
    if cfg.data.path is None:
        syn = replace(cfg.data.synthetic, seed=cfg.seeds()["synthetic"])
        return synthetic_ratings(syn)
    path = Path(cfg.data.path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_movielens(path, cfg.data.format)


def prepare(cfg: ExperimentConfig) -> tuple[InteractionSet, InteractionSet, dict]:
    data = filter_min_interactions(load_dataset(cfg), cfg.data.min_interactions)
    spec = replace(cfg.split, seed=cfg.seeds()["split"])
    tr, te = split(data, spec)
    stats = {"schema": STATS_SCHEMA, "filtered": data.stats(), "train": tr.stats(),
             "test": te.stats(), "num_users": data.num_users, "num_items": data.num_items,
             "config": cfg.to_dict(), "seeds": {"split": spec.seed}}
    return tr, te, stats


def write_prepared(tr: InteractionSet, te: InteractionSet, stats: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(tr, out / "train.csv")
    write_csv(te, out / "test.csv")
    write_json(stats, out / "stats.json")


def load_prepared(data_dir) -> tuple[InteractionSet, InteractionSet]:
    d = Path(data_dir)
    for name in ("train.csv", "test.csv", "stats.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"prepared data missing {d / name}; run `prepare` first")
    stats = read_json(d / "stats.json")
    if stats.get("schema") != STATS_SCHEMA:
        raise DatasetError(f"{d / 'stats.json'}: unexpected schema {stats.get('schema')!r}")
    n_u, n_i = stats["num_users"], stats["num_items"]
    return read_csv(d / "train.csv", n_u, n_i), read_csv(d / "test.csv", n_u, n_i)


def obtain_data(cfg: ExperimentConfig, data_dir=None):
    """Prepared CSVs if ``data_dir`` is given, otherwise prepare in memory."""
    if data_dir is not None:
        return load_prepared(data_dir)
    tr, te, _ = prepare(cfg)
    return tr, te


# ---------------------------------------------------------------- requests

def request_to_dict(req: UnlearnRequest) -> dict:
    if req.kind is not RequestKind.USER_WISE:
        raise ValueError("only user-wise requests are serialized")
    return {"schema": REQUEST_SCHEMA, "kind": req.kind.value,
            "target_users": [int(u) for u in req.target_users],
            "alpha_percent": req.alpha_percent, "seed": req.seed}


def request_from_dict(d: dict) -> UnlearnRequest:
    if d.get("schema") != REQUEST_SCHEMA:
        raise ValueError(f"unexpected request schema {d.get('schema')!r}")
    req = user_request(d["target_users"], seed=d.get("seed"))
    return replace(req, alpha_percent=d.get("alpha_percent"))


def request_seed(cfg: ExperimentConfig, repetition: int, alpha: float) -> int:
    return derive_seed(cfg.seed, "request", repetition, repr(float(alpha))) % 2 ** 32


def remaining_users(test: InteractionSet, req: UnlearnRequest) -> np.ndarray:
    return np.setdiff1d(test.active_users(), req.target_users)


def original_hyper(cfg: ExperimentConfig, repetition: int):
    return replace(cfg.model, seed=cfg.seeds()["model"][repetition])


# ---------------------------------------------------------------- grid

def _evaluate(cfg, params, tr, te, req, repetition) -> dict:
    rank = ranking_report(params, tr, te, users=remaining_users(te, req), ks=cfg.ks)
    comp = assess_completeness(params, tr, te, req, cfg.mio, seed=cfg.seeds()["mio"][repetition])
    return {"ranking": rank, "completeness": comp}


def _cell_name(strategy: str, alpha: float, repetition: int) -> str:
    return f"{strategy}_a{alpha:g}_r{repetition}"


def run_repetition(cfg: ExperimentConfig, tr: InteractionSet, te: InteractionSet,
                   repetition: int) -> list[dict]:
    """All cells of one repetition: the original model plus every (strategy, alpha)."""
    cells = []

    def record(strategy, alpha, body, req=None, error=None):
        cell = {"schema": CELL_SCHEMA, "strategy": strategy, "alpha": alpha,
                "repetition": repetition, "status": "failed" if error else "ok",
                "seeds": {"model": cfg.seeds()["model"][repetition],
                          "mio": cfg.seeds()["mio"][repetition],
                          "request": request_seed(cfg, repetition, alpha)}}
        if req is not None:
            cell["num_target_users"] = int(len(req.target_users))
        if error:
            cell["error"] = error
        cell.update(body or {})
        cells.append(cell)

    try:
        model = train(tr, original_hyper(cfg, repetition))
    except Exception as exc:  # recorded per cell, run continues
        logger.exception("original model failed in repetition %d", repetition)
        for alpha in cfg.alphas:
            for s in (ORIGINAL, *cfg.strategies):
                record(s, alpha, None, error=f"original training: {exc!r}")
        return cells

    for alpha in cfg.alphas:
        try:
            req = make_rand_at(tr, alpha, request_seed(cfg, repetition, alpha))
        except Exception as exc:
            for s in (ORIGINAL, *cfg.strategies):
                record(s, alpha, None, error=f"request: {exc!r}")
            continue
        try:
            record(ORIGINAL, alpha, _evaluate(cfg, model, tr, te, req, repetition), req)
        except Exception as exc:
            logger.exception("evaluation of the original model failed")
            record(ORIGINAL, alpha, None, req, error=repr(exc))
        for s in cfg.strategies:
            try:
                sc = StrategyConfig(s, cfg.solver, retrain_seed_mode=cfg.retrain_seed_mode)
                out = unlearn(model, tr, req, sc)
                body = _evaluate(cfg, out.params_after, tr, te, req, repetition)
                body["wall_time_seconds"] = out.wall_time_seconds
                body["num_points"] = out.num_points
                body["diagnostics"] = {k: v for k, v in out.diagnostics.items() if k != "loss_history"}
                record(s, alpha, body, req)
            except Exception as exc:
                logger.exception("cell %s failed", _cell_name(s, alpha, repetition))
                record(s, alpha, None, req, error=repr(exc))
    return cells


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _query(cell, key):
    q = cell.get("completeness", {}).get("query")
    return q[key] if q else None


def summarize(cfg: ExperimentConfig, cells: list[dict]) -> tuple[dict, dict, list[dict]]:
    """Seed-averaged summary (deterministic), timing report, and flat CSV rows."""
    rows, timing_rows, csv_rows = [], [], []
    retrain_time = {}
    for alpha in cfg.alphas:
        for s in (ORIGINAL, *cfg.strategies):
            group = [c for c in cells if c["strategy"] == s and c["alpha"] == alpha]
            ok = [c for c in group if c["status"] == "ok"]
            row = {"strategy": s, "alpha": alpha, "n_ok": len(ok), "n_failed": len(group) - len(ok)}
            for k in cfg.ks:
                for m in ("ndcg", "hr", "precision", "recall"):
                    row[f"{m}@{k}"] = _mean(c["ranking"]["per_k"][str(k)][m] for c in ok)
            row["query_auc"] = _mean(_query(c, "auc") for c in ok)
            row["query_acc"] = _mean(_query(c, "acc") for c in ok)
            row["attack_holdout_auc"] = _mean(c["completeness"]["attack_holdout"]["auc"] for c in ok)
            rows.append(row)
            if s != ORIGINAL:
                t = _mean(c["wall_time_seconds"] for c in ok)
                timing_rows.append({"strategy": s, "alpha": alpha, "mean_wall_time_seconds": t})
                if s == "retrain":
                    retrain_time[alpha] = t
            csv_rows.append(dict(row))
    for tr_row in timing_rows:
        base = retrain_time.get(tr_row["alpha"])
        t = tr_row["mean_wall_time_seconds"]
        tr_row["speedup_vs_retrain"] = base / t if base and t else None
    for row in csv_rows:
        match = [t for t in timing_rows if t["strategy"] == row["strategy"] and t["alpha"] == row["alpha"]]
        row["mean_wall_time_seconds"] = match[0]["mean_wall_time_seconds"] if match else None
    failed = [_cell_name(c["strategy"], c["alpha"], c["repetition"]) for c in cells if c["status"] != "ok"]
    summary = {"schema": SUMMARY_SCHEMA, "config": cfg.to_dict(), "seeds": cfg.seeds(),
               "rows": rows, "failed_cells": failed}
    timing = {"schema": TIMING_SCHEMA, "rows": timing_rows,
              "timing_valid": cfg.jobs == 1,
              "note": None if cfg.jobs == 1 else "cells ran concurrently; wall times are not comparable"}
    return summary, timing, csv_rows


def run_grid(cfg: ExperimentConfig, tr: InteractionSet, te: InteractionSet, out_dir) -> dict:
    """Execute the full grid and write cells/, summary.json, summary.csv, timing.json."""
    out = Path(out_dir)
    reps = range(cfg.repetitions)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            parts = list(pool.map(run_repetition, [cfg] * len(reps), [tr] * len(reps), [te] * len(reps), reps))
    else:
        parts = [run_repetition(cfg, tr, te, r) for r in reps]
    cells = [c for part in parts for c in part]
    for c in cells:
        write_json(c, out / "cells" / f"{_cell_name(c['strategy'], c['alpha'], c['repetition'])}.json")
    summary, timing, csv_rows = summarize(cfg, cells)
    write_json(summary, out / "summary.json")
    write_json(timing, out / "timing.json")
    write_rows(csv_rows, out / "summary.csv")
    return summary


def write_rows(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


# ---------------------------------------------------------------- CKA

def cka_study(cfg: ExperimentConfig, tr: InteractionSet, repetitions: Optional[int] = None) -> dict:
    """Relative CKA of a retrained model against ``cka_m`` originals, per block."""
    if cfg.cka_m < 2:
        raise ValueError("relative CKA needs cka_m >= 2")
    reps = cfg.repetitions if repetitions is None else repetitions
    per_rep = []
    for r in range(reps):
        base = derive_seed(cfg.seed, "cka", r)
        originals = [train(tr, replace(cfg.model, seed=derive_seed(base, "original", m) % 2 ** 32))
                     for m in range(cfg.cka_m)]
        req = make_rand_at(tr, cfg.cka_alpha, derive_seed(base, "request") % 2 ** 32)
        retrained = train(tr.difference(req.expand(tr)),
                          replace(cfg.model, seed=derive_seed(base, "retrain") % 2 ** 32))
        blocks = {}
        for b in CKA_BLOCKS:
            value, parts = relative_cka(originals, retrained, b, req.target_users, return_parts=True)
            blocks[b] = {"relative_cka": value, **parts}
        per_rep.append({"repetition": r, "seed": base % 2 ** 32,
                        "num_target_users": int(len(req.target_users)), "blocks": blocks})
    means = {b: float(np.mean([p["blocks"][b]["relative_cka"] for p in per_rep])) for b in CKA_BLOCKS}
    return {"schema": CKA_SCHEMA, "config": cfg.to_dict(), "alpha": cfg.cka_alpha, "m": cfg.cka_m,
            "repetitions": per_rep, "mean": means}


def cka_rows(report: dict) -> list[dict]:
    return [{"block": b, "repetition": p["repetition"], "relative_cka": p["blocks"][b]["relative_cka"],
             "relative_single": p["blocks"][b]["relative_single"]}
            for p in report["repetitions"] for b in CKA_BLOCKS]

