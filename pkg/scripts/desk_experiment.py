"""Run the strategy x alpha grid and print a compact comparison table.

    python scripts/desk_experiment.py --config configs/desk.yaml --out out/desk
"""
import argparse
import json
from pathlib import Path

from recunlearn.config import dump_config, load_config
from recunlearn.pipeline import obtain_data, run_grid


def table(summary: dict, timing: dict) -> str:
    wall = {(t["strategy"], t["alpha"]): t for t in timing["rows"]}
    lines = [f"{'strategy':<10}{'alpha':>7}{'ndcg@10':>10}{'hr@10':>8}{'query_auc':>11}{'seconds':>10}{'speedup':>9}"]
    fmt = lambda v, w, p: f"{v:>{w}.{p}f}" if v is not None else f"{'-':>{w}}"  # noqa: E731
    for r in summary["rows"]:
        t = wall.get((r["strategy"], r["alpha"]), {})
        lines.append(f"{r['strategy']:<10}{r['alpha']:>7g}{fmt(r['ndcg@10'], 10, 4)}{fmt(r['hr@10'], 8, 4)}"
                     f"{fmt(r['query_auc'], 11, 3)}{fmt(t.get('mean_wall_time_seconds'), 10, 4)}"
                     f"{fmt(t.get('speedup_vs_retrain'), 9, 1)}")
    return "\n".join(lines)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="out/desk")
    p.add_argument("--data", help="prepared-data directory; synthetic data otherwise")
    a = p.parse_args()
    cfg = load_config(a.config, {"out_dir": a.out})
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")
    tr, te = obtain_data(cfg, a.data)
    summary = run_grid(cfg, tr, te, out)
    print(table(summary, json.loads((out / "timing.json").read_text())))
    if summary["failed_cells"]:
        print("failed:", ", ".join(summary["failed_cells"]))


if __name__ == "__main__":
    main()
