"""Relative CKA of retrained user/item blocks against M independent originals."""
import argparse
from pathlib import Path

from recunlearn.config import load_config
from recunlearn.pipeline import cka_rows, cka_study, obtain_data, write_json, write_rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--out", default="out/cka")
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--repetitions", type=int, default=3)
    a = p.parse_args()
    cfg = load_config(a.config, {"cka_m": a.m, "cka_alpha": a.alpha, "repetitions": a.repetitions,
                                 "out_dir": a.out})
    tr, _ = obtain_data(cfg)
    report = cka_study(cfg, tr)
    write_json(report, Path(a.out) / "cka.json")
    write_rows(cka_rows(report), Path(a.out) / "cka.csv")
    for block, value in report["mean"].items():
        print(f"{block:<12}{value:.3f}")


if __name__ == "__main__":
    main()
