"""Write a synthetic low-rank rating file in MovieLens ``::`` format.

    python scripts/make_synthetic.py out/synthetic.dat --users 500 --items 1000
"""
import argparse
from pathlib import Path

from recunlearn.synthetic import SyntheticConfig, synthetic_ratings, write_movielens


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("path")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--min-per-user", type=int, default=6)
    p.add_argument("--max-per-user", type=int, default=16)
    p.add_argument("--noise", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    data = synthetic_ratings(SyntheticConfig(num_users=a.users, num_items=a.items, min_per_user=a.min_per_user,
                                             max_per_user=a.max_per_user, rating_noise=a.noise, seed=a.seed))
    Path(a.path).parent.mkdir(parents=True, exist_ok=True)
    write_movielens(data, a.path)
    print(f"{a.path}: {data.stats()}")


if __name__ == "__main__":
    main()
