"""Write the synthetic citation-like graph used as a Cora stand-in.

    python3 scripts/make_synthetic_citation.py data/citation-like --seed 0
"""
from __future__ import annotations

import argparse

from mhc_gnn.graphs import make_citation_like, save_dataset
from mhc_gnn.linalg import Rng


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--nodes", type=int, default=2708)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--features", type=int, default=1433)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    g = make_citation_like(args.nodes, args.classes, args.features, rng=Rng(args.seed))
    path = save_dataset(g, args.out)
    info = g.summary()
    print(f"wrote {path}: " + ", ".join(f"{k}={v}" for k, v in info.items()))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
