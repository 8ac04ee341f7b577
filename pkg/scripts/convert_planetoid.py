"""Convert a Planetoid citation dataset (Cora, CiteSeer, PubMed) into the
dataset-directory layout read by ``mhc_gnn.graphs.load_dataset``.

Input is the directory holding the original ``ind.<name>.{x,tx,allx,y,ty,ally,
graph,test.index}`` files.  The provided split is the usual one: the labelled
``y`` rows train, the next 500 nodes validate, ``test.index`` tests.  The files
are Python pickles, so only convert downloads you trust.

    python3 scripts/convert_planetoid.py raw/cora data/cora --name cora
    export MHC_DATA_DIR=$PWD/data

The conversion logic is exercised on small synthetic pickles in the test
suite; it has not been run against the real downloads in this repository.
"""
from __future__ import annotations

import argparse
import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from mhc_gnn.graphs import Graph, save_dataset

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


def _load(raw: Path, name: str, part: str):
    with open(raw / f"ind.{name}.{part}", "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def convert(raw: str | Path, name: str) -> Graph:
    raw = Path(raw)
    x, y, tx, ty, allx, ally, graph = (_load(raw, name, p) for p in PARTS)
    test_idx = np.loadtxt(raw / f"ind.{name}.test.index", dtype=np.int64, ndmin=1)
    test_sorted = np.sort(test_idx)
    lo, hi = int(test_sorted.min()), int(test_sorted.max())

    tx, ty = _dense(tx), np.asarray(ty)
    # some test ids are missing from the graph (CiteSeer): pad them with zero rows
    full_tx = np.zeros((hi - lo + 1, tx.shape[1]))
    full_ty = np.zeros((hi - lo + 1, ty.shape[1]))
    full_tx[test_sorted - lo] = tx
    full_ty[test_sorted - lo] = ty

    feats = np.vstack([_dense(allx), full_tx])
    onehot = np.vstack([np.asarray(ally), full_ty])
    # test rows are stored in test.index order; put them at their node ids
    feats[test_idx] = feats[test_sorted]
    onehot[test_idx] = onehot[test_sorted]
    labels = onehot.argmax(axis=1)

    n = feats.shape[0]
    edges = [(int(i), int(j)) for i, nbrs in graph.items() for j in nbrs if int(j) < n and int(i) < n]
    n_train = np.asarray(y).shape[0]
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    masks["train"][:n_train] = True
    masks["val"][n_train:n_train + 500] = True
    masks["test"][test_idx] = True
    return Graph(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2), feats, labels, masks, name)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("raw", help="directory with the ind.<name>.* files")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--name", default="cora")
    args = p.parse_args(argv)
    g = convert(args.raw, args.name)
    save_dataset(g, args.out)
    print(f"wrote {args.out}: {g.num_nodes} nodes, {g.num_edges} edges, "
          f"{g.num_classes} classes, {g.features.shape[1]} features")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
