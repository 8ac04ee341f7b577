"""Graph data model, dataset I/O, normalisation, generators and 1-WL tools."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .linalg import Rng

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Malformed or missing dataset directory."""


class DisconnectedGraphError(ValueError):
    pass


@dataclass
class Graph:
    """Undirected simple graph with optional node features, labels and masks.

    ``edges`` is an (E, 2) int array with ``i < j`` rows, sorted and unique.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    masks: dict[str, np.ndarray] | None = None
    name: str = "graph"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = canonical_edges(self.edges, self.num_nodes)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
                raise ValueError(f"features must be ({self.num_nodes}, d), got {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.num_nodes,):
                raise ValueError(f"labels must have length {self.num_nodes}")
        if self.masks is not None:
            self.masks = {k: np.asarray(v, dtype=bool) for k, v in self.masks.items()}
            check_disjoint(self.masks)

    @property
    def num_edges(self) -> int:
        """Undirected edge count (each pair once)."""
        return int(self.edges.shape[0])

    @property
    def num_directed_edges(self) -> int:
        """Edge count with both directions stored, as message passing frameworks report it."""
        return 2 * self.num_edges

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        if self.num_edges == 0:
            return sp.csr_matrix((n, n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes).astype(np.int64)

    def neighbors(self) -> list[set[int]]:
        nb = [set() for _ in range(self.num_nodes)]
        for i, j in self.edges:
            nb[i].add(int(j))
            nb[j].add(int(i))
        return nb

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) arrays with both orientations of every edge."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        return np.r_[i, j], np.r_[j, i]

    def is_connected(self) -> bool:
        if self.num_nodes <= 1:
            return True
        k, _ = connected_components(self.adjacency(), directed=False)
        return k == 1

    def permute(self, perm: np.ndarray) -> "Graph":
        """Relabel node ``v`` as ``perm[v]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        feats = None if self.features is None else self.features[inv]
        labels = None if self.labels is None else self.labels[inv]
        masks = None if self.masks is None else {k: v[inv] for k, v in self.masks.items()}
        return Graph(self.num_nodes, perm[self.edges], feats, labels, masks,
                     self.name + "-perm", dict(self.meta))

    def with_features(self, features) -> "Graph":
        return Graph(self.num_nodes, self.edges, features, self.labels, self.masks,
                     self.name, dict(self.meta))

    def summary(self) -> dict:
        out = {
            "name": self.name,
            "num_nodes": self.num_nodes,
            "num_edges_undirected": self.num_edges,
            "num_edges_directed": self.num_directed_edges,
            "num_features": 0 if self.features is None else int(self.features.shape[1]),
            "num_classes": self.num_classes,
            "connected": self.is_connected(),
        }
        if self.labels is not None and self.num_edges:
            out["homophily"] = homophily(self)
        if self.masks:
            out.update({f"{k}_size": int(v.sum()) for k, v in self.masks.items()})
        return out


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise ValueError(f"edge index out of range for {num_nodes} nodes")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


def check_disjoint(masks: dict[str, np.ndarray]) -> None:
    names = list(masks)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            if np.any(masks[names[a]] & masks[names[b]]):
                raise ValueError(f"masks {names[a]!r} and {names[b]!r} overlap")


# --------------------------------------------------------------------------- dataset I/O


def load_dataset(path: str | os.PathLike) -> Graph:
    """Read a dataset directory.

    Layout: ``edges.tsv`` (two integer columns), ``features.csv`` (N rows),
    ``labels.csv`` (N integers), ``meta.json`` ({"name", "num_nodes"}) and an
    optional ``splits.json`` ({"train": [...], "val": [...], "test": [...]}).
    Reversed and duplicated edges are merged; self-loops are dropped and
    counted in ``meta["self_loops_dropped"]``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    files = {k: root / k for k in ("edges.tsv", "features.csv", "labels.csv", "meta.json")}
    for name, f in files.items():
        if not f.is_file():
            raise DatasetError(f"missing {name} in {root}")
    try:
        meta = json.loads(files["meta.json"].read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"meta.json: {exc}") from exc
    if "num_nodes" not in meta:
        raise DatasetError("meta.json lacks num_nodes")
    n = int(meta["num_nodes"])

    raw = _read_edges(files["edges.tsv"])
    if raw.size and (raw.min() < 0 or raw.max() >= n):
        raise DatasetError(f"edge index out of range [0, {n}) in edges.tsv")
    loops = int(np.sum(raw[:, 0] == raw[:, 1])) if raw.size else 0
    if loops:
        log.warning("%s: dropped %d self-loops", root.name, loops)

    features = np.loadtxt(files["features.csv"], delimiter=",", ndmin=2, dtype=np.float64)
    if features.shape[0] != n:
        raise DatasetError(f"features.csv has {features.shape[0]} rows, expected {n}")
    labels = np.loadtxt(files["labels.csv"], ndmin=1, dtype=np.int64)
    if labels.shape[0] != n:
        raise DatasetError(f"labels.csv has {labels.shape[0]} rows, expected {n}")

    masks = None
    split_file = root / "splits.json"
    if split_file.is_file():
        splits = json.loads(split_file.read_text())
        masks = {}
        for key in ("train", "val", "test"):
            idx = np.asarray(splits.get(key, []), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"splits.json[{key!r}] index out of range")
            m = np.zeros(n, dtype=bool)
            m[idx] = True
            masks[key] = m
        try:
            check_disjoint(masks)
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc

    meta = dict(meta)
    meta["self_loops_dropped"] = loops
    meta["raw_edge_rows"] = int(raw.shape[0])
    g = Graph(n, raw, features, labels, masks, str(meta.get("name", root.name)), meta)
    return g


def _read_edges(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise DatasetError(f"{path.name}:{lineno}: expected two integer columns")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise DatasetError(f"{path.name}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def save_dataset(g: Graph, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w") as fh:
        for i, j in g.edges:
            fh.write(f"{i}\t{j}\n")
    feats = g.features if g.features is not None else np.ones((g.num_nodes, 1))
    np.savetxt(root / "features.csv", feats, delimiter=",", fmt="%.10g")
    labels = g.labels if g.labels is not None else np.zeros(g.num_nodes, dtype=np.int64)
    np.savetxt(root / "labels.csv", labels, fmt="%d")
    if g.masks:
        splits = {k: np.flatnonzero(v).tolist() for k, v in g.masks.items()}
        (root / "splits.json").write_text(json.dumps(splits))
    (root / "meta.json").write_text(json.dumps({"name": g.name, "num_nodes": g.num_nodes}))
    return root


def resolve_dataset_path(spec: str) -> Path:
    """A dataset argument is a directory, or a name under ``$MHC_DATA_DIR``."""
    p = Path(spec)
    if p.is_dir():
        return p
    root = os.environ.get("MHC_DATA_DIR")
    if root and (Path(root) / spec).is_dir():
        return Path(root) / spec
    raise DatasetError(f"dataset {spec!r} not found (checked path and $MHC_DATA_DIR)")


# --------------------------------------------------------------------------- normalisation


@dataclass
class NormalizedAdjacency:
    """``D^-1/2 (A + s I) D^-1/2`` as a sparse symmetric matrix."""

    matrix: sp.csr_matrix
    degrees: np.ndarray  # of A + sI
    self_loops: bool

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(g: Graph, self_loops: bool = True) -> NormalizedAdjacency:
    a = g.adjacency()
    if self_loops:
        a = a + sp.identity(g.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    d = sp.diags(inv)
    return NormalizedAdjacency((d @ a @ d).tocsr(), deg, self_loops)


def homophily(g: Graph) -> float:
    if g.labels is None:
        raise ValueError("homophily needs labels")
    if g.num_edges == 0:
        raise ValueError("homophily is undefined without edges")
    y = g.labels
    return float(np.mean(y[g.edges[:, 0]] == y[g.edges[:, 1]]))


# --------------------------------------------------------------------------- generators


def from_edges(n: int, edges, name: str = "graph", **kw) -> Graph:
    return Graph(n, np.asarray(list(edges), dtype=np.int64).reshape(-1, 2), name=name, **kw)


def make_cycle(n: int) -> Graph:
    if n < 3:
        raise ValueError("a cycle needs at least 3 nodes")
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)], name=f"cycle{n}")


def make_path(n: int) -> Graph:
    return from_edges(n, [(i, i + 1) for i in range(n - 1)], name=f"path{n}")


def make_complete(n: int) -> Graph:
    return from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)], name=f"K{n}")


def _z4_graph(name: str, adjacent) -> Graph:
    verts = [(a, b) for a in range(4) for b in range(4)]
    idx = {v: k for k, v in enumerate(verts)}
    edges = [(idx[u], idx[v]) for u in verts for v in verts if u < v and adjacent(u, v)]
    return from_edges(16, edges, name=name)


def make_shrikhande() -> Graph:
    """Cayley graph on Z4 x Z4 with connection set {+-(1,0), +-(0,1), +-(1,1)}."""
    conn = {(1, 0), (3, 0), (0, 1), (0, 3), (1, 1), (3, 3)}
    return _z4_graph("shrikhande", lambda u, v: ((u[0] - v[0]) % 4, (u[1] - v[1]) % 4) in conn)


def make_rook_4x4() -> Graph:
    """K4 x K4 (4x4 rook's graph): adjacent iff same row or same column."""
    return _z4_graph("rook4", lambda u, v: (u[0] == v[0]) != (u[1] == v[1]))


def make_sbm(sizes, p_in: float, p_out: float, rng: Rng, retries: int = 10,
             strict: bool = False) -> Graph:
    """Stochastic block model, resampled until connected.

    After ``retries`` failed attempts the last sample is returned with
    ``meta["connected"] = False`` (or ``DisconnectedGraphError`` if ``strict``).
    """
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    block = np.repeat(np.arange(len(sizes)), sizes)
    n = len(block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    g = None
    for attempt in range(retries):
        keep = rng.random(len(iu)) < prob
        g = Graph(n, np.stack([iu[keep], ju[keep]], axis=1), labels=block,
                  name="sbm" + "-".join(str(s) for s in sizes), meta={"attempts": attempt + 1})
        if g.is_connected():
            g.meta["connected"] = True
            return g
    if strict:
        raise DisconnectedGraphError(f"SBM disconnected after {retries} attempts")
    log.warning("SBM still disconnected after %d attempts", retries)
    g.meta["connected"] = False
    return g


def make_citation_like(num_nodes: int = 2708, num_classes: int = 7, num_features: int = 1433,
                       avg_degree: float = 3.9, homophily_target: float = 0.81,
                       words_per_node: int = 18, signal: float = 0.2, rng: Rng | None = None,
                       planetoid_split: tuple[int, int, int] = (20, 500, 1000),
                       name: str = "citation-like") -> Graph:
    """Synthetic stand-in for a citation benchmark.

    Edges join same-class endpoints with probability ``homophily_target``;
    features are binary bags of words where a ``signal`` fraction of each
    node's words comes from a class-specific vocabulary block.  The split
    takes ``planetoid_split[0]`` training nodes per class, then validation and
    test nodes at random.
    """
    rng = rng or Rng(0)
    labels = rng.integers(0, num_classes, num_nodes)
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    m = int(round(avg_degree * num_nodes / 2))
    src = rng.integers(0, num_nodes, m)
    same = rng.random(m) < homophily_target
    dst = np.empty(m, dtype=np.int64)
    for k in range(m):
        if same[k]:
            pool = members[labels[src[k]]]
        else:
            other = (labels[src[k]] + 1 + rng.integers(0, num_classes - 1)) % num_classes
            pool = members[other]
        dst[k] = pool[rng.integers(0, len(pool))]
    block = num_features // num_classes
    feats = np.zeros((num_nodes, num_features))
    for v in range(num_nodes):
        k_sig = rng.random(words_per_node) < signal
        own = labels[v] * block + rng.integers(0, block, words_per_node)
        anyw = rng.integers(0, num_features, words_per_node)
        feats[v, np.where(k_sig, own, anyw)] = 1.0
    n_tr, n_va, n_te = planetoid_split
    train = np.zeros(num_nodes, dtype=bool)
    for c in range(num_classes):
        pick = members[c][rng.permutation(len(members[c]))[:n_tr]]
        train[pick] = True
    rest = np.flatnonzero(~train)
    rest = rest[rng.permutation(len(rest))]
    val = np.zeros(num_nodes, dtype=bool)
    test = np.zeros(num_nodes, dtype=bool)
    val[rest[:n_va]] = True
    test[rest[n_va:n_va + n_te]] = True
    return Graph(num_nodes, np.stack([src, dst], axis=1), feats, labels,
                 {"train": train, "val": val, "test": test}, name)


def disjoint_union(g1: Graph, g2: Graph) -> Graph:
    n1 = g1.num_nodes
    return Graph(n1 + g2.num_nodes, np.vstack([g1.edges, g2.edges + n1]),
                 name=f"{g1.name}+{g2.name}")


def graph_from_spec(spec: str, seed: int = 0) -> Graph:
    """Named generators: ``shrikhande``, ``rook4``, ``cycle:N``, ``path:N``,
    ``complete:N``, ``sbm:S1,S2,...:p_in:p_out`` and ``citation-like[:N]``."""
    name, _, rest = spec.partition(":")
    if name == "shrikhande":
        return make_shrikhande()
    if name in ("rook4", "rook"):
        return make_rook_4x4()
    if name == "cycle":
        return make_cycle(int(rest))
    if name == "path":
        return make_path(int(rest))
    if name == "complete":
        return make_complete(int(rest))
    if name == "sbm":
        parts = rest.split(":")
        if len(parts) != 3:
            raise ValueError("sbm spec is sbm:S1,S2,...:p_in:p_out")
        sizes = [int(s) for s in parts[0].split(",")]
        return make_sbm(sizes, float(parts[1]), float(parts[2]), Rng(seed))
    if name == "citation-like":
        return make_citation_like(int(rest) if rest else 2708, rng=Rng(seed))
    raise ValueError(f"unknown graph generator {spec!r}")


# --------------------------------------------------------------------------- structure


def triangles_per_node(g: Graph) -> np.ndarray:
    a = g.adjacency()
    return np.asarray((a @ a).multiply(a).sum(axis=1)).reshape(-1).astype(np.int64) // 2


def cycle4_signature(g: Graph) -> np.ndarray:
    """``sum over u in N(v) of |N(v) & N(u)|`` for every node v."""
    nb = g.neighbors()
    return np.array([sum(len(nb[v] & nb[u]) for u in nb[v]) for v in range(g.num_nodes)],
                    dtype=np.int64)


def srg_parameters(g: Graph) -> tuple[int, int, int, int] | None:
    """(v, k, lambda, mu) if the graph is strongly regular, else None (brute force)."""
    nb = g.neighbors()
    degs = {len(s) for s in nb}
    if len(degs) != 1:
        return None
    lam, mu = set(), set()
    for i in range(g.num_nodes):
        for j in range(i + 1, g.num_nodes):
            common = len(nb[i] & nb[j])
            (lam if j in nb[i] else mu).add(common)
    if len(lam) > 1 or len(mu) > 1:
        return None
    return g.num_nodes, degs.pop(), lam.pop() if lam else 0, mu.pop() if mu else 0


def neighborhood_profiles(g: Graph) -> list[tuple]:
    """Sorted per-node isomorphism-invariant of the induced neighbourhood subgraph:
    (sorted degree sequence, number of connected components)."""
    nb = g.neighbors()
    out = []
    for v in range(g.num_nodes):
        members = sorted(nb[v])
        local = {u: nb[u] & nb[v] for u in members}
        degs = tuple(sorted(len(s) for s in local.values()))
        seen, comps = set(), 0
        for u in members:
            if u in seen:
                continue
            comps += 1
            stack = [u]
            while stack:
                w = stack.pop()
                if w in seen:
                    continue
                seen.add(w)
                stack.extend(local[w] - seen)
        out.append((degs, comps))
    return sorted(out)


def find_isomorphism(g1: Graph, g2: Graph) -> dict[int, int] | None:
    """Exhaustive backtracking search for an adjacency-preserving bijection.

    Vertices of ``g1`` are placed in BFS order; a candidate image must match
    degree and adjacency with every vertex already placed.  Returns the map or
    None when the graphs are not isomorphic.
    """
    if g1.num_nodes != g2.num_nodes or g1.num_edges != g2.num_edges:
        return None
    if sorted(g1.degrees()) != sorted(g2.degrees()):
        return None
    n = g1.num_nodes
    nb1, nb2 = g1.neighbors(), g2.neighbors()
    deg1, deg2 = g1.degrees(), g2.degrees()
    order, seen = [], set()
    for s in range(n):
        if s in seen:
            continue
        queue = [s]
        seen.add(s)
        while queue:
            v = queue.pop(0)
            order.append(v)
            for u in sorted(nb1[v]):
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
    mapping: dict[int, int] = {}
    used: set[int] = set()

    def place(k: int) -> bool:
        if k == n:
            return True
        v = order[k]
        for w in range(n):
            if w in used or deg2[w] != deg1[v]:
                continue
            if all((u in nb1[v]) == (mapping[u] in nb2[w]) for u in mapping):
                mapping[v] = w
                used.add(w)
                if place(k + 1):
                    return True
                del mapping[v]
                used.discard(w)
        return False

    return dict(mapping) if place(0) else None


# --------------------------------------------------------------------------- 1-WL


@dataclass
class WlColoring:
    colors: np.ndarray
    rounds: int
    stable: bool
    history: list[np.ndarray]

    @property
    def num_classes(self) -> int:
        return int(len(np.unique(self.colors)))

    def histogram(self, nodes: np.ndarray | None = None) -> dict[int, int]:
        c = self.colors if nodes is None else self.colors[nodes]
        vals, counts = np.unique(c, return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))


def initial_colors(g: Graph, use_features: bool = False) -> np.ndarray:
    if use_features and g.features is not None:
        _, inv = np.unique(g.features, axis=0, return_inverse=True)
        return inv.reshape(-1).astype(np.int64)
    return np.zeros(g.num_nodes, dtype=np.int64)


def wl_refine(g: Graph, initial: np.ndarray | None = None, max_rounds: int | None = None) -> WlColoring:
    """Colour refinement until the partition stops splitting.

    New colours are ids of the sorted distinct (own colour, sorted neighbour
    colour multiset) signatures, which is injective within one call.
    """
    nb = [sorted(s) for s in g.neighbors()]
    colors = (np.zeros(g.num_nodes, dtype=np.int64) if initial is None
              else np.unique(np.asarray(initial), return_inverse=True)[1].reshape(-1))
    history = [colors]
    limit = max_rounds if max_rounds is not None else max(g.num_nodes, 1)
    rounds = 0
    stable = False
    while rounds < limit:
        sigs = [(int(colors[v]), tuple(sorted(int(colors[u]) for u in nb[v])))
                for v in range(g.num_nodes)]
        table = {s: k for k, s in enumerate(sorted(set(sigs)))}
        new = np.array([table[s] for s in sigs], dtype=np.int64)
        rounds += 1
        history.append(new)
        if len(table) == len(np.unique(colors)):
            stable = True
            colors = new
            break
        colors = new
    return WlColoring(colors, rounds, stable, history)


def wl_distinguishes(g1: Graph, g2: Graph, use_features: bool = False) -> bool:
    """True iff 1-WL colour histograms differ (refined jointly on the disjoint union)."""
    if g1.num_nodes != g2.num_nodes:
        return True
    u = disjoint_union(g1, g2)
    init = None
    if use_features and g1.features is not None and g2.features is not None:
        u = u.with_features(np.vstack([g1.features, g2.features]))
        init = initial_colors(u, True)
    res = wl_refine(u, init)
    n1 = g1.num_nodes
    return res.histogram(np.arange(n1)) != res.histogram(np.arange(n1, u.num_nodes))
