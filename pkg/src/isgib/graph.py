"""Graph containers, on-disk dataset format, ego-graphs and artificial feature shift."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

Task = Literal["node", "graph"]

FLOAT_FMT = "%.17g"


class DatasetError(ValueError):
    """Base class for malformed dataset directories."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Symmetrize: one (min, max) row per undirected edge, self-loops dropped."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise DimensionMismatchError(
            f"edge endpoint outside [0, {num_nodes}): min={e.min()}, max={e.max()}"
        )
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph.

    ``labels`` holds one class per node for node-level tasks, or a 0-d array
    with the graph class for graph-level tasks. ``center`` is set on ego-graphs
    to the local index of the target node.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    domain_id: int | None = None
    name: str = "g"
    center: int | None = None
    _adj: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.num_nodes = int(self.num_nodes)
        self.edges = _canonical_edges(self.edges, self.num_nodes)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise DimensionMismatchError(
                f"features have shape {self.features.shape}, expected ({self.num_nodes}, d)"
            )
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim == 1 and self.labels.shape[0] != self.num_nodes:
            raise DimensionMismatchError(
                f"{self.labels.shape[0]} node labels for {self.num_nodes} nodes"
            )
        if self.labels.ndim > 1:
            raise DimensionMismatchError("labels must be a vector or a scalar")

    @property
    def is_node_level(self) -> bool:
        return self.labels.ndim == 1

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency without self-loops."""
        if self._adj is None:
            n = self.num_nodes
            src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
            dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
            self._adj = sp.csr_matrix(
                (np.ones(len(src)), (src, dst)), shape=(n, n), dtype=np.float64
            )
        return self._adj

    def edge_index(self) -> np.ndarray:
        """Directed [2, 2E] message index with both directions of every edge."""
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return np.stack([src, dst])

    def with_features(self, features: np.ndarray, **kw) -> "Graph":
        return replace(self, features=features, _adj=self._adj, **kw)


@dataclass
class DatasetSplit:
    train_graphs: list[Graph]
    val_graphs: list[Graph]
    test_graphs: list[Graph]
    task: Task = "node"
    num_classes: int | None = None

    def __post_init__(self):
        ids = [id(g) for g in self.all_graphs()]
        if len(set(ids)) != len(ids):
            raise DatasetError("train/val/test graph sets must be disjoint")
        if self.task == "node":
            for g in self.all_graphs():
                if not g.is_node_level:
                    raise DatasetError(f"graph {g.name!r} lacks per-node labels")
        if self.num_classes is None:
            labels = [g.labels.ravel() for g in self.all_graphs()]
            self.num_classes = int(np.concatenate(labels).max()) + 1 if labels else 0

    def all_graphs(self) -> list[Graph]:
        return [*self.train_graphs, *self.val_graphs, *self.test_graphs]

    @property
    def d_in(self) -> int:
        return self.all_graphs()[0].d_in


@dataclass(frozen=True)
class ShiftSpec:
    mu: float = 0.0
    sigma: float = 1.0
    num_copies: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.num_copies < 1:
            raise ValueError(f"num_copies must be >= 1, got {self.num_copies}")


# ---------------------------------------------------------------------------
# on-disk format


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise MissingFileError(f"{what} file absent: {path}")
    return path


def read_graph(directory, *, num_classes: int | None = None, d_in: int | None = None,
               task: Task = "node", name: str | None = None,
               domain_id: int | None = None) -> Graph:
    """Read one graph directory (``edges.tsv``, ``features.csv``, ``labels.csv``)."""
    directory = Path(directory)
    feats = np.loadtxt(_require(directory / "features.csv", "features"),
                       delimiter=",", dtype=np.float64, ndmin=2)
    labels_path = _require(directory / "labels.csv", "labels")
    edges_path = _require(directory / "edges.tsv", "edges")
    labels = np.loadtxt(labels_path, dtype=np.int64, ndmin=1)
    text = edges_path.read_text().strip()
    edges = (np.loadtxt(edges_path, dtype=np.int64, ndmin=2, delimiter="\t")
             if text else np.zeros((0, 2), dtype=np.int64))
    if edges.size and edges.shape[1] != 2:
        raise DimensionMismatchError(f"{edges_path}: expected two integer columns")

    if d_in is not None and feats.shape[1] != d_in:
        raise DimensionMismatchError(
            f"{directory}: features have {feats.shape[1]} columns, meta declares d_in={d_in}"
        )
    if task == "node":
        n = feats.shape[0]
        if labels.shape[0] != n:
            raise DimensionMismatchError(
                f"{directory}: {labels.shape[0]} labels for {n} feature rows"
            )
    else:
        if labels.shape[0] != 1:
            raise DimensionMismatchError(f"{directory}: graph task expects one label")
        labels = labels.reshape(())
    if num_classes is not None and labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(
            f"{directory}: labels must lie in [0, {num_classes}), found "
            f"[{labels.min()}, {labels.max()}]"
        )
    if edges.size and edges.max() >= feats.shape[0]:
        raise DimensionMismatchError(
            f"{directory}: edge endpoint {edges.max()} but only {feats.shape[0]} feature rows"
        )
    return Graph(feats.shape[0], edges, feats, labels, domain_id=domain_id,
                 name=name or directory.name)


def write_graph(g: Graph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "edges.tsv", "w") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    np.savetxt(directory / "features.csv", g.features, delimiter=",", fmt=FLOAT_FMT)
    np.savetxt(directory / "labels.csv", g.labels.reshape(-1), fmt="%d")


def save_dataset(split: DatasetSplit, directory) -> Path:
    """Write ``split`` in the directory format read by :func:`load_dataset`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, splits = [], {"train": [], "val": [], "test": []}
    for part, graphs in (("train", split.train_graphs), ("val", split.val_graphs),
                         ("test", split.test_graphs)):
        for g in graphs:
            if g.name in {e["name"] for e in entries}:
                raise DatasetError(f"duplicate graph name {g.name!r}")
            write_graph(g, directory / g.name)
            entries.append({"name": g.name, "path": g.name, "domain_id": g.domain_id})
            splits[part].append(g.name)
    meta = {"task": split.task, "c": split.num_classes, "d_in": split.d_in, "graphs": entries}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (directory / "splits.json").write_text(json.dumps(splits, indent=2) + "\n")
    return directory


def load_dataset(path, task: Task | None = None) -> DatasetSplit:
    """Load a dataset directory into a validated :class:`DatasetSplit`.

    Without ``splits.json`` every graph is placed in the training set.
    """
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"dataset directory absent: {path}")
    meta = json.loads(_require(path / "meta.json", "meta").read_text())
    meta_task = meta.get("task", "node")
    if task is not None and task != meta_task:
        raise DatasetError(f"requested task {task!r} but dataset declares {meta_task!r}")
    c, d_in = meta.get("c"), meta.get("d_in")
    graphs = {}
    for entry in meta["graphs"]:
        name = entry["name"]
        graphs[name] = read_graph(path / entry.get("path", name), num_classes=c, d_in=d_in,
                                  task=meta_task, name=name, domain_id=entry.get("domain_id"))
    splits_path = path / "splits.json"
    if splits_path.is_file():
        splits = json.loads(splits_path.read_text())
    else:
        splits = {"train": list(graphs), "val": [], "test": []}
    try:
        parts = [[graphs[n] for n in splits.get(k, [])] for k in ("train", "val", "test")]
    except KeyError as exc:
        raise DatasetError(f"splits.json names unknown graph {exc}") from None
    return DatasetSplit(*parts, task=meta_task, num_classes=c)


def load_planetoid_raw(directory) -> Graph:
    """Read the LINQS ``cora.content`` / ``cora.cites`` pair (or citeseer equivalent)."""
    directory = Path(directory)
    content = sorted(directory.glob("*.content"))
    cites = sorted(directory.glob("*.cites"))
    if not content or not cites:
        raise MissingFileError(f"no *.content / *.cites pair in {directory}")
    ids, rows, classes = [], [], []
    for line in content[0].read_text().splitlines():
        parts = line.split()
        if parts:
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:-1]])
            classes.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    names = sorted(set(classes))
    labels = np.array([names.index(c) for c in classes])
    edges = []
    for line in cites[0].read_text().splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] in index and parts[1] in index:
            edges.append((index[parts[0]], index[parts[1]]))
    return Graph(len(ids), edges, np.array(rows), labels, name=content[0].stem)


# ---------------------------------------------------------------------------
# artificial distribution shift


def noise_rng(seed: int, copy_index: int) -> np.random.Generator:
    # per-copy substream: independent of how many copies are drawn or in what order
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(copy_index)]))


def inject_noise(g: Graph, spec: ShiftSpec, *, first_copy: int = 0) -> list[Graph]:
    """Return ``spec.num_copies`` copies of ``g`` with features ``A + B_k``.

    ``B_k ~ Normal(mu, sigma)`` elementwise, drawn from the substream keyed by
    ``(spec.seed, first_copy + k)``. Topology and labels are shared.
    """
    if spec.sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {spec.sigma}")
    out = []
    for k in range(first_copy, first_copy + spec.num_copies):
        rng = noise_rng(spec.seed, k)
        noise = rng.normal(spec.mu, spec.sigma, size=g.features.shape)
        out.append(g.with_features(g.features + noise, name=f"{g.name}-{k}", domain_id=k))
    return out


def make_shift_benchmark(g: Graph, seed: int, *, mu: float = 0.0, sigma: float = 1.0,
                         train_noise: tuple[float, float] | None = None,
                         sizes: tuple[int, int, int] = (4, 2, 4)) -> DatasetSplit:
    """Ten noisy copies of a node-level graph split 4/2/4 into train/val/test.

    Validation and test copies receive ``Normal(mu, sigma)`` noise. Training
    copies are noise-free unless ``train_noise=(mu, sigma)`` is given, which is
    how the noise-scale sweep trains on ``(0, 1)``.
    """
    if not g.is_node_level:
        raise DatasetError("shift benchmark needs a single node-level graph")
    n_tr, n_va, n_te = sizes
    if train_noise is None:
        train = [g.with_features(g.features.copy(), name=f"{g.name}-{k}", domain_id=k)
                 for k in range(n_tr)]
    else:
        tm, ts = train_noise
        train = inject_noise(g, ShiftSpec(tm, ts, n_tr, seed))
    shifted = ShiftSpec(mu, sigma, n_va + n_te, seed)
    rest = inject_noise(g, shifted, first_copy=n_tr)
    return DatasetSplit(train, rest[:n_va], rest[n_va:], task="node",
                        num_classes=int(g.labels.max()) + 1)


# ---------------------------------------------------------------------------
# neighbourhoods


def _neighbors(g: Graph) -> list[np.ndarray]:
    adj = g.adjacency()
    return [adj.indices[adj.indptr[v]:adj.indptr[v + 1]] for v in range(g.num_nodes)]


def khop_nodes(g: Graph, center: int, hops: int) -> np.ndarray:
    """Sorted node ids within ``hops`` undirected steps of ``center`` (BFS)."""
    if not 0 <= center < g.num_nodes:
        raise IndexError(f"center {center} outside [0, {g.num_nodes})")
    if hops < 0:
        raise ValueError("hops must be >= 0")
    nbrs = _neighbors(g)
    dist = {center: 0}
    queue = deque([center])
    while queue:
        v = queue.popleft()
        if dist[v] == hops:
            continue
        for u in nbrs[v]:
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return np.array(sorted(dist), dtype=np.int64)


def ego_graph(g: Graph, center: int, hops: int) -> Graph:
    """Induced subgraph around ``center``; the center's class becomes the graph label."""
    nodes = khop_nodes(g, center, hops)
    local = {int(v): i for i, v in enumerate(nodes)}
    keep = np.isin(g.edges[:, 0], nodes) & np.isin(g.edges[:, 1], nodes)
    edges = [(local[int(u)], local[int(v)]) for u, v in g.edges[keep]]
    label = g.labels[center] if g.is_node_level else g.labels
    return Graph(len(nodes), edges, g.features[nodes], np.asarray(label),
                 domain_id=g.domain_id, name=f"{g.name}-ego{center}",
                 center=local[int(center)])


def khop_membership(g: Graph, hops: int) -> sp.csr_matrix:
    """Row-stochastic [n x n] matrix whose row v averages over v's ego-graph nodes."""
    n = g.num_nodes
    step = (g.adjacency() + sp.identity(n, format="csr")).astype(bool).astype(np.float64)
    reach = sp.identity(n, format="csr")
    for _ in range(hops):
        reach = (reach @ step).astype(bool).astype(np.float64)
    reach = sp.csr_matrix(reach)
    deg = np.asarray(reach.sum(axis=1)).ravel()
    return sp.diags(1.0 / deg) @ reach


def connected_component(g: Graph, v: int) -> np.ndarray:
    _, comp = connected_components(g.adjacency(), directed=False)
    return np.flatnonzero(comp == comp[v])


def disjoint_union(graphs: Sequence[Graph]) -> tuple[Graph, np.ndarray]:
    """Batch graphs into one; returns the union and the node-to-graph index."""
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)]) \
        if graphs else np.zeros((0, 2), dtype=np.int64)
    feats = np.concatenate([g.features for g in graphs])
    batch = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    labels = np.zeros(offsets[-1], dtype=np.int64)
    return Graph(offsets[-1], edges, feats, labels, name="union"), batch
