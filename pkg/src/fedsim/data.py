"""Datasets, splits, and federated partitioning.

A dataset is one undirected attributed graph with binary node labels
(0 = human, 1 = bot).  Loaders accept either a node/edge CSV pair or a
single JSON object.  Partitioning is label-skewed Dirichlet over the
training nodes; each client receives the induced subgraph on its shard,
so edges between shards are dropped.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


class DatasetError(ValueError):
    """Raised when a dataset file or structure fails validation."""


@dataclass
class GraphDataset:
    """One attributed graph with labels and an optional node-level split."""

    features: np.ndarray          # (N, d) float64
    edges: np.ndarray             # (M, 2) int64, canonical u < v
    labels: np.ndarray            # (N,) int64 in {0, 1}
    split: Optional[np.ndarray] = None   # (N,) int8 in {TRAIN, VAL, TEST}

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def indices(self, split_name: str) -> np.ndarray:
        if self.split is None:
            raise DatasetError("dataset has no split assigned")
        return np.flatnonzero(self.split == SPLIT_NAMES[split_name])

    def validate(self, split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2),
                 split_tol: float = 0.02) -> "GraphDataset":
        n = self.num_nodes
        if self.features.ndim != 2 or n == 0:
            raise DatasetError("features must be a non-empty (N, d) matrix")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features contain non-finite values")
        if self.labels.shape != (n,):
            raise DatasetError("labels must have one entry per node")
        label_values = set(np.unique(self.labels).tolist())
        if not label_values <= {0, 1}:
            raise DatasetError(f"labels must be 0/1, found {sorted(label_values)}")
        if label_values != {0, 1}:
            raise DatasetError("both classes must be present")
        if self.edges.size:
            if self.edges.ndim != 2 or self.edges.shape[1] != 2:
                raise DatasetError("edges must be an (M, 2) array")
            if self.edges.min() < 0 or self.edges.max() >= n:
                bad = self.edges[(self.edges < 0).any(1) | (self.edges >= n).any(1)][0]
                raise DatasetError(f"edge {tuple(bad)} references a node outside 0..{n - 1}")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                v = int(self.edges[self.edges[:, 0] == self.edges[:, 1]][0, 0])
                raise DatasetError(f"self loop at node {v}")
            canon = np.sort(self.edges, axis=1)
            _, counts = np.unique(canon, axis=0, return_counts=True)
            if np.any(counts > 1):
                raise DatasetError("duplicate edges present")
        if self.split is not None:
            if self.split.shape != (n,):
                raise DatasetError("split must have one tag per node")
            for name, frac in zip(("train", "val", "test"), split_fractions):
                share = np.mean(self.split == SPLIT_NAMES[name])
                if abs(share - frac) > split_tol:
                    raise DatasetError(
                        f"{name} share {share:.3f} outside {frac} +/- {split_tol}")
        return self


@dataclass
class FileSchema:
    """Column naming for CSV datasets."""

    id_col: str = "id"
    label_col: str = "label"
    feature_prefix: str = "f"
    src_col: str = "src"
    dst_col: str = "dst"


@dataclass
class SyntheticGraphConfig:
    nodes_per_class: int = 1000
    feature_dim: int = 16
    class_mean_separation: float = 4.0
    intra_class_edge_prob: float = 0.02
    inter_class_edge_prob: float = 0.002


@dataclass
class PartitionSpec:
    num_clients: int = 10
    alpha: float = 0.5
    seed: int = 0


@dataclass
class ClientShard:
    """A client's induced subgraph over its share of the training nodes."""

    client_id: int
    node_indices: np.ndarray        # global node ids, ascending
    edges: np.ndarray               # (L, 2) local indices into node_indices
    label_counts: np.ndarray        # (2,) counts of classes 0 and 1

    @property
    def num_nodes(self) -> int:
        return int(self.node_indices.shape[0])


def _canonical_edges(raw: np.ndarray, context: str) -> np.ndarray:
    """Sort endpoints of undirected edges and reject loops/duplicates."""
    if raw.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = np.asarray(raw, dtype=np.int64).reshape(-1, 2)
    loops = edges[:, 0] == edges[:, 1]
    if loops.any():
        raise DatasetError(f"{context}: self loop at node {int(edges[loops][0, 0])}")
    canon = np.sort(edges, axis=1)
    uniq, counts = np.unique(canon, axis=0, return_counts=True)
    if np.any(counts > 1):
        dup = uniq[counts > 1][0]
        raise DatasetError(f"{context}: duplicate edge {tuple(int(x) for x in dup)}")
    order = np.lexsort((uniq[:, 1], uniq[:, 0]))
    return uniq[order]


def _load_json(path: str) -> GraphDataset:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: malformed JSON at line {exc.lineno}") from exc
    for key in ("features", "edges", "labels"):
        if key not in obj:
            raise DatasetError(f"{path}: missing key '{key}'")
    features = np.asarray(obj["features"], dtype=np.float64)
    labels = np.asarray(obj["labels"], dtype=np.int64)
    edges = _canonical_edges(np.asarray(obj["edges"], dtype=np.int64), path)
    return GraphDataset(features, edges, labels).validate()


def _load_csv(node_path: str, edge_path: str, schema: FileSchema) -> GraphDataset:
    try:
        nodes = pd.read_csv(node_path)
    except Exception as exc:
        raise DatasetError(f"{node_path}: {exc}") from exc
    for col in (schema.id_col, schema.label_col):
        if col not in nodes.columns:
            raise DatasetError(f"{node_path}: missing column '{col}'")
    feat_cols = [c for c in nodes.columns if c.startswith(schema.feature_prefix)
                 and c[len(schema.feature_prefix):].isdigit()]
    feat_cols.sort(key=lambda c: int(c[len(schema.feature_prefix):]))
    if not feat_cols:
        raise DatasetError(f"{node_path}: no feature columns '{schema.feature_prefix}0..'")
    numeric = nodes[feat_cols].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # header occupies line 1, so data row i sits on line i + 2
        raise DatasetError(f"{node_path}: non-numeric feature at line {row + 2}")
    ids = nodes[schema.id_col].to_numpy()
    if len(np.unique(ids)) != len(ids):
        raise DatasetError(f"{node_path}: duplicate node ids")
    order = np.argsort(ids, kind="stable")
    id_map = {int(ids[i]): rank for rank, i in enumerate(order)}
    features = numeric.to_numpy(dtype=np.float64)[order]
    labels = nodes[schema.label_col].to_numpy(dtype=np.int64)[order]

    try:
        edge_df = pd.read_csv(edge_path)
    except Exception as exc:
        raise DatasetError(f"{edge_path}: {exc}") from exc
    for col in (schema.src_col, schema.dst_col):
        if col not in edge_df.columns:
            raise DatasetError(f"{edge_path}: missing column '{col}'")
    raw = edge_df[[schema.src_col, schema.dst_col]].to_numpy()
    remapped = np.empty_like(raw, dtype=np.int64)
    for r in range(raw.shape[0]):
        for c in range(2):
            key = int(raw[r, c])
            if key not in id_map:
                raise DatasetError(f"{edge_path}: unknown node id {key} at line {r + 2}")
            remapped[r, c] = id_map[key]
    edges = _canonical_edges(remapped, edge_path)
    return GraphDataset(features, edges, labels).validate()


def load_dataset(path: str, edge_path: Optional[str] = None,
                 schema: Optional[FileSchema] = None) -> GraphDataset:
    """Load a graph dataset from a JSON file or a node/edge CSV pair."""
    if path.endswith(".json"):
        return _load_json(path)
    if edge_path is None:
        raise DatasetError("CSV datasets need both a node file and an edge file")
    return _load_csv(path, edge_path, schema or FileSchema())


def stratified_split(dataset: GraphDataset,
                     fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2),
                     seed: int = 0) -> GraphDataset:
    """Assign train/val/test tags class by class.

    Within each class the shuffled nodes are cut at round(f_train * n) and
    round(f_val * n); the remainder is test.  Returns a new dataset, the
    input is untouched.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    split = np.empty(dataset.num_nodes, dtype=np.int8)
    for cls in (0, 1):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size < 10:
            raise DatasetError(f"class {cls} has {members.size} nodes, need at least 10")
        members = rng.permutation(members)
        n = members.size
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        split[members[:n_train]] = TRAIN
        split[members[n_train:n_train + n_val]] = VAL
        split[members[n_train + n_val:]] = TEST
    out = GraphDataset(dataset.features, dataset.edges, dataset.labels, split)
    return out.validate(fractions)


def _induced_subgraph(dataset: GraphDataset, nodes: np.ndarray) -> np.ndarray:
    """Edges of the induced subgraph, re-indexed to positions in `nodes`."""
    local = {int(g): i for i, g in enumerate(nodes)}
    keep: List[Tuple[int, int]] = []
    member = np.zeros(dataset.num_nodes, dtype=bool)
    member[nodes] = True
    for u, v in dataset.edges:
        if member[u] and member[v]:
            keep.append((local[int(u)], local[int(v)]))
    if not keep:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(keep, dtype=np.int64)


def dirichlet_partition(dataset: GraphDataset, spec: PartitionSpec) -> List[ClientShard]:
    """Split training nodes across clients with label-skewed Dirichlet draws.

    For each class one proportion vector p ~ Dir(alpha * 1_K) is drawn and
    the class's training nodes are dealt out by those proportions.  Empty
    shards are repaired by donating one node from the largest shard.
    """
    if spec.num_clients < 2:
        raise DatasetError("partitioning needs at least 2 clients")
    if spec.alpha <= 0:
        raise DatasetError("alpha must be positive")
    rng = np.random.default_rng(spec.seed)
    train_nodes = dataset.indices("train")
    assignment: List[List[int]] = [[] for _ in range(spec.num_clients)]
    for cls in (0, 1):
        members = train_nodes[dataset.labels[train_nodes] == cls]
        members = rng.permutation(members)
        props = rng.dirichlet(np.full(spec.num_clients, spec.alpha))
        cuts = np.floor(np.cumsum(props) * members.size).astype(int)[:-1]
        for k, part in enumerate(np.split(members, cuts)):
            assignment[k].extend(int(v) for v in part)

    sizes = [len(a) for a in assignment]
    while min(sizes) == 0:
        donor = int(np.argmax(sizes))
        taker = sizes.index(0)
        assignment[taker].append(assignment[donor].pop())
        sizes = [len(a) for a in assignment]

    shards = []
    for k in range(spec.num_clients):
        nodes = np.sort(np.asarray(assignment[k], dtype=np.int64))
        counts = np.bincount(dataset.labels[nodes], minlength=2)
        shards.append(ClientShard(
            client_id=k,
            node_indices=nodes,
            edges=_induced_subgraph(dataset, nodes),
            label_counts=counts,
        ))
    return shards


def label_histogram(shards: Sequence[ClientShard]) -> np.ndarray:
    """Stack client label counts into a (K, 2) matrix."""
    return np.stack([s.label_counts for s in shards]).astype(np.int64)


def generate_synthetic_bot_graph(config: SyntheticGraphConfig, seed: int = 0) -> GraphDataset:
    """Two-block stochastic block model with Gaussian node features.

    Class means sit `class_mean_separation` apart along the first feature
    axis; edges are sampled independently with the intra/inter class
    probabilities.  Node order is shuffled so class blocks are not
    contiguous.
    """
    rng = np.random.default_rng(seed)
    n, d = config.nodes_per_class, config.feature_dim
    total = 2 * n
    labels = np.repeat([0, 1], n)
    perm = rng.permutation(total)
    labels = labels[perm]
    features = rng.standard_normal((total, d))
    offset = config.class_mean_separation / 2.0
    features[:, 0] += np.where(labels == 1, offset, -offset)

    probs = np.where(labels[:, None] == labels[None, :],
                     config.intra_class_edge_prob,
                     config.inter_class_edge_prob)
    draw = rng.random((total, total))
    iu, ju = np.triu_indices(total, k=1)
    hit = draw[iu, ju] < probs[iu, ju]
    edges = np.stack([iu[hit], ju[hit]], axis=1).astype(np.int64)
    return GraphDataset(features, edges, labels).validate()
