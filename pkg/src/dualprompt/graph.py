"""Graph data model, file ingestion, splits, K-shot draws and subgraph sampling.

The Graph container is a symmetrized, deduplicated CSR adjacency with no
self-loops plus a dense float64 feature matrix; every other stage of the
pipeline reads it and never mutates it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, DimensionError, SamplingError
from .rng import derive_rng

FEATURE_MAGIC = b"UDPM"


@dataclass
class Graph:
    """Undirected graph: CSR adjacency + dense node features (+ optional labels).

    Invariants (enforced by the constructors below, assumed everywhere else):
      * adjacency symmetric, rows sorted, no duplicates, no self-loops
      * features is [num_nodes x d] float64
      * labels, when present, lie in [0, num_classes)
    """

    num_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int | None = None
    _edge_arrays: tuple[np.ndarray, np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_directed_edges(self) -> int:
        return int(self.csr_targets.shape[0])

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.num_directed_edges // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def neighbors(self, node: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[node]:self.csr_offsets[node + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        pos = np.searchsorted(row, v)
        return pos < row.shape[0] and row[pos] == v

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) arrays of all directed edges, cached after first use."""
        if self._edge_arrays is None:
            src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
            self._edge_arrays = (src, self.csr_targets.copy())
        return self._edge_arrays


def build_graph(
    edges: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray | None = None,
    num_classes: int | None = None,
) -> Graph:
    """Normalize an edge list into a Graph.

    ``edges`` is an [m x 2] int array; both orientations are added, then
    self-loops are stripped and duplicates removed.
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError("feature matrix must be 2-D")
    n = features.shape[0]

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise DataFormatError(
            f"edge endpoint out of range: ids must lie in [0, {n})"
        )

    if edges.size:
        both = np.concatenate([edges, edges[:, ::-1]])
        both = both[both[:, 0] != both[:, 1]]
        both = np.unique(both, axis=0)  # sorts by (src, dst)
        src, dst = both[:, 0], both[:, 1]
    else:
        src = dst = np.empty(0, dtype=np.int64)

    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)

    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != n:
            raise DimensionError(
                f"label count {labels.shape[0]} != node count {n}"
            )
        if labels.size and labels.min() < 0:
            raise DataFormatError("negative class id in labels")
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        elif labels.size and labels.max() >= num_classes:
            raise DataFormatError("label outside [0, num_classes)")

    return Graph(
        num_nodes=n,
        csr_offsets=offsets,
        csr_targets=dst,
        features=features,
        labels=labels,
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:4] != FEATURE_MAGIC:
            raise DataFormatError(f"{path}: not a feature file (bad magic/header)")
        rows, cols = struct.unpack("<QQ", head[4:20])
        payload = fh.read(rows * cols * 8)
        if len(payload) != rows * cols * 8:
            raise DataFormatError(f"{path}: truncated feature payload")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def write_features(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f8", copy=False).tobytes())


def read_edge_list(path) -> np.ndarray:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'src<TAB>dst'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer node id") from exc
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def write_edge_list(path, graph: Graph) -> None:
    src, dst = graph.edge_arrays()
    keep = src < dst  # one line per undirected edge
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in zip(src[keep], dst[keep]):
            fh.write(f"{u}\t{v}\n")


def read_labels(path) -> np.ndarray:
    vals = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(int(line))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer label") from exc
    return np.asarray(vals, dtype=np.int64)


def write_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


def load_graph(edge_path, feature_path, label_path=None) -> Graph:
    """Load a Graph from an edge TSV, a binary feature file and optional labels."""
    features = read_features(feature_path)
    edges = read_edge_list(edge_path)
    labels = read_labels(label_path) if label_path is not None else None
    return build_graph(edges, features, labels)


def save_graph(graph: Graph, edge_path, feature_path, label_path=None) -> None:
    write_edge_list(edge_path, graph)
    write_features(feature_path, graph.features)
    if label_path is not None:
        if graph.labels is None:
            raise DimensionError("graph has no labels to write")
        write_labels(label_path, graph.labels)


# ---------------------------------------------------------------------------
# Splits and K-shot sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """70/10/10/10 node partition; flooring remainder goes to the test set."""

    pretrain_nodes: np.ndarray
    train_pool: np.ndarray
    val_pool: np.ndarray
    test_nodes: np.ndarray
    seed: int


def make_split(graph: Graph, seed: int) -> SplitSpec:
    n = graph.num_nodes
    if n < 10:
        raise DimensionError("need at least 10 nodes to split")
    perm = derive_rng(seed, "split").permutation(n)
    n_pre = int(0.7 * n)
    n_tr = int(0.1 * n)
    n_val = int(0.1 * n)
    spans = np.split(perm, [n_pre, n_pre + n_tr, n_pre + n_tr + n_val])
    return SplitSpec(
        pretrain_nodes=np.sort(spans[0]),
        train_pool=np.sort(spans[1]),
        val_pool=np.sort(spans[2]),
        test_nodes=np.sort(spans[3]),
        seed=seed,
    )


@dataclass(frozen=True)
class KShotSample:
    """K labeled nodes per class for fine-tune train and validation."""

    shot: int
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    seed: int
    deficits: dict  # class id -> shortfall when a pool has < K members


def _draw_per_class(
    pool: np.ndarray, labels: np.ndarray, num_classes: int, k: int, rng
) -> tuple[np.ndarray, dict]:
    chosen = []
    deficits = {}
    for c in range(num_classes):
        members = pool[labels[pool] == c]
        take = min(k, members.shape[0])
        if take < k:
            deficits[c] = k - take
        if take:
            chosen.append(rng.choice(members, size=take, replace=False))
    if not chosen:
        raise SamplingError("no labeled candidates in pool")
    return np.sort(np.concatenate(chosen)), deficits


def sample_kshot(split: SplitSpec, graph: Graph, k: int, seed: int) -> KShotSample:
    """Draw K train and K validation nodes per class, without replacement.

    Classes with fewer than K candidates contribute their whole pool; the
    shortfall is recorded in ``deficits`` rather than raised.
    """
    if graph.labels is None or graph.num_classes is None:
        raise DimensionError("K-shot sampling requires labels")
    train, d_tr = _draw_per_class(
        split.train_pool, graph.labels, graph.num_classes, k,
        derive_rng(seed, "kshot-train"),
    )
    val, d_val = _draw_per_class(
        split.val_pool, graph.labels, graph.num_classes, k,
        derive_rng(seed, "kshot-val"),
    )
    deficits = {c: (d_tr.get(c, 0), d_val.get(c, 0)) for c in set(d_tr) | set(d_val)}
    return KShotSample(shot=k, train_nodes=train, val_nodes=val, seed=seed,
                       deficits=deficits)


def save_node_set(path, nodes: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([int(v) for v in nodes], fh)


def load_node_set(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return np.asarray(json.load(fh), dtype=np.int64)


# ---------------------------------------------------------------------------
# Subgraph sampling
# ---------------------------------------------------------------------------

def _induced_subgraph(graph: Graph, keep: np.ndarray) -> Graph:
    """Induced subgraph on ``keep`` (new id = position in ``keep``)."""
    new_id = np.full(graph.num_nodes, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.shape[0])
    src, dst = graph.edge_arrays()
    mask = (new_id[src] >= 0) & (new_id[dst] >= 0)
    sub_edges = np.stack([new_id[src[mask]], new_id[dst[mask]]], axis=1)
    labels = graph.labels[keep] if graph.labels is not None else None
    return build_graph(sub_edges, graph.features[keep], labels, graph.num_classes)


def sample_subgraph(
    graph: Graph,
    targets: np.ndarray,
    layers: int,
    budget_per_layer: int,
    seed: int,
    method: str = "ladies",
) -> tuple[Graph, np.ndarray]:
    """Sample a dense training subgraph around ``targets``.

    The default method is layer-dependent importance sampling: each round
    draws up to ``budget_per_layer`` frontier nodes without replacement with
    probability proportional to the squared column norms of the symmetric
    degree-normalized adjacency restricted to the rows already selected.
    ``method="hops"`` is a plain capped L-hop expansion kept for debugging.

    Returns the induced subgraph and the remap array (subgraph id -> original
    id). Targets occupy subgraph ids 0..len(targets)-1 in their given order.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise SamplingError("sample_subgraph needs at least one target")
    if targets.min() < 0 or targets.max() >= graph.num_nodes:
        raise SamplingError("target id out of range")
    targets = targets[np.sort(np.unique(targets, return_index=True)[1])]

    rng = derive_rng(seed, "subgraph")
    deg = graph.degrees().astype(np.float64)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)

    in_set = np.zeros(graph.num_nodes, dtype=bool)
    in_set[targets] = True
    current = targets

    for _ in range(layers):
        # squared entries of D^-1/2 A D^-1/2 restricted to rows in the set:
        # edge (i, j) with i in set contributes 1 / (deg_i * deg_j) to column j
        nbr_chunks = [graph.neighbors(i) for i in current]
        if not nbr_chunks:
            break
        nbrs = np.concatenate(nbr_chunks) if nbr_chunks else np.empty(0, np.int64)
        if nbrs.size == 0:
            break
        srcs = np.repeat(current, [c.shape[0] for c in nbr_chunks])
        contrib = (inv_sqrt[srcs] * inv_sqrt[nbrs]) ** 2
        weights = np.zeros(graph.num_nodes)
        np.add.at(weights, nbrs, contrib)
        weights[in_set] = 0.0
        candidates = np.nonzero(weights > 0)[0]
        if candidates.size == 0:
            break
        take = min(budget_per_layer, candidates.size)
        if method == "ladies":
            p = weights[candidates] / weights[candidates].sum()
            picked = rng.choice(candidates, size=take, replace=False, p=p)
        elif method == "hops":
            picked = rng.choice(candidates, size=take, replace=False)
        else:
            raise SamplingError(f"unknown subgraph sampling method: {method}")
        in_set[picked] = True
        current = np.sort(picked)

    extras = np.nonzero(in_set)[0]
    extras = extras[~np.isin(extras, targets)]
    remap = np.concatenate([targets, extras])
    return _induced_subgraph(graph, remap), remap
