"""Pre-training task definitions: edge prediction, k-NN similarity
prediction with smooth triplet + center losses, and an optional
contrastive task over perturbed graph views.

Samplers are pure functions of (inputs, seed); losses operate on
representation tensors and return scalar tensors on the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply
from .errors import SamplingError
from .graph import Graph, build_graph
from .reachability import ReachabilityCache, reach_row
from .rng import derive_rng

TASK_NAMES = ("edge", "knn", "cl")

# smoothing for reciprocal reachability weights: keeps 1/r finite at r=0
# while leaving unreachable nodes the most likely negatives
NEG_SMOOTHING_SCALE = 1e-4


@dataclass(frozen=True)
class EdgeBatch:
    """Triplets (v, v+, v-): (v, v+) is an edge, (v, v-) is not."""

    v: np.ndarray
    v_pos: np.ndarray
    v_neg: np.ndarray
    margin: float


@dataclass(frozen=True)
class KnnBatch:
    """One anchor with k reachability-sampled positives and negatives."""

    anchor: int
    positives: np.ndarray
    negatives: np.ndarray
    margin: float
    walk_step: int


def sample_edge_batch(
    graph: Graph,
    batch_size: int,
    seed: int,
    alpha: float = 0.5,
    candidates: np.ndarray | None = None,
) -> EdgeBatch:
    """v uniform over candidates with a neighbor and a non-neighbor, v+
    uniform over v's neighbors, v- uniform over non-neighbors of v
    (excluding v itself)."""
    deg = graph.degrees()
    n = graph.num_nodes
    pool = np.arange(n) if candidates is None else np.asarray(candidates)
    pool = pool[(deg[pool] > 0) & (deg[pool] < n - 1)]
    if pool.size == 0:
        raise SamplingError("no candidate has both a neighbor and a non-neighbor")
    rng = derive_rng(seed, "edge-batch")
    v = rng.choice(pool, size=batch_size, replace=True)
    v_pos = np.empty(batch_size, dtype=np.int64)
    v_neg = np.empty(batch_size, dtype=np.int64)
    for row in range(batch_size):
        nbrs = graph.neighbors(int(v[row]))
        v_pos[row] = nbrs[rng.integers(0, nbrs.shape[0])]
        for _ in range(200):  # rejection sampling, then exact fallback
            cand = int(rng.integers(0, n))
            if cand != v[row] and not graph.has_edge(int(v[row]), cand):
                v_neg[row] = cand
                break
        else:
            mask = np.ones(n, dtype=bool)
            mask[v[row]] = False
            mask[nbrs] = False
            options = np.nonzero(mask)[0]
            v_neg[row] = options[rng.integers(0, options.shape[0])]
    return EdgeBatch(v=v, v_pos=v_pos, v_neg=v_neg, margin=alpha)


def edge_loss(h: Tensor, h_pos: Tensor, h_neg: Tensor, alpha: float) -> Tensor:
    """-S(h,h+) + max{0, S(h,h-) - alpha}, averaged over the batch."""
    s_pos = apply("cosine", [h, h_pos])
    s_neg = apply("cosine", [h, h_neg])
    hinge = apply("relu", [s_neg - alpha])
    return apply("mean", [hinge - s_pos])


def sample_knn_batch(
    cache: ReachabilityCache,
    node: int,
    k: int,
    walk_step: int,
    seed: int,
    alpha_prime: float = 1.0,
) -> KnnBatch:
    """Positives ~ Cat(reachabilities), negatives ~ Cat of smoothed
    reciprocal reachabilities, both with replacement."""
    row = reach_row(cache, node, walk_step)
    total = row.sum()
    if total <= 0.0:
        raise SamplingError(f"node {node} reaches nothing in {walk_step} steps")
    rng = derive_rng(seed, "knn-batch", node)
    n = row.shape[0]
    positives = rng.choice(n, size=k, replace=True, p=row / total)
    lam = NEG_SMOOTHING_SCALE / n
    weights = 1.0 / (row + lam)
    weights[node] = 0.0
    negatives = rng.choice(n, size=k, replace=True, p=weights / weights.sum())
    return KnnBatch(
        anchor=int(node), positives=positives, negatives=negatives,
        margin=alpha_prime, walk_step=walk_step,
    )


def knn_loss(h_i: Tensor, positives: Tensor, negatives: Tensor,
             alpha_prime: float) -> Tensor:
    """Smooth triplet loss plus center loss for one anchor.

    D(a, b) = 1 - S(a, b). The triplet part is max{0, J~}^2 with
    J~ = lse_j D(h, h_j+) + lse_j (alpha' - D(h, h_j-)); the center part is
    the mean squared positive distance.
    """
    d_pos = 1.0 - apply("cosine", [h_i, positives])
    d_neg = 1.0 - apply("cosine", [h_i, negatives])
    j_smooth = apply("log_sum_exp", [d_pos]) + apply("log_sum_exp",
                                                     [alpha_prime - d_neg])
    triplet = apply("square", [apply("relu", [j_smooth])])
    center = apply("mean", [apply("square", [d_pos])])
    return triplet + center


def reference_triplet_objective(
    h: np.ndarray, pos: np.ndarray, neg: np.ndarray, alpha_prime: float
) -> float:
    """Non-smooth objective max{0, J}^2 with hard maxima (test oracle)."""

    def cos(a, b):
        return (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))

    d_pos = np.array([1.0 - cos(h, p) for p in pos])
    d_neg = np.array([1.0 - cos(h, q) for q in neg])
    j = d_pos.max() + (alpha_prime - d_neg).max()
    return float(max(0.0, j) ** 2)


# ---------------------------------------------------------------------------
# Contrastive task (optional)
# ---------------------------------------------------------------------------

def perturb_graph(graph: Graph, augment_ratio: float, rng) -> Graph:
    """Stochastic view: drop edges and mask feature columns at the ratio."""
    src, dst = graph.edge_arrays()
    upper = src < dst
    pairs = np.stack([src[upper], dst[upper]], axis=1)
    keep = rng.random(pairs.shape[0]) >= augment_ratio
    features = graph.features.copy()
    n_cols = features.shape[1]
    masked = rng.choice(n_cols, size=int(round(augment_ratio * n_cols)),
                        replace=False)
    features[:, masked] = 0.0
    return build_graph(pairs[keep], features, graph.labels, graph.num_classes)


def contrastive_loss(
    graph: Graph,
    augment_ratio: float,
    temperature: float,
    batch: np.ndarray,
    seed: int,
    encoder,
) -> Tensor:
    """Normalized-temperature cross-entropy over two views of the batch.

    ``encoder(view_graph) -> Tensor [len(batch) x d']`` embeds the batch
    nodes in a perturbed copy of ``graph``; a node's two views are the
    positive pair, every other view in the batch is a negative.
    """
    rng = derive_rng(seed, "cl-views")
    r1 = encoder(perturb_graph(graph, augment_ratio, rng))
    r2 = encoder(perturb_graph(graph, augment_ratio, rng))
    b = len(batch)
    z = apply("concat", [r1, r2], {"axis": 0})
    norms = apply("l2norm_rows", [z])
    zn = apply("div", [z, norms])
    sims = (zn @ apply("transpose", [zn])) * (1.0 / temperature)
    sims = sims + Tensor(np.diag(np.full(2 * b, -1e9)))  # mask self-pairs
    pos_idx = np.concatenate([np.arange(b) + b, np.arange(b)])
    log_denom = apply("log_sum_exp", [sims])
    pos = apply("take_per_row", [sims], {"cols": pos_idx})
    return apply("mean", [log_denom - pos])
