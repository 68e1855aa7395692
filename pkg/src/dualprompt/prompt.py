"""Anchors, position encodings/embeddings, prompt features and graph prompting.

A prompt node is a virtual node whose feature combines a trainable task
embedding with a position embedding derived from random-walk reachability
to a fixed set of anchor nodes; it is attached by a single undirected edge
to the target node whose representation it conditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply
from .errors import DimensionError
from .graph import Graph, build_graph
from .reachability import ReachabilityCache, total_reach
from .rng import derive_rng


@dataclass(frozen=True)
class AnchorSet:
    """Top-m nodes by total reachability at step t; ties broken by id."""

    anchor_ids: np.ndarray
    t: int

    @property
    def size(self) -> int:
        return int(self.anchor_ids.shape[0])


def select_anchors(cache: ReachabilityCache, t: int, m: int) -> AnchorSet:
    totals = total_reach(cache, t)
    n = totals.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"anchor count m={m} outside [1, {n}]")
    order = np.lexsort((np.arange(n), -totals))
    return AnchorSet(anchor_ids=order[:m].astype(np.int64), t=t)


def save_anchors(anchors: AnchorSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([int(a) for a in anchors.anchor_ids], fh)


def load_anchors(path, t: int) -> AnchorSet:
    with open(path, "r", encoding="utf-8") as fh:
        ids = json.load(fh)
    return AnchorSet(anchor_ids=np.asarray(ids, dtype=np.int64), t=t)


def position_encoding(
    cache: ReachabilityCache, anchors: AnchorSet, node: int, t: int
) -> np.ndarray:
    """Reachabilities from ``node`` to each anchor after t steps."""
    mat = cache.power(t)
    row = np.zeros(mat.shape[1])
    lo, hi = mat.indptr[node], mat.indptr[node + 1]
    row[mat.indices[lo:hi]] = mat.data[lo:hi]
    return row[anchors.anchor_ids]


def position_encodings(
    cache: ReachabilityCache, anchors: AnchorSet, nodes: np.ndarray, t: int
) -> np.ndarray:
    """[len(nodes) x m] batch of position encodings."""
    mat = cache.power(t)
    sub = mat[np.asarray(nodes, dtype=np.int64)][:, anchors.anchor_ids]
    return np.asarray(sub.todense())


@dataclass
class PromptParams:
    """Trainable prompt-side parameters plus the two alignment maps."""

    W_pos: Tensor      # [d x m]
    b_pos: Tensor      # [d]
    W_prompt: Tensor   # [d x d_h]
    b_prompt: Tensor   # [d_h]
    W_normal: Tensor   # [d x d_h]
    b_normal: Tensor   # [d_h]
    w_pos: float = 0.1
    epsilon: float = 1e-6


def init_prompt_params(
    feat_dim: int, num_anchors: int, hidden_dim: int, seed: int,
    w_pos: float = 0.1, epsilon: float = 1e-6,
) -> PromptParams:
    rng = derive_rng(seed, "prompt-params")

    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    return PromptParams(
        W_pos=u(num_anchors, (feat_dim, num_anchors)),
        b_pos=u(num_anchors, (feat_dim,)),
        W_prompt=u(feat_dim, (feat_dim, hidden_dim)),
        b_prompt=u(feat_dim, (hidden_dim,)),
        W_normal=u(feat_dim, (feat_dim, hidden_dim)),
        b_normal=u(feat_dim, (hidden_dim,)),
        w_pos=w_pos,
        epsilon=epsilon,
    )


def scale_encoding(enc: np.ndarray, epsilon: float) -> np.ndarray:
    """Divide by the population standard deviation of the components.

    Rows of a 2-D input are scaled independently; sigma=0 (e.g. m=1 or an
    all-zero row) is rescued by epsilon alone.
    """
    if enc.ndim == 1:
        return enc / (enc.std() + epsilon)
    return enc / (enc.std(axis=1, keepdims=True) + epsilon)


def position_embedding(enc: np.ndarray, params: PromptParams) -> Tensor:
    """tanh(W_pos . enc/(sigma+eps) + b_pos); differentiable in W_pos, b_pos."""
    scaled = Tensor(scale_encoding(np.asarray(enc, dtype=np.float64),
                                   params.epsilon))
    return apply("tanh", [params.W_pos @ scaled + params.b_pos])


def position_embedding_batch(encs: np.ndarray, params: PromptParams) -> Tensor:
    scaled = Tensor(scale_encoding(np.asarray(encs, dtype=np.float64),
                                   params.epsilon))
    z = scaled @ apply("transpose", [params.W_pos]) + params.b_pos
    return apply("tanh", [z])


def prompt_feature(task_row: Tensor, pos_emb: Tensor, w_pos: float) -> Tensor:
    """Weighted sum: task embedding plus w_pos times position embedding."""
    if task_row.shape[-1] != pos_emb.shape[-1]:
        raise DimensionError(
            f"task row width {task_row.shape[-1]} != position width {pos_emb.shape[-1]}"
        )
    return task_row + pos_emb * w_pos


def align_features(features: Tensor, is_prompt: np.ndarray,
                   params: PromptParams) -> Tensor:
    """Map prompt rows through the prompt transform and normal rows through
    the normal transform, producing the GNN input h0 [n x d_h]."""
    is_prompt = np.asarray(is_prompt, dtype=bool)
    if is_prompt.shape[0] != features.shape[0]:
        raise DimensionError("prompt flags must cover every row")
    y_prompt = features @ params.W_prompt + params.b_prompt
    y_normal = features @ params.W_normal + params.b_normal
    mask = Tensor(is_prompt[:, None].astype(np.float64))
    return y_prompt * mask + y_normal * (1.0 - mask)


def prompt_node_features(
    targets_orig: np.ndarray,
    task_row: np.ndarray,
    cache: ReachabilityCache,
    anchors: AnchorSet,
    params: PromptParams,
) -> np.ndarray:
    """Numeric prompt features for the given (original-id) target nodes."""
    encs = position_encodings(cache, anchors, targets_orig, anchors.t)
    scaled = scale_encoding(encs, params.epsilon)
    pos = np.tanh(scaled @ params.W_pos.values.T + params.b_pos.values)
    return task_row[None, :] + params.w_pos * pos


def prompt_graph(
    graph: Graph,
    targets: np.ndarray,
    task_row: np.ndarray,
    cache: ReachabilityCache,
    anchors: AnchorSet,
    params: PromptParams,
    orig_ids: np.ndarray | None = None,
) -> tuple[Graph, np.ndarray]:
    """Attach one prompt node (with computed features) per target node.

    The input graph is left untouched; prompt nodes take ids
    num_nodes..num_nodes+len(targets)-1 in target order. ``orig_ids`` maps
    local ids to the ids the reachability cache was built with, for
    prompting inside a sampled subgraph.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return graph, np.empty(0, dtype=np.int64)
    if np.unique(targets).shape[0] != targets.shape[0]:
        raise ValueError("duplicate target nodes")
    if targets.min() < 0 or targets.max() >= graph.num_nodes:
        raise ValueError("target id out of range")
    task_row = np.asarray(task_row, dtype=np.float64).reshape(-1)
    if task_row.shape[0] != graph.num_features:
        raise DimensionError("task embedding width must match feature width")

    n = graph.num_nodes
    targets_orig = targets if orig_ids is None else np.asarray(orig_ids)[targets]
    pf = prompt_node_features(targets_orig, task_row, cache, anchors, params)

    prompt_ids = n + np.arange(targets.shape[0], dtype=np.int64)
    src, dst = graph.edge_arrays()
    edges = np.concatenate(
        [np.stack([src, dst], axis=1),
         np.stack([targets, prompt_ids], axis=1)]
    )
    features = np.vstack([graph.features, pf])
    return build_graph(edges, features), prompt_ids
