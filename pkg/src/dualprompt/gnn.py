"""Message-passing backbones behind a single forward interface.

Three aggregation schemes over the same [n x d_h] representation space:
  * attention     - per-edge attention coefficients, softmax-normalized over
                    each node's neighborhood including a self-connection;
                    heads concatenated on hidden layers, averaged on the last
  * convolutional - symmetric degree-normalized sums with self-connection
  * aggregate     - mean of neighbors concatenated with self, then projected

Adjacency enters through fixed gather/scatter index arrays built once per
graph, so the whole forward pass stays on the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, apply
from .errors import DimensionError
from .graph import Graph
from .rng import derive_rng

BACKBONES = ("attention", "convolutional", "aggregate")


@dataclass(frozen=True)
class GnnConfig:
    backbone: str = "attention"
    num_layers: int = 3
    hidden_dim: int = 64
    heads: int = 8

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise DimensionError(f"unknown backbone: {self.backbone}")
        if self.num_layers < 1:
            raise DimensionError("need at least one layer")
        if self.backbone == "attention" and self.hidden_dim % self.heads:
            raise DimensionError("hidden_dim must be divisible by heads")


@dataclass
class GnnParams:
    layers: list  # one dict[str, Tensor] per layer


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: GnnConfig, seed: int) -> GnnParams:
    """Uniform fan-in-scaled initialization, one parameter group per layer."""
    d = config.hidden_dim
    layers = []
    for layer in range(config.num_layers):
        rng = derive_rng(seed, "gnn", layer)
        group: dict[str, Tensor] = {}
        if config.backbone == "attention":
            last = layer == config.num_layers - 1
            head_dim = d if last else d // config.heads
            for h in range(config.heads):
                group[f"w{h}"] = Tensor(_uniform(rng, d, (d, head_dim)), True)
                group[f"a_src{h}"] = Tensor(_uniform(rng, head_dim, (head_dim,)), True)
                group[f"a_dst{h}"] = Tensor(_uniform(rng, head_dim, (head_dim,)), True)
        elif config.backbone == "convolutional":
            group["w"] = Tensor(_uniform(rng, d, (d, d)), True)
            group["b"] = Tensor(_uniform(rng, d, (d,)), True)
        else:  # aggregate
            group["w"] = Tensor(_uniform(rng, 2 * d, (2 * d, d)), True)
            group["b"] = Tensor(_uniform(rng, 2 * d, (d,)), True)
        layers.append(group)
    return GnnParams(layers=layers)


@dataclass
class _EdgeIndex:
    """Constant index sets for one graph (built outside the tape)."""

    src: np.ndarray          # with self-loops
    dst: np.ndarray
    gcn_coef: np.ndarray     # [E, 1] 1/sqrt(d_hat_src * d_hat_dst)
    src_plain: np.ndarray    # without self-loops
    dst_plain: np.ndarray
    inv_deg: np.ndarray      # [n, 1] 1/max(deg, 1)
    num_nodes: int
    seg_order: np.ndarray = field(default=None)  # edges sorted by dst


def build_edge_index(graph: Graph) -> _EdgeIndex:
    n = graph.num_nodes
    src_p, dst_p = graph.edge_arrays()
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([src_p, loops])
    dst = np.concatenate([dst_p, loops])
    d_hat = graph.degrees().astype(np.float64) + 1.0
    coef = (1.0 / np.sqrt(d_hat[src] * d_hat[dst]))[:, None]
    deg = graph.degrees().astype(np.float64)
    inv_deg = (1.0 / np.maximum(deg, 1.0))[:, None]
    return _EdgeIndex(
        src=src, dst=dst, gcn_coef=coef,
        src_plain=src_p, dst_plain=dst_p,
        inv_deg=inv_deg, num_nodes=n,
    )


def _segment_softmax(scores: Tensor, dst: np.ndarray, n: int) -> Tensor:
    """Softmax of per-edge scores over each destination's incoming edges."""
    # detached per-segment max keeps exp in range; constant shift, correct grads
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, dst, scores.values)
    shifted = apply("sub", [scores, Tensor(seg_max[dst])])
    ex = apply("exp", [shifted])
    denom = apply("scatter_add_rows", [ex], {"idx": dst, "num_rows": n})
    return apply("div", [ex, apply("gather_rows", [denom], {"idx": dst})])


def _attention_layer(h, group, config, idx, last, attn_sink):
    outs = []
    for head in range(config.heads):
        wh = h @ group[f"w{head}"]
        s_src = wh @ group[f"a_src{head}"]
        s_dst = wh @ group[f"a_dst{head}"]
        e_src = apply("gather_rows", [s_src], {"idx": idx.src})
        e_dst = apply("gather_rows", [s_dst], {"idx": idx.dst})
        e = apply("leaky_relu", [e_src + e_dst], {"slope": 0.2})
        alpha = _segment_softmax(e, idx.dst, idx.num_nodes)
        if attn_sink is not None:
            attn_sink.append((idx.dst.copy(), alpha.values.copy()))
        msg = apply("gather_rows", [wh], {"idx": idx.src})
        msg = msg * apply("reshape", [alpha], {"shape": (alpha.shape[0], 1)})
        outs.append(apply("scatter_add_rows", [msg],
                          {"idx": idx.dst, "num_rows": idx.num_nodes}))
    if last:
        acc = outs[0]
        for o in outs[1:]:
            acc = acc + o
        return acc * (1.0 / config.heads)
    merged = outs[0]
    for o in outs[1:]:
        merged = apply("concat", [merged, o], {"axis": 1})
    return merged


def forward(
    graph: Graph,
    h0: Tensor,
    params: GnnParams,
    config: GnnConfig,
    edge_index: _EdgeIndex | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Run all layers; returns [n x hidden_dim] representations.

    Hidden layers apply elu (attention) or relu (others); the final layer is
    linear. ``attn_sink``, when given, collects (dst, alpha) per head/layer.
    """
    if h0.shape[0] != graph.num_nodes:
        raise DimensionError("h0 row count must equal node count")
    if h0.shape[1] != config.hidden_dim:
        raise DimensionError("h0 width must equal hidden_dim")
    idx = edge_index if edge_index is not None else build_edge_index(graph)
    h = h0
    for layer, group in enumerate(params.layers):
        last = layer == config.num_layers - 1
        if config.backbone == "attention":
            h = _attention_layer(h, group, config, idx, last, attn_sink)
            if not last:
                h = apply("elu", [h], {"alpha": 1.0})
        elif config.backbone == "convolutional":
            hw = h @ group["w"]
            msg = apply("gather_rows", [hw], {"idx": idx.src}) * Tensor(idx.gcn_coef)
            h = apply("scatter_add_rows", [msg],
                      {"idx": idx.dst, "num_rows": idx.num_nodes}) + group["b"]
            if not last:
                h = apply("relu", [h])
        else:  # aggregate
            if idx.src_plain.size:
                gathered = apply("gather_rows", [h], {"idx": idx.src_plain})
                summed = apply("scatter_add_rows", [gathered],
                               {"idx": idx.dst_plain, "num_rows": idx.num_nodes})
            else:
                summed = Tensor(np.zeros(h.shape))
            mean = summed * Tensor(idx.inv_deg)
            h = apply("concat", [h, mean], {"axis": 1}) @ group["w"] + group["b"]
            if not last:
                h = apply("relu", [h])
    return h
