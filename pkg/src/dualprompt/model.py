"""Model state container and the prompted forward pass shared by
pre-training, fine-tuning and the evaluation probes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import gnn
from .autodiff import Tensor, apply
from .errors import DimensionError
from .graph import Graph
from .prompt import (
    AnchorSet,
    PromptParams,
    align_features,
    init_prompt_params,
    position_embedding_batch,
    position_encodings,
    prompt_feature,
    prompt_graph,
)
from .reachability import ReachabilityCache
from .rng import derive_rng


@dataclass
class ModelState:
    gnn_config: gnn.GnnConfig
    gnn_params: gnn.GnnParams
    prompt_params: PromptParams
    task_table: Tensor          # [num_tasks x d]
    task_names: list
    downstream_row: Tensor | None = None  # [1 x d], fine-tuning only


def init_state(
    feat_dim: int,
    task_names: list,
    gnn_config: gnn.GnnConfig,
    num_anchors: int,
    seed: int,
    w_pos: float = 0.1,
    epsilon: float = 1e-6,
) -> ModelState:
    rng = derive_rng(seed, "task-table")
    bound = 1.0 / np.sqrt(feat_dim)
    table = Tensor(
        rng.uniform(-bound, bound, size=(len(task_names), feat_dim)),
        requires_grad=True,
    )
    return ModelState(
        gnn_config=gnn_config,
        gnn_params=gnn.init_params(gnn_config, seed),
        prompt_params=init_prompt_params(
            feat_dim, num_anchors, gnn_config.hidden_dim, seed,
            w_pos=w_pos, epsilon=epsilon,
        ),
        task_table=table,
        task_names=list(task_names),
    )


def parameters(state: ModelState) -> dict[str, Tensor]:
    """Flat name -> tensor map covering every trainable parameter."""
    out: dict[str, Tensor] = {}
    for i, group in enumerate(state.gnn_params.layers):
        for name, tensor in group.items():
            out[f"gnn.l{i}.{name}"] = tensor
    pp = state.prompt_params
    out["prompt.W_pos"] = pp.W_pos
    out["prompt.b_pos"] = pp.b_pos
    out["prompt.W_prompt"] = pp.W_prompt
    out["prompt.b_prompt"] = pp.b_prompt
    out["prompt.W_normal"] = pp.W_normal
    out["prompt.b_normal"] = pp.b_normal
    out["task.table"] = state.task_table
    if state.downstream_row is not None:
        out["task.downstream"] = state.downstream_row
    return out


def task_row_tensor(state: ModelState, task_index: int) -> Tensor:
    """Row of the task table as a [1 x d] tensor on the tape."""
    if not 0 <= task_index < state.task_table.shape[0]:
        raise DimensionError(f"task index {task_index} out of range")
    return apply("gather_rows", [state.task_table], {"idx": [task_index]})


def encode_prompted(
    state: ModelState,
    graph: Graph,
    targets: np.ndarray,
    cache: ReachabilityCache,
    anchors: AnchorSet,
    task_row: Tensor,
    orig_ids: np.ndarray | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Prompt ``targets``, align features and run the GNN.

    Returns representations for the augmented graph; the rows of the
    original nodes come first, prompt rows last (and are discarded by
    callers). Gradients flow into the task row, prompt parameters and GNN
    weights.
    """
    targets = np.asarray(targets, dtype=np.int64)
    pp = state.prompt_params
    aug, _prompt_ids = prompt_graph(
        graph, targets, task_row.values.reshape(-1), cache, anchors, pp,
        orig_ids=orig_ids,
    )
    targets_orig = targets if orig_ids is None else np.asarray(orig_ids)[targets]
    encs = position_encodings(cache, anchors, targets_orig, anchors.t)
    pos = position_embedding_batch(encs, pp)
    pf = prompt_feature(task_row, pos, pp.w_pos)
    feats = apply("concat", [Tensor(graph.features), pf], {"axis": 0})
    is_prompt = np.zeros(aug.num_nodes, dtype=bool)
    is_prompt[graph.num_nodes:] = True
    h0 = align_features(feats, is_prompt, pp)
    return gnn.forward(aug, h0, state.gnn_params, state.gnn_config,
                       attn_sink=attn_sink)


def encode_plain(state: ModelState, graph: Graph) -> Tensor:
    """Forward pass without any prompting (normal alignment only)."""
    h0 = align_features(Tensor(graph.features),
                        np.zeros(graph.num_nodes, dtype=bool),
                        state.prompt_params)
    return gnn.forward(graph, h0, state.gnn_params, state.gnn_config)


def clone_state(state: ModelState) -> ModelState:
    """Deep copy of all parameter values (used for best-epoch snapshots)."""
    new = replace(state)
    new.gnn_params = gnn.GnnParams(
        layers=[{k: Tensor(v.values.copy(), v.requires_grad)
                 for k, v in group.items()}
                for group in state.gnn_params.layers]
    )
    pp = state.prompt_params
    new.prompt_params = PromptParams(
        W_pos=Tensor(pp.W_pos.values.copy(), True),
        b_pos=Tensor(pp.b_pos.values.copy(), True),
        W_prompt=Tensor(pp.W_prompt.values.copy(), True),
        b_prompt=Tensor(pp.b_prompt.values.copy(), True),
        W_normal=Tensor(pp.W_normal.values.copy(), True),
        b_normal=Tensor(pp.b_normal.values.copy(), True),
        w_pos=pp.w_pos,
        epsilon=pp.epsilon,
    )
    new.task_table = Tensor(state.task_table.values.copy(), True)
    if state.downstream_row is not None:
        new.downstream_row = Tensor(state.downstream_row.values.copy(), True)
    return new
