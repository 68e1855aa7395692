"""Downstream node classification with class prototypes, the prompt-based
transferability test, and the evaluation metrics (Micro-F1, link AUC).

Classification is similarity prediction: a node is assigned the class of
the prototype vector most cosine-similar to its representation, and the
fine-tuning loss is the InfoNCE-style softmax over prototype similarities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import model as model_mod
from .autodiff import Tape, Tensor, apply, backward
from .errors import ConfigError, TrainingError
from .gnn import GnnConfig
from .graph import Graph, KShotSample, sample_subgraph
from .prompt import AnchorSet
from .reachability import ReachabilityCache
from .rng import derive_rng
from .train import (
    ModelCheckpoint,
    OptimizerState,
    TrainConfig,
    _step_seed,
    optimizer_step,
    state_from_checkpoint,
)


def micro_f1(pred, true) -> float:
    """Micro-averaged F1; equals accuracy for single-label multiclass."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("micro_f1 needs equal-length non-empty label arrays")
    tp = int((pred == true).sum())
    # single-label: every misclassification is one FP and one FN across classes
    fp = fn = int((pred != true).sum())
    return 2.0 * tp / (2.0 * tp + fp + fn)


def downstream_loss(reps: Tensor, labels: np.ndarray,
                    prototypes: Tensor) -> Tensor:
    """Mean over nodes of -log softmax of cosine similarity to the true
    class prototype."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= prototypes.shape[0]:
        raise ValueError("label outside prototype range")
    rn = apply("div", [reps, apply("l2norm_rows", [reps])])
    pn = apply("div", [prototypes, apply("l2norm_rows", [prototypes])])
    sims = rn @ apply("transpose", [pn])
    log_denom = apply("log_sum_exp", [sims])
    hit = apply("take_per_row", [sims], {"cols": labels})
    return apply("mean", [log_denom - hit])


def init_prototypes(reps: np.ndarray, labels: np.ndarray,
                    num_classes: int) -> Tensor:
    """Class means of the given representations; classes absent from the
    batch fall back to the global mean."""
    labels = np.asarray(labels, dtype=np.int64)
    global_mean = reps.mean(axis=0)
    rows = np.empty((num_classes, reps.shape[1]))
    for c in range(num_classes):
        members = reps[labels == c]
        rows[c] = members.mean(axis=0) if members.shape[0] else global_mean
        if np.linalg.norm(rows[c]) < 1e-12:
            rows[c] = global_mean + 1e-3
    return Tensor(rows, requires_grad=True)


@dataclass
class FineTuned:
    """A fine-tuned model: parameters plus the prototype table."""

    state: model_mod.ModelState
    prototypes: Tensor
    init_task: int


@dataclass
class EvalRecord:
    """One transferability-test run for a (seed, shot) cell."""

    shot: int
    seed: int
    candidates: list          # [{"init_task", "task_name", "val_f1"}]
    chosen_task: int
    chosen_task_name: str
    test_f1: float
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Representation helpers (no gradients)
# ---------------------------------------------------------------------------

def node_representations(
    state: model_mod.ModelState,
    graph: Graph,
    nodes: np.ndarray,
    cache: ReachabilityCache,
    anchors: AnchorSet,
    config: TrainConfig,
    seed: int,
    task_row: Tensor | None,
) -> np.ndarray:
    """Representations of ``nodes``, computed in prompted subgraph batches.

    ``task_row=None`` skips prompting entirely (plain forward)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    layers = config.layers_for(state.gnn_config)
    out = np.empty((nodes.size, state.gnn_config.hidden_dim))
    for lo in range(0, nodes.size, config.batch_size):
        chunk = nodes[lo:lo + config.batch_size]
        sub, remap = sample_subgraph(
            graph, chunk, layers, config.subgraph_budget,
            _step_seed(seed, "reps", lo), method=config.sampler,
        )
        if task_row is None:
            reps = model_mod.encode_plain(state, sub)
        else:
            reps = model_mod.encode_prompted(
                state, sub, np.arange(chunk.size), cache, anchors,
                task_row, orig_ids=remap,
            )
        out[lo:lo + chunk.size] = reps.values[: chunk.size]
    return out


def predict_labels(ft: FineTuned, graph: Graph, nodes: np.ndarray,
                   cache, anchors, config: TrainConfig, seed: int) -> np.ndarray:
    reps = node_representations(
        ft.state, graph, nodes, cache, anchors, config, seed,
        task_row=ft.state.downstream_row,
    )
    rn = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    pn = ft.prototypes.values / np.linalg.norm(ft.prototypes.values, axis=1,
                                               keepdims=True)
    return np.argmax(rn @ pn.T, axis=1)


def _score(ft: FineTuned, graph, nodes, labels, cache, anchors, config, seed):
    pred = predict_labels(ft, graph, nodes, cache, anchors, config, seed)
    return micro_f1(pred, labels)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

def finetune_one(
    checkpoint: ModelCheckpoint,
    graph: Graph,
    kshot: KShotSample,
    init_task: int,
    config: TrainConfig,
    cache: ReachabilityCache,
    anchors: AnchorSet,
) -> tuple[FineTuned, float]:
    """Fine-tune all parameters plus prototypes, with the downstream task
    embedding initialized from pre-trained task ``init_task``.

    Early-stops on the K-shot validation loss and returns the best state
    with its validation Micro-F1. Stochastic draws (batch order, subgraph
    samples, evaluation batches) are seeded independently of ``init_task``
    so transferability candidates are compared under common random numbers.
    """
    if graph.labels is None or graph.num_classes is None:
        raise ConfigError("fine-tuning requires labels")
    state, _ = state_from_checkpoint(checkpoint)
    if not 0 <= init_task < state.task_table.shape[0]:
        raise ConfigError(f"init_task {init_task} outside task table")
    state.downstream_row = Tensor(
        state.task_table.values[init_task:init_task + 1].copy(),
        requires_grad=True,
    )

    train_nodes = kshot.train_nodes
    train_labels = graph.labels[train_nodes]
    val_nodes = kshot.val_nodes
    val_labels = graph.labels[val_nodes]
    layers = config.layers_for(state.gnn_config)

    init_reps = node_representations(
        state, graph, train_nodes, cache, anchors, config,
        _step_seed(config.seed, "proto-init"),
        task_row=state.downstream_row,
    )
    prototypes = init_prototypes(init_reps, train_labels, graph.num_classes)

    opt = OptimizerState()
    ft = FineTuned(state=state, prototypes=prototypes, init_task=init_task)

    def val_loss() -> float:
        reps = node_representations(
            state, graph, val_nodes, cache, anchors, config,
            _step_seed(config.seed, "ft-val"),
            task_row=state.downstream_row,
        )
        return float(downstream_loss(Tensor(reps), val_labels,
                                     Tensor(prototypes.values)).values)

    best = (val_loss(), model_mod.clone_state(state),
            prototypes.values.copy())
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = derive_rng(config.seed, "ft-order",
                           epoch).permutation(train_nodes.size)
        for lo in range(0, train_nodes.size, config.batch_size):
            batch = train_nodes[order[lo:lo + config.batch_size]]
            seed = _step_seed(config.seed, "ft", epoch, lo)
            sub, remap = sample_subgraph(
                graph, batch, layers, config.subgraph_budget, seed,
                method=config.sampler,
            )
            with Tape() as tape:
                reps = model_mod.encode_prompted(
                    state, sub, np.arange(batch.size), cache, anchors,
                    state.downstream_row, orig_ids=remap,
                )
                target_reps = apply("gather_rows", [reps],
                                    {"idx": list(range(batch.size))})
                loss = downstream_loss(target_reps, graph.labels[batch],
                                       prototypes)
            if not np.isfinite(loss.values):
                raise TrainingError("non-finite fine-tuning loss")
            grads = backward(tape, loss)
            params = dict(model_mod.parameters(state), prototypes=prototypes)
            named = {n: grads[t] for n, t in params.items() if t in grads}
            optimizer_step(params, named, opt, config.lr, config.weight_decay)

        current = val_loss()
        if current < best[0]:
            best = (current, model_mod.clone_state(state),
                    prototypes.values.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    ft.state = best[1]
    ft.prototypes = Tensor(best[2], requires_grad=True)
    val_f1 = _score(ft, graph, val_nodes, val_labels, cache, anchors, config,
                    _step_seed(config.seed, "ft-val-f1"))
    return ft, val_f1


def transferability_test(
    checkpoint: ModelCheckpoint,
    graph: Graph,
    kshot: KShotSample,
    config: TrainConfig,
    cache: ReachabilityCache,
    anchors: AnchorSet,
    test_nodes: np.ndarray,
) -> EvalRecord:
    """Fine-tune once per pre-trained task embedding, keep the candidate
    with the best validation Micro-F1 (ties: lowest task index) and report
    the test Micro-F1 of the kept model only."""
    task_names = checkpoint.config["task_names"]
    if not task_names:
        raise ConfigError("checkpoint has no task embeddings")
    candidates = []
    best_ft, best_val, best_idx = None, -1.0, -1
    for j in range(len(task_names)):
        ft, val_f1 = finetune_one(checkpoint, graph, kshot, j, config,
                                  cache, anchors)
        candidates.append(
            {"init_task": j, "task_name": task_names[j], "val_f1": val_f1}
        )
        if val_f1 > best_val:  # strict: ties keep the lower index
            best_ft, best_val, best_idx = ft, val_f1, j
    test_f1 = _score(
        best_ft, graph, test_nodes, graph.labels[test_nodes], cache, anchors,
        config, _step_seed(config.seed, "test-f1", best_idx),
    )
    return EvalRecord(
        shot=kshot.shot,
        seed=config.seed,
        candidates=candidates,
        chosen_task=best_idx,
        chosen_task_name=task_names[best_idx],
        test_f1=test_f1,
    )


# ---------------------------------------------------------------------------
# Link-prediction probe
# ---------------------------------------------------------------------------

def sample_non_edges(graph: Graph, count: int, seed: int,
                     also_exclude: np.ndarray | None = None) -> np.ndarray:
    """Uniformly sampled (u, v) pairs that are not edges, u != v."""
    rng = derive_rng(seed, "non-edges")
    excluded = set()
    if also_exclude is not None:
        for u, v in np.asarray(also_exclude):
            excluded.add((int(u), int(v)))
            excluded.add((int(v), int(u)))
    out = []
    guard = 0
    while len(out) < count:
        u, v = (int(x) for x in rng.integers(0, graph.num_nodes, size=2))
        guard += 1
        if guard > 1000 * max(count, 1):
            raise TrainingError("non-edge sampling stalled; graph too dense")
        if u == v or graph.has_edge(u, v) or (u, v) in excluded:
            continue
        out.append((u, v))
    return np.asarray(out, dtype=np.int64)


def auc_from_scores(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Rank-statistic AUC with tie-averaging."""
    scores = np.concatenate([pos_scores, neg_scores])
    ranks = rankdata(scores)
    n_pos, n_neg = len(pos_scores), len(neg_scores)
    return float(
        (ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )


def link_auc(
    checkpoint: ModelCheckpoint,
    graph: Graph,
    heldout_edges: np.ndarray,
    seed: int,
    config: TrainConfig,
    cache: ReachabilityCache,
    anchors: AnchorSet,
    task_index: int | None = 0,
) -> float:
    """AUC of cosine-similarity scores separating held-out edges from an
    equal number of sampled non-edges. No fine-tuning is performed; pass
    ``task_index=None`` to probe without prompting."""
    heldout_edges = np.asarray(heldout_edges, dtype=np.int64).reshape(-1, 2)
    if heldout_edges.size == 0:
        raise ValueError("need at least one held-out edge")
    state, _ = state_from_checkpoint(checkpoint)
    negatives = sample_non_edges(graph, heldout_edges.shape[0], seed,
                                 also_exclude=heldout_edges)
    endpoints = np.unique(np.concatenate([heldout_edges.ravel(),
                                          negatives.ravel()]))
    task_row = None
    if task_index is not None:
        task_row = Tensor(
            state.task_table.values[task_index:task_index + 1].copy()
        )
    reps = node_representations(state, graph, endpoints, cache, anchors,
                                config, seed, task_row=task_row)
    lookup = {int(n): i for i, n in enumerate(endpoints)}
    rn = reps / np.linalg.norm(reps, axis=1, keepdims=True)

    def score(pairs):
        a = np.array([lookup[int(u)] for u, _ in pairs])
        b = np.array([lookup[int(v)] for _, v in pairs])
        return np.einsum("ij,ij->i", rn[a], rn[b])

    return auc_from_scores(score(heldout_edges), score(negatives))


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def write_report_jsonl(records: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "shot": rec.shot,
                "seed": rec.seed,
                "candidates": rec.candidates,
                "chosen_task": rec.chosen_task,
                "chosen_task_name": rec.chosen_task_name,
                "test_f1": rec.test_f1,
                **rec.extras,
            }, sort_keys=True) + "\n")


def write_summary_csv(records: list, path) -> None:
    """Mean +/- std of test Micro-F1 per shot, across seeds."""
    by_shot: dict = {}
    for rec in records:
        by_shot.setdefault(rec.shot, []).append(rec.test_f1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shot", "runs", "test_f1_mean", "test_f1_std"])
        for shot in sorted(by_shot):
            vals = np.asarray(by_shot[shot])
            writer.writerow([shot, len(vals),
                             f"{vals.mean():.4f}", f"{vals.std():.4f}"])
