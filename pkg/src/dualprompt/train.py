"""Hybrid pre-training loop: task sampling, subgraph sampling, prompting,
loss evaluation, AdamW optimization, early stopping and checkpointing."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as model_mod
from . import pretext
from .autodiff import Tape, Tensor, apply, backward
from .errors import ConfigError, DataFormatError, TrainingError
from .gnn import GnnConfig
from .graph import Graph, SplitSpec, sample_subgraph
from .prompt import AnchorSet, select_anchors
from .reachability import ReachabilityCache, build_cache, build_transition
from .rng import derive_rng

CHECKPOINT_MAGIC = b"UDPC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    tasks: tuple = ("edge", "knn")
    task_probs: tuple | None = None  # None -> uniform
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_epochs: int = 500
    patience: int = 50
    t: int = 9
    t_prime: int = 6
    num_anchors: int = 0  # 0 -> ceil(0.01 * num_nodes)
    w_pos: float = 0.1
    alpha: float = 0.5
    alpha_prime: float = 1.0
    k: int = 5
    seed: int = 1
    subgraph_layers: int = 0  # 0 -> gnn num_layers
    subgraph_budget: int = 256
    sampler: str = "ladies"
    cl_augment_ratio: float = 0.2
    cl_temperature: float = 0.5
    epsilon: float = 1e-6
    holdout_fraction: float = 0.1

    def __post_init__(self):
        for name in self.tasks:
            if name not in pretext.TASK_NAMES:
                raise ConfigError(f"unknown pretext task: {name}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("duplicate pretext task")
        if self.task_probs is not None:
            if len(self.task_probs) != len(self.tasks):
                raise ConfigError("task_probs length must match tasks")
            if abs(sum(self.task_probs) - 1.0) > 1e-9:
                raise ConfigError("task_probs must sum to 1")
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ConfigError("patience must not exceed max_epochs")

    def probs(self) -> np.ndarray:
        if self.task_probs is None:
            return np.full(len(self.tasks), 1.0 / len(self.tasks))
        return np.asarray(self.task_probs, dtype=np.float64)

    def anchors_for(self, num_nodes: int) -> int:
        if self.num_anchors > 0:
            return self.num_anchors
        return max(1, int(np.ceil(0.01 * num_nodes)))

    def layers_for(self, gnn_config: GnnConfig) -> int:
        return self.subgraph_layers if self.subgraph_layers > 0 else gnn_config.num_layers


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: dict,
    grads: dict,
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay Adam update, in place.

    Decay is applied as p <- p - lr*wd*p before the adaptive term. Params
    missing from ``grads`` are skipped entirely (no decay), matching the
    convention that untouched parameters stay untouched.
    """
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        if weight_decay:
            p.values -= lr * weight_decay * p.values
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Checkpoint container and on-disk format
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    version: int
    config: dict
    tensors: dict  # flat name -> float64 ndarray


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write atomically: payload of float64 little-endian tensors indexed by
    a JSON header."""
    flat = {name: np.asarray(arr, dtype=np.float64)
            for name, arr in ckpt.tensors.items()}
    directory = []
    offset = 0
    for name, arr in flat.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": ckpt.config, "tensors": directory},
                        sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", ckpt.version))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for arr in flat.values():
                fh.write(arr.reshape(-1).astype("<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", head[4:8])
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", head[8:16])
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise DataFormatError(f"{path}: truncated header")
        header = json.loads(raw.decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            payload = fh.read(size * 8)
            if len(payload) != size * 8:
                raise DataFormatError(f"{path}: truncated payload")
            tensors[entry["name"]] = np.frombuffer(
                payload, dtype="<f8"
            ).reshape(entry["shape"]).copy()
    return ModelCheckpoint(version=version, config=header["config"], tensors=tensors)


def checkpoint_from_state(
    state: model_mod.ModelState,
    opt: OptimizerState,
    train_config: TrainConfig,
    feat_dim: int,
    num_anchors: int,
    extra: dict | None = None,
) -> ModelCheckpoint:
    tensors = {name: t.values.copy() for name, t in model_mod.parameters(state).items()}
    for name, arr in opt.m.items():
        tensors[f"opt.m.{name}"] = arr.copy()
    for name, arr in opt.v.items():
        tensors[f"opt.v.{name}"] = arr.copy()
    tensors["opt.step"] = np.asarray(float(opt.step))
    config = {
        "train": asdict(train_config),
        "gnn": asdict(state.gnn_config),
        "task_names": list(state.task_names),
        "feat_dim": feat_dim,
        "num_anchors": num_anchors,
    }
    if extra:
        config.update(extra)
    return ModelCheckpoint(version=CHECKPOINT_VERSION, config=config, tensors=tensors)


def state_from_checkpoint(ckpt: ModelCheckpoint) -> tuple:
    """Rebuild (ModelState, OptimizerState) from a checkpoint container."""
    cfg = ckpt.config
    gnn_config = GnnConfig(**cfg["gnn"])
    train_cfg = dict(cfg["train"])
    state = model_mod.init_state(
        feat_dim=int(cfg["feat_dim"]),
        task_names=list(cfg["task_names"]),
        gnn_config=gnn_config,
        num_anchors=int(cfg["num_anchors"]),
        seed=int(train_cfg.get("seed", 0)),
        w_pos=float(train_cfg.get("w_pos", 0.1)),
        epsilon=float(train_cfg.get("epsilon", 1e-6)),
    )
    params = model_mod.parameters(state)
    for name, tensor in params.items():
        if name not in ckpt.tensors:
            raise DataFormatError(f"checkpoint missing tensor {name}")
        if tuple(ckpt.tensors[name].shape) != tensor.values.shape:
            raise DataFormatError(f"checkpoint tensor {name} has wrong shape")
        tensor.values = ckpt.tensors[name].copy()
    opt = OptimizerState()
    for name in params:
        if f"opt.m.{name}" in ckpt.tensors:
            opt.m[name] = ckpt.tensors[f"opt.m.{name}"].copy()
            opt.v[name] = ckpt.tensors[f"opt.v.{name}"].copy()
    opt.step = int(float(ckpt.tensors.get("opt.step", np.asarray(0.0))))
    return state, opt


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def _dedupe_keep_order(ids: np.ndarray) -> np.ndarray:
    _, first = np.unique(ids, return_index=True)
    return ids[np.sort(first)]


def _step_seed(config_seed: int, *tags) -> int:
    return int(derive_rng(config_seed, "step-seed", *tags).integers(2**62))


class _TaskRunner:
    """Builds (targets, loss) for one task on one batch of candidate nodes."""

    def __init__(self, graph, cache, anchors, state, config, gnn_config):
        self.graph = graph
        self.cache = cache
        self.anchors = anchors
        self.state = state
        self.config = config
        self.layers = config.layers_for(gnn_config)

    def _encode(self, targets, seed, task_index):
        sub, remap = sample_subgraph(
            self.graph, targets, self.layers, self.config.subgraph_budget,
            seed, method=self.config.sampler,
        )
        task_row = model_mod.task_row_tensor(self.state, task_index)
        n_t = targets.shape[0]
        reps = model_mod.encode_prompted(
            self.state, sub, np.arange(n_t), self.cache, self.anchors,
            task_row, orig_ids=remap,
        )
        return reps, remap

    def run(self, task_name: str, task_index: int, candidates: np.ndarray,
            seed: int):
        cfg = self.config
        if task_name == "edge":
            eb = pretext.sample_edge_batch(
                self.graph, cfg.batch_size, seed, alpha=cfg.alpha,
                candidates=candidates,
            )
            targets = _dedupe_keep_order(
                np.concatenate([eb.v, eb.v_pos, eb.v_neg])
            )
            reps, _ = self._encode(targets, seed, task_index)
            local = {int(node): pos for pos, node in enumerate(targets)}
            idx_v = [local[int(x)] for x in eb.v]
            idx_p = [local[int(x)] for x in eb.v_pos]
            idx_n = [local[int(x)] for x in eb.v_neg]
            return pretext.edge_loss(
                apply("gather_rows", [reps], {"idx": idx_v}),
                apply("gather_rows", [reps], {"idx": idx_p}),
                apply("gather_rows", [reps], {"idx": idx_n}),
                eb.margin,
            )
        if task_name == "knn":
            deg = self.graph.degrees()
            pool = candidates[deg[candidates] > 0]
            if pool.size == 0:
                raise TrainingError("no reachable candidate for knn task")
            rng = derive_rng(seed, "knn-anchors")
            batch = rng.choice(pool, size=min(cfg.batch_size, pool.size),
                               replace=False)
            samples = [
                pretext.sample_knn_batch(self.cache, int(a), cfg.k,
                                         cfg.t_prime, seed,
                                         alpha_prime=cfg.alpha_prime)
                for a in batch
            ]
            nodes = _dedupe_keep_order(np.concatenate(
                [np.concatenate(([s.anchor], s.positives, s.negatives))
                 for s in samples]
            ))
            reps, _ = self._encode(nodes, seed, task_index)
            local = {int(node): pos for pos, node in enumerate(nodes)}
            total = None
            for s in samples:
                h = apply("gather_rows", [reps], {"idx": [local[s.anchor]]})
                h = apply("reshape", [h], {"shape": (reps.shape[1],)})
                pos = apply("gather_rows", [reps],
                            {"idx": [local[int(x)] for x in s.positives]})
                neg = apply("gather_rows", [reps],
                            {"idx": [local[int(x)] for x in s.negatives]})
                loss = pretext.knn_loss(h, pos, neg, s.margin)
                total = loss if total is None else total + loss
            return total * (1.0 / len(samples))
        if task_name == "cl":
            rng = derive_rng(seed, "cl-batch")
            batch = rng.choice(candidates,
                               size=min(cfg.batch_size, candidates.size),
                               replace=False)
            sub, remap = sample_subgraph(
                self.graph, batch, self.layers, cfg.subgraph_budget, seed,
                method=cfg.sampler,
            )
            n_t = batch.shape[0]

            def encoder(view):
                task_row = model_mod.task_row_tensor(self.state, task_index)
                reps = model_mod.encode_prompted(
                    self.state, view, np.arange(n_t), self.cache,
                    self.anchors, task_row, orig_ids=remap,
                )
                return apply("gather_rows", [reps], {"idx": list(range(n_t))})

            return pretext.contrastive_loss(
                sub, cfg.cl_augment_ratio, cfg.cl_temperature,
                np.arange(n_t), seed, encoder,
            )
        raise ConfigError(f"unknown task {task_name}")


def _check_tasks_runnable(graph: Graph, config: TrainConfig) -> None:
    if "edge" in config.tasks:
        deg = graph.degrees()
        ok = np.any((deg > 0) & (deg < graph.num_nodes - 1))
        if not ok:
            raise ConfigError("edge task is not runnable on this graph "
                              "(no node has both a neighbor and a non-neighbor)")
    if "knn" in config.tasks and not np.any(graph.degrees() > 0):
        raise ConfigError("knn task needs at least one non-isolated node")


def build_position_context(
    graph: Graph, config: TrainConfig
) -> tuple[ReachabilityCache, AnchorSet]:
    cache = build_cache(build_transition(graph), max(config.t, config.t_prime))
    anchors = select_anchors(cache, config.t,
                             config.anchors_for(graph.num_nodes))
    return cache, anchors


def validation_loss(
    graph: Graph,
    holdout: np.ndarray,
    runner: _TaskRunner,
    config: TrainConfig,
) -> dict:
    """Per-task loss on the fixed holdout, evaluated off the tape."""
    losses = {}
    for j, name in enumerate(config.tasks):
        seed = _step_seed(config.seed, "val", name)
        losses[name] = float(runner.run(name, j, holdout, seed).values)
    return losses


def pretrain(
    graph: Graph,
    split: SplitSpec,
    config: TrainConfig,
    gnn_config: GnnConfig | None = None,
    cache: ReachabilityCache | None = None,
    anchors: AnchorSet | None = None,
    log_fn=None,
) -> ModelCheckpoint:
    """Run hybrid pre-training and return the lowest-validation-loss
    checkpoint. Fully deterministic under (graph, split, config)."""
    gnn_config = gnn_config or GnnConfig()
    _check_tasks_runnable(graph, config)
    if cache is None or anchors is None:
        cache, anchors = build_position_context(graph, config)

    state = model_mod.init_state(
        graph.num_features, list(config.tasks), gnn_config,
        anchors.size, config.seed, w_pos=config.w_pos, epsilon=config.epsilon,
    )
    opt = OptimizerState()
    runner = _TaskRunner(graph, cache, anchors, state, config, gnn_config)

    pre_nodes = split.pretrain_nodes
    n_hold = max(1, int(round(config.holdout_fraction * pre_nodes.size)))
    perm = derive_rng(config.seed, "holdout").permutation(pre_nodes.size)
    holdout = np.sort(pre_nodes[perm[:n_hold]])
    pool = np.sort(pre_nodes[perm[n_hold:]])
    if pool.size == 0:
        raise ConfigError("pre-training pool is empty after holdout")

    probs = config.probs()
    steps_per_epoch = max(1, int(np.ceil(pre_nodes.size / config.batch_size)))

    best = None  # (val_loss, state_clone, opt_m, opt_v, opt_step, epoch)
    if config.max_epochs == 0:
        # untrained checkpoint: initialization as-is (baseline runs)
        best = (float("inf"), model_mod.clone_state(state), {}, {}, 0, 0)
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        task_rng = derive_rng(config.seed, "task-choice", epoch)
        epoch_losses = []
        for step in range(steps_per_epoch):
            j = int(task_rng.choice(len(config.tasks), p=probs))
            seed = _step_seed(config.seed, epoch, step)
            with Tape() as tape:
                loss = runner.run(config.tasks[j], j, pool, seed)
            if not np.isfinite(loss.values):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = backward(tape, loss)
            named = {}
            names = model_mod.parameters(state)
            for name, tensor in names.items():
                if tensor in grads:
                    named[name] = grads[tensor]
            optimizer_step(names, named, opt, config.lr, config.weight_decay)
            epoch_losses.append((config.tasks[j], float(loss.values)))

        val = validation_loss(graph, holdout, runner, config)
        val_total = float(sum(probs[i] * val[name]
                              for i, name in enumerate(config.tasks)))
        if log_fn is not None:
            log_fn({
                "epoch": epoch,
                "steps": [{"task": t_, "loss": l} for t_, l in epoch_losses],
                "val": val,
                "val_total": val_total,
            })
        if best is None or val_total < best[0]:
            best = (
                val_total,
                model_mod.clone_state(state),
                {k: v.copy() for k, v in opt.m.items()},
                {k: v.copy() for k, v in opt.v.items()},
                opt.step,
                epoch,
            )
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    val_best, best_state, m, v, step_count, best_epoch = best
    best_opt = OptimizerState(m=m, v=v, step=step_count)
    return checkpoint_from_state(
        best_state, best_opt, config, graph.num_features, anchors.size,
        extra={"best_epoch": best_epoch, "best_val_loss": val_best},
    )
