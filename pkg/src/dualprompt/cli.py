"""Command-line entry points: cache precomputation, pre-training, and
K-shot evaluation with the transferability test.

Exit codes are a stable contract for scripting:
  0 success, 2 configuration error, 3 I/O or file-format error,
  4 numeric/training error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import finetune as ft_mod
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    SamplingError,
    TrainingError,
)
from .gnn import BACKBONES, GnnConfig
from .graph import Graph, build_graph, load_graph, make_split, sample_kshot
from .prompt import load_anchors, save_anchors, select_anchors
from .rng import derive_rng
from .reachability import build_cache, build_transition, load_cache, save_cache
from .train import TrainConfig, load_checkpoint, pretrain, save_checkpoint

log = logging.getLogger("dualprompt")

_REQUIRED = object()

# section -> key -> (expected type(s), default)
_SCHEMA = {
    "data": {
        "edges": (str, _REQUIRED),
        "features": (str, _REQUIRED),
        "labels": (str, None),
    },
    "output": {
        "dir": (str, _REQUIRED),
    },
    "split": {
        "seed": (int, 0),
    },
    "reachability": {
        "t": (int, 9),
        "t_prime": (int, 6),
    },
    "prompt": {
        "anchors": (int, 0),
        "w_pos": ((int, float), 0.1),
        "epsilon": ((int, float), 1e-6),
    },
    "gnn": {
        "backbone": (str, "attention"),
        "layers": (int, 3),
        "hidden": (int, 64),
        "heads": (int, 8),
    },
    "train": {
        "tasks": (list, ["edge", "knn"]),
        "task_probs": (list, None),
        "batch_size": (int, 256),
        "lr": ((int, float), 1e-3),
        "weight_decay": ((int, float), 0.01),
        "max_epochs": (int, 500),
        "patience": (int, 50),
        "alpha": ((int, float), 0.5),
        "alpha_prime": ((int, float), 1.0),
        "k": (int, 5),
        "seed": (int, 1),
        "subgraph_budget": (int, 256),
        "subgraph_layers": (int, 0),
        "sampler": (str, "ladies"),
        "cl_augment_ratio": ((int, float), 0.2),
        "cl_temperature": ((int, float), 0.5),
    },
    "eval": {
        "shots": (list, [8]),
        "data_seeds": (list, [0, 1, 2, 3, 4]),
        "model_seeds": (list, [0]),
        "link_probe_fraction": ((int, float), 0.0),
    },
}


@dataclass
class RunConfig:
    raw: dict
    train: TrainConfig
    gnn: GnnConfig

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def output_dir(self) -> str:
        return self.raw["output"]["dir"]

    def model_hash(self) -> str:
        """Hash over everything that determines the trained model."""
        relevant = {k: self.raw[k] for k in
                    ("data", "split", "reachability", "prompt", "gnn",
                     "train", "eval")}
        blob = json.dumps(relevant, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def _validate(section: str, table: dict) -> dict:
    schema = _SCHEMA[section]
    out = {}
    for key, value in table.items():
        if key not in schema:
            raise ConfigError(f"unknown key [{section}].{key}")
        expected, _ = schema[key]
        if value is not None and not isinstance(value, expected):
            raise ConfigError(
                f"[{section}].{key}: expected {expected}, got {type(value).__name__}"
            )
        out[key] = value
    for key, (expected, default) in schema.items():
        if key in out:
            continue
        if default is _REQUIRED:
            raise ConfigError(f"missing required key [{section}].{key}")
        out[key] = default
    return out


def load_config(path, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    for section in doc:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
    raw = {section: _validate(section, doc.get(section, {}))
           for section in _SCHEMA}
    if seed_override is not None:
        raw["train"]["seed"] = int(seed_override)
    if raw["gnn"]["backbone"] not in BACKBONES:
        raise ConfigError(f"[gnn].backbone must be one of {BACKBONES}")

    tr = raw["train"]
    train = TrainConfig(
        tasks=tuple(tr["tasks"]),
        task_probs=tuple(tr["task_probs"]) if tr["task_probs"] else None,
        batch_size=tr["batch_size"],
        lr=float(tr["lr"]),
        weight_decay=float(tr["weight_decay"]),
        max_epochs=tr["max_epochs"],
        patience=tr["patience"],
        t=raw["reachability"]["t"],
        t_prime=raw["reachability"]["t_prime"],
        num_anchors=raw["prompt"]["anchors"],
        w_pos=float(raw["prompt"]["w_pos"]),
        alpha=float(tr["alpha"]),
        alpha_prime=float(tr["alpha_prime"]),
        k=tr["k"],
        seed=tr["seed"],
        subgraph_layers=tr["subgraph_layers"],
        subgraph_budget=tr["subgraph_budget"],
        sampler=tr["sampler"],
        cl_augment_ratio=float(tr["cl_augment_ratio"]),
        cl_temperature=float(tr["cl_temperature"]),
        epsilon=float(raw["prompt"]["epsilon"]),
    )
    gnn_cfg = GnnConfig(
        backbone=raw["gnn"]["backbone"],
        num_layers=raw["gnn"]["layers"],
        hidden_dim=raw["gnn"]["hidden"],
        heads=raw["gnn"]["heads"],
    )
    return RunConfig(raw=raw, train=train, gnn=gnn_cfg)


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------

def _load_graph(cfg: RunConfig) -> Graph:
    data = cfg.data
    return load_graph(data["edges"], data["features"], data["labels"])


def _hold_out_edges(graph: Graph, fraction: float, seed: int):
    """Remove a fraction of undirected edges before pre-training so the
    link probe scores edges the model never saw."""
    if fraction <= 0:
        return graph, np.empty((0, 2), dtype=np.int64)
    src, dst = graph.edge_arrays()
    upper = src < dst
    pairs = np.stack([src[upper], dst[upper]], axis=1)
    n_hold = max(1, int(round(fraction * pairs.shape[0])))
    perm = derive_rng(seed, "edge-holdout").permutation(pairs.shape[0])
    held = pairs[perm[:n_hold]]
    kept = pairs[perm[n_hold:]]
    reduced = build_graph(kept, graph.features, graph.labels,
                          graph.num_classes)
    return reduced, held


def _cache_dir(cfg: RunConfig) -> str:
    reach_blob = json.dumps(
        {"data": cfg.data, "reachability": cfg.raw["reachability"],
         "prompt": {"anchors": cfg.raw["prompt"]["anchors"]},
         "split": cfg.raw["split"],
         "link_probe_fraction": cfg.eval["link_probe_fraction"],
         "train_seed": cfg.train.seed},
        sort_keys=True,
    ).encode("utf-8")
    tag = hashlib.sha256(reach_blob).hexdigest()[:12]
    return os.path.join(cfg.output_dir, f"cache-{tag}")


def _run_dir(cfg: RunConfig) -> str:
    """Create and return a fresh run directory (hash + timestamp, with a
    counter suffix on same-second collisions)."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(cfg.output_dir, f"{cfg.model_hash()}-{stamp}")
    for i in range(10_000):
        path = base if i == 0 else f"{base}-{i}"
        try:
            os.makedirs(path, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise OSError(f"cannot create a fresh run directory under {base}")


def _training_graph(cfg: RunConfig):
    """Graph with link-probe edges held out, plus the held-out pairs."""
    graph = _load_graph(cfg)
    return _hold_out_edges(graph, float(cfg.eval["link_probe_fraction"]),
                           cfg.train.seed)


def _ensure_cache(cfg: RunConfig, graph: Graph):
    cache_dir = _cache_dir(cfg)
    cache_path = os.path.join(cache_dir, "reachability.bin")
    anchors_path = os.path.join(cache_dir, "anchors.json")
    t_max = max(cfg.train.t, cfg.train.t_prime)
    if os.path.exists(cache_path) and os.path.exists(anchors_path):
        log.info("loading reachability cache from %s", cache_dir)
        cache = load_cache(cache_path)
        if cache.max_step >= t_max and cache.num_nodes == graph.num_nodes:
            anchors = load_anchors(anchors_path, cfg.train.t)
            return cache, anchors
        log.info("cached powers insufficient; rebuilding")
    os.makedirs(cache_dir, exist_ok=True)
    log.info("building transition powers up to t=%d", t_max)
    cache = build_cache(build_transition(graph), t_max)
    anchors = select_anchors(cache, cfg.train.t,
                             cfg.train.anchors_for(graph.num_nodes))
    save_cache(cache, cache_path)
    save_anchors(anchors, anchors_path)
    with open(os.path.join(cache_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"config_hash": cfg.model_hash(),
                   "t_max": t_max, "num_nodes": graph.num_nodes}, fh)
    return cache, anchors


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_precompute(args) -> int:
    cfg = load_config(args.config, args.seed)
    graph, _held = _training_graph(cfg)
    cache, anchors = _ensure_cache(cfg, graph)
    log.info("cache ready: T=%d, anchors=%d", cache.max_step, anchors.size)
    print(os.path.join(_cache_dir(cfg), "reachability.bin"))
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.seed)
    graph, held = _training_graph(cfg)
    split = make_split(graph, cfg.raw["split"]["seed"])
    cache, anchors = _ensure_cache(cfg, graph)

    run_dir = _run_dir(cfg)
    log_path = os.path.join(run_dir, "train_log.jsonl")
    ckpt_path = os.path.join(run_dir, "model.ckpt")

    with open(log_path, "w", encoding="utf-8") as log_fh:
        def log_fn(record):
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d val %.5f", record["epoch"], record["val_total"])

        ckpt = pretrain(graph, split, cfg.train, cfg.gnn,
                        cache=cache, anchors=anchors, log_fn=log_fn)
    ckpt.config["config_hash"] = cfg.model_hash()
    save_checkpoint(ckpt, ckpt_path)
    if held.size:
        with open(os.path.join(run_dir, "heldout_edges.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(held.tolist(), fh)
    with open(os.path.join(run_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"config_hash": cfg.model_hash(),
                   "best_epoch": ckpt.config["best_epoch"]}, fh)
    log.info("checkpoint written to %s", ckpt_path)
    print(ckpt_path)
    return 0


def _eval_cell(ckpt, graph, split, cfg, cache, anchors, shot, data_seed,
               model_seed):
    kshot = sample_kshot(split, graph, shot, seed=data_seed)
    run_seed = int(derive_rng(cfg.train.seed, "eval", shot, data_seed,
                              model_seed).integers(2**62))
    ft_cfg = replace(cfg.train, seed=run_seed)
    rec = ft_mod.transferability_test(ckpt, graph, kshot, ft_cfg, cache,
                                      anchors, split.test_nodes)
    rec.extras.update({"data_seed": data_seed, "model_seed": model_seed})
    return rec


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    stored = ckpt.config.get("config_hash")
    if stored is not None and stored != cfg.model_hash():
        raise ConfigError(
            f"checkpoint was trained under config hash {stored}, current "
            f"config hashes to {cfg.model_hash()}"
        )
    graph, _held = _training_graph(cfg)
    if graph.labels is None:
        raise ConfigError("evaluation requires a label file in [data]")
    split = make_split(graph, cfg.raw["split"]["seed"])
    cache, anchors = _ensure_cache(cfg, graph)

    cells = [(shot, ds, ms)
             for shot in cfg.eval["shots"]
             for ds in cfg.eval["data_seeds"]
             for ms in cfg.eval["model_seeds"]]
    records = []
    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(args.jobs) as pool:
            futures = [pool.submit(_eval_cell, ckpt, graph, split, cfg,
                                   cache, anchors, *cell) for cell in cells]
            records = [f.result() for f in futures]
    else:
        for cell in cells:
            records.append(_eval_cell(ckpt, graph, split, cfg, cache,
                                      anchors, *cell))

    if args.link_probe:
        held_path = os.path.join(os.path.dirname(args.checkpoint),
                                 "heldout_edges.json")
        if not os.path.exists(held_path):
            raise ConfigError(
                "--link-probe needs heldout_edges.json next to the "
                "checkpoint (pre-train with eval.link_probe_fraction > 0)"
            )
        with open(held_path, "r", encoding="utf-8") as fh:
            held = np.asarray(json.load(fh), dtype=np.int64)
        for j, name in enumerate(ckpt.config["task_names"]):
            auc = ft_mod.link_auc(ckpt, graph, held, cfg.train.seed,
                                  cfg.train, cache, anchors, task_index=j)
            records[0].extras[f"link_auc_init_{name}"] = auc
            log.info("link AUC (init %s): %.4f", name, auc)

    run_dir = _run_dir(cfg)
    ft_mod.write_report_jsonl(records, os.path.join(run_dir, "report.jsonl"))
    ft_mod.write_summary_csv(records, os.path.join(run_dir, "summary.csv"))

    print(f"{'shot':>6} {'runs':>5} {'test_f1':>10} {'std':>8}")
    by_shot = {}
    for rec in records:
        by_shot.setdefault(rec.shot, []).append(rec.test_f1)
    for shot in sorted(by_shot):
        vals = np.asarray(by_shot[shot])
        print(f"{shot:>6} {len(vals):>5} {vals.mean():>10.4f} {vals.std():>8.4f}")
    print(os.path.join(run_dir, "report.jsonl"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualprompt",
        description="Graph pre-training with dual (task + position) prompts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override [train].seed")

    p_pre = sub.add_parser("precompute",
                           help="build and persist the reachability cache")
    common(p_pre)
    p_pre.set_defaults(fn=cmd_precompute)

    p_tr = sub.add_parser("pretrain", help="run hybrid pre-training")
    common(p_tr)
    p_tr.set_defaults(fn=cmd_pretrain)

    p_ev = sub.add_parser("eval",
                          help="K-shot fine-tuning with transferability test")
    common(p_ev)
    p_ev.add_argument("--checkpoint", required=True)
    p_ev.add_argument("--jobs", type=int, default=1,
                      help="parallel evaluation workers")
    p_ev.add_argument("--link-probe", action="store_true",
                      help="also report link-prediction AUC")
    p_ev.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("UDP_LOG", "info").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (DataFormatError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return 3
    except (TrainingError, DomainError, SamplingError) as exc:
        log.error("training error: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
