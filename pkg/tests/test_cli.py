import hashlib
import json
import os

import numpy as np
import pytest

from dualprompt.cli import load_config, main
from dualprompt.errors import ConfigError
from dualprompt.graph import build_graph, save_graph

from conftest import random_graph


def write_dataset(tmp_path, n=60, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    edges = [[i, (i + 1) % n] for i in range(n)]
    edges += [[i, (i + 5) % n] for i in range(n)]
    g = build_graph(np.array(edges), rng.normal(size=(n, 4)),
                    np.arange(n) % classes)
    save_graph(g, tmp_path / "edges.tsv", tmp_path / "features.bin",
               tmp_path / "labels.txt")
    return g


def write_config(tmp_path, **tweaks) -> str:
    lines = [
        "[data]",
        f'edges = "{tmp_path / "edges.tsv"}"',
        f'features = "{tmp_path / "features.bin"}"',
        f'labels = "{tmp_path / "labels.txt"}"',
        "[output]",
        f'dir = "{tmp_path / "runs"}"',
        "[reachability]",
        "t = 3",
        "t_prime = 2",
        "[prompt]",
        "anchors = 3",
        "[gnn]",
        'backbone = "convolutional"',
        "layers = 2",
        "hidden = 8",
        "[train]",
        'tasks = ["edge", "knn"]',
        "batch_size = 16",
        "max_epochs = 2",
        "patience = 2",
        "k = 2",
        "subgraph_budget = 24",
        "[eval]",
        "shots = [2]",
        "data_seeds = [0]",
        "model_seeds = [0]",
    ]
    lines += tweaks.get("extra_lines", [])
    path = tmp_path / "run.toml"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def file_hash(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def find_checkpoints(tmp_path):
    hits = []
    for root, _dirs, files in os.walk(tmp_path / "runs"):
        for f in files:
            if f == "model.ckpt":
                hits.append(os.path.join(root, f))
    return sorted(hits, key=os.path.getmtime)


class TestConfigLoading:
    def test_defaults_applied(self, tmp_path):
        write_dataset(tmp_path)
        cfg = load_config(write_config(tmp_path))
        assert cfg.train.t == 3
        assert cfg.train.lr == pytest.approx(1e-3)
        assert cfg.gnn.hidden_dim == 8

    def test_unknown_key_rejected(self, tmp_path):
        write_dataset(tmp_path)
        path = write_config(tmp_path, extra_lines=["[split]", "sneed = 1"])
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        write_dataset(tmp_path)
        path = write_config(tmp_path, extra_lines=["[wat]", "x = 1"])
        with pytest.raises(ConfigError):
            load_config(path)

    def test_type_checked(self, tmp_path):
        write_dataset(tmp_path)
        path = write_config(tmp_path)
        text = open(path).read().replace("batch_size = 16",
                                         'batch_size = "lots"')
        open(path, "w").write(text)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_required(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[data]\nedges = "x"\n')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_seed_override_changes_hash(self, tmp_path):
        write_dataset(tmp_path)
        path = write_config(tmp_path)
        a = load_config(path)
        b = load_config(path, seed_override=99)
        assert a.model_hash() != b.model_hash()


class TestPrecompute:
    def test_writes_cache_and_is_idempotent(self, tmp_path):
        write_dataset(tmp_path)
        cfg_path = write_config(tmp_path)
        assert main(["precompute", "--config", cfg_path]) == 0
        caches = [os.path.join(r, f)
                  for r, _d, fs in os.walk(tmp_path / "runs")
                  for f in fs if f == "reachability.bin"]
        assert len(caches) == 1
        first = file_hash(caches[0])
        assert main(["precompute", "--config", cfg_path]) == 0
        assert file_hash(caches[0]) == first

    def test_missing_edge_file(self, tmp_path):
        write_dataset(tmp_path)
        cfg_path = write_config(tmp_path)
        os.unlink(tmp_path / "edges.tsv")
        assert main(["precompute", "--config", cfg_path]) == 3

    def test_malformed_config(self, tmp_path):
        write_dataset(tmp_path)
        bad = tmp_path / "bad.toml"
        bad.write_text("not valid toml [ ===")
        assert main(["precompute", "--config", str(bad)]) == 2


class TestPretrain:
    def test_writes_checkpoint_and_log(self, tmp_path):
        write_dataset(tmp_path)
        cfg_path = write_config(tmp_path)
        assert main(["pretrain", "--config", cfg_path]) == 0
        ckpts = find_checkpoints(tmp_path)
        assert len(ckpts) == 1
        logp = os.path.join(os.path.dirname(ckpts[0]), "train_log.jsonl")
        records = [json.loads(l) for l in open(logp)]
        assert len(records) == 2
        assert {"epoch", "steps", "val", "val_total"} <= records[0].keys()

    def test_bad_probabilities_exit_2(self, tmp_path):
        write_dataset(tmp_path)
        cfg_path = write_config(tmp_path,
                                extra_lines=["task_probs = [0.9, 0.9]"])
        # appended lines land in [eval]; put probs in [train] instead
        text = open(cfg_path).read()
        text = text.replace("task_probs = [0.9, 0.9]", "")
        text = text.replace('tasks = ["edge", "knn"]',
                            'tasks = ["edge", "knn"]\ntask_probs = [0.9, 0.9]')
        open(cfg_path, "w").write(text)
        assert main(["pretrain", "--config", cfg_path]) == 2

    def test_identical_invocations_identical_checkpoints(self, tmp_path):
        write_dataset(tmp_path)
        cfg_path = write_config(tmp_path)
        assert main(["pretrain", "--config", cfg_path]) == 0
        assert main(["pretrain", "--config", cfg_path]) == 0
        ckpts = find_checkpoints(tmp_path)
        assert len(ckpts) == 2
        assert file_hash(ckpts[0]) == file_hash(ckpts[1])


class TestEval:
    @pytest.fixture
    def trained(self, tmp_path):
        write_dataset(tmp_path)
        cfg_path = write_config(tmp_path)
        assert main(["pretrain", "--config", cfg_path]) == 0
        return cfg_path, find_checkpoints(tmp_path)[0]

    def test_eval_writes_reports(self, tmp_path, trained, capsys):
        cfg_path, ckpt = trained
        assert main(["eval", "--config", cfg_path, "--checkpoint", ckpt]) == 0
        reports = [os.path.join(r, f)
                   for r, _d, fs in os.walk(tmp_path / "runs")
                   for f in fs if f == "report.jsonl"]
        assert len(reports) == 1
        rows = [json.loads(l) for l in open(reports[0])]
        assert len(rows) == 1  # 1 shot x 1 data seed x 1 model seed
        assert len(rows[0]["candidates"]) == 2  # one per pre-trained task
        out = capsys.readouterr().out
        assert "test_f1" in out

    def test_config_mismatch_refused(self, tmp_path, trained):
        cfg_path, ckpt = trained
        text = open(cfg_path).read().replace("max_epochs = 2",
                                             "max_epochs = 3")
        other = tmp_path / "other.toml"
        other.write_text(text)
        assert main(["eval", "--config", str(other),
                     "--checkpoint", ckpt]) == 2

    def test_missing_labels_exit_2(self, tmp_path, trained):
        cfg_path, ckpt = trained
        text = open(cfg_path).read()
        text = text.replace(f'labels = "{tmp_path / "labels.txt"}"', "")
        bare = tmp_path / "bare.toml"
        bare.write_text(text)
        assert main(["eval", "--config", str(bare), "--checkpoint", ckpt]) == 2

    def test_link_probe_without_heldout_refused(self, tmp_path, trained):
        cfg_path, ckpt = trained
        assert main(["eval", "--config", cfg_path, "--checkpoint", ckpt,
                     "--link-probe"]) == 2

    def test_link_probe_flow(self, tmp_path):
        write_dataset(tmp_path, n=80)
        cfg_path = write_config(tmp_path)
        text = open(cfg_path).read().replace(
            "model_seeds = [0]",
            "model_seeds = [0]\nlink_probe_fraction = 0.05",
        )
        open(cfg_path, "w").write(text)
        assert main(["pretrain", "--config", cfg_path]) == 0
        ckpt = find_checkpoints(tmp_path)[0]
        held = os.path.join(os.path.dirname(ckpt), "heldout_edges.json")
        assert os.path.exists(held)
        assert main(["eval", "--config", cfg_path, "--checkpoint", ckpt,
                     "--link-probe"]) == 0
        reports = [os.path.join(r, f)
                   for r, _d, fs in os.walk(tmp_path / "runs")
                   for f in fs if f == "report.jsonl"]
        rows = [json.loads(l) for l in open(sorted(reports)[0])]
        assert any(k.startswith("link_auc_init_") for k in rows[0])

    def test_jobs_flag_matches_serial(self, tmp_path):
        write_dataset(tmp_path, n=70)
        cfg_path = write_config(tmp_path)
        text = open(cfg_path).read().replace("data_seeds = [0]",
                                             "data_seeds = [0, 1]")
        open(cfg_path, "w").write(text)
        assert main(["pretrain", "--config", cfg_path]) == 0
        ckpt = find_checkpoints(tmp_path)[0]

        def report_rows():
            reports = sorted(
                os.path.join(r, f)
                for r, _d, fs in os.walk(tmp_path / "runs")
                for f in fs if f == "report.jsonl"
            )
            out = []
            for p in reports:
                out.extend(sorted(
                    (json.loads(l)["data_seed"], json.loads(l)["test_f1"])
                    for l in open(p)
                ))
            return out

        assert main(["eval", "--config", cfg_path, "--checkpoint", ckpt]) == 0
        serial = report_rows()
        assert main(["eval", "--config", cfg_path, "--checkpoint", ckpt,
                     "--jobs", "2"]) == 0
        combined = report_rows()
        assert combined == serial + serial  # parallel results match serial
