import json

import numpy as np
import pytest

from lmplab import __version__
from lmplab.cli import main
from lmplab.grid import Edge, Grid, read_case, write_case
from lmplab.nn import count_parameters


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small grid, dataset and trained checkpoint shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert run("grid-gen", "--n", 8, "--avg-degree", 2.5, "--seed", 7, "-o", root / "g.case") == 0
    assert run("data-gen", "--grid", root / "g.case", "--count", 60, "--seed", 1, "--out", root / "data") == 0
    assert run("train", "--grid", root / "g.case", "--data", root / "data", "--max-epochs", 3,
               "--dims", "4,8,1", "--out", root / "runs") == 0
    return root


def test_grid_gen_readable_and_byte_identical(tmp_path, capsys):
    for name in ("a.case", "b.case"):
        assert run("grid-gen", "--n", 30, "--avg-degree", 2.5, "--seed", 7, "-o", tmp_path / name) == 0
    assert (tmp_path / "a.case").read_bytes() == (tmp_path / "b.case").read_bytes()
    g = read_case(tmp_path / "a.case")
    assert g.n_nodes == 30 and g.is_connected()
    assert "N=30 E=38 connected=yes" in capsys.readouterr().out


def test_grid_gen_creates_parent_dir(tmp_path):
    assert run("grid-gen", "--n", 6, "--seed", 1, "-o", tmp_path / "new" / "g.case") == 0
    assert read_case(tmp_path / "new" / "g.case").n_nodes == 6


def test_grid_gen_missing_seed(tmp_path, capsys):
    assert run("grid-gen", "--n", 30, "-o", tmp_path / "g.case") == 2
    assert "grid.seed" in capsys.readouterr().err


def test_data_gen_counts_and_determinism(workspace, tmp_path):
    assert run("data-gen", "--grid", workspace / "g.case", "--count", 60, "--seed", 1, "--out", tmp_path) == 0
    rows = sum(len((tmp_path / f"{s}.jsonl").read_text().splitlines()) - 1 for s in ("train", "val", "test"))
    assert rows == 60
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "data.json"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()
    manifest = json.loads((tmp_path / "data.json").read_text())
    assert manifest["tool_version"] == __version__ and len(manifest["config_digest"]) == 64


def test_data_gen_threads_identical(workspace, tmp_path):
    assert run("data-gen", "--grid", workspace / "g.case", "--count", 60, "--seed", 1, "--threads", 3,
               "--out", tmp_path) == 0
    assert (tmp_path / "train.jsonl").read_bytes() == (workspace / "data" / "train.jsonl").read_bytes()


def test_data_gen_zero_jitter(workspace, tmp_path, capsys):
    assert run("data-gen", "--grid", workspace / "g.case", "--count", 10, "--bound-jitter", 0,
               "--cost-jitter", 0, "--out", tmp_path) == 0
    frac = capsys.readouterr().out.split("congested_fraction=")[1].strip()
    assert frac in ("0.0", "1.0")


def test_train_artifacts(workspace):
    metrics = json.loads((workspace / "runs" / "gnn_fr.metrics.json").read_text())
    assert metrics["fr"] is True
    g = read_case(workspace / "g.case")
    assert metrics["n_params"] == count_parameters("gnn", (4, 8, 1), g, K=2)
    assert set(metrics) >= {"tool_version", "config_digest", "test", "baseline", "val"}
    ckpt = json.loads((workspace / "runs" / "gnn_fr.ckpt.json").read_text())
    assert ckpt["format"] == "lmpnn" and ckpt["version"] == 1
    assert len(ckpt["params"]) == metrics["n_params"]
    header = (workspace / "runs" / "gnn_fr.history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,val_normalized_l2,val_violation_rate"


def test_train_mse_baseline_and_rerun(workspace, tmp_path):
    args = ("train", "--grid", workspace / "g.case", "--data", workspace / "data", "--max-epochs", 3,
            "--dims", "4,8,1", "--lambda-reg", 0, "--out", tmp_path)
    assert run(*args) == 0
    metrics = json.loads((tmp_path / "gnn.metrics.json").read_text())
    assert metrics["fr"] is False
    first = (tmp_path / "gnn.history.csv").read_bytes()
    first_ckpt = (tmp_path / "gnn.ckpt.json").read_bytes()
    assert run(*args) == 0
    assert (tmp_path / "gnn.history.csv").read_bytes() == first
    assert (tmp_path / "gnn.ckpt.json").read_bytes() == first_ckpt


def test_eval_reproduces_training_metrics(workspace, tmp_path):
    assert run("eval", "--checkpoint", workspace / "runs" / "gnn_fr.ckpt.json", "--data",
               workspace / "data" / "test.jsonl", "--grid", workspace / "g.case", "--out", tmp_path) == 0
    ev = json.loads((tmp_path / "eval.metrics.json").read_text())
    tr = json.loads((workspace / "runs" / "gnn_fr.metrics.json").read_text())
    assert ev["test"] == tr["test"]


def test_eval_tampered_params(workspace, tmp_path):
    ckpt = json.loads((workspace / "runs" / "gnn_fr.ckpt.json").read_text())
    ckpt["params"] = [p * 1.5 for p in ckpt["params"]]
    (tmp_path / "t.json").write_text(json.dumps(ckpt))
    assert run("eval", "--checkpoint", tmp_path / "t.json", "--data", workspace / "data" / "test.jsonl",
               "--grid", workspace / "g.case", "--out", tmp_path) == 0
    ev = json.loads((tmp_path / "eval.metrics.json").read_text())
    tr = json.loads((workspace / "runs" / "gnn_fr.metrics.json").read_text())
    assert ev["test"]["normalized_l2"] != tr["test"]["normalized_l2"]


def test_eval_wrong_grid(workspace, tmp_path):
    assert run("grid-gen", "--n", 8, "--seed", 8, "-o", tmp_path / "other.case") == 0
    assert run("eval", "--checkpoint", workspace / "runs" / "gnn_fr.ckpt.json", "--data",
               workspace / "data" / "test.jsonl", "--grid", tmp_path / "other.case", "--out", tmp_path) == 5


def test_transfer_report(workspace, tmp_path, capsys):
    assert run("transfer", "--checkpoint", workspace / "runs" / "gnn_fr.ckpt.json", "--grid",
               workspace / "g.case", "--seeds", "0,1", "--finetune-epochs", 5, "--count", 60,
               "--max-epochs", 2, "--per-sample-tsv", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "transfer.json").read_text())
    assert len(doc["experiments"]) == 2
    for e in doc["experiments"]:
        assert e["finetune_epochs"] == 5
        assert {"pretrained_metrics", "finetuned_metrics", "scratch_metrics"} <= set(e)
    assert set(doc["summary"]) == {"pretrained", "finetuned", "scratch"}
    assert (tmp_path / "transfer_per_sample.tsv").exists()
    capsys.readouterr()
    assert run("report", tmp_path / "transfer.json", workspace / "runs" / "gnn_fr.metrics.json",
               "--out", tmp_path) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("file\tmodel\tseed")
    assert len(table) == 1 + 6 + 2


def test_transfer_tree_grid(tmp_path, capsys):
    tree = Grid(5, tuple(Edge(i, i + 1, 1.0, 1.0) for i in range(4)))
    write_case(tree, tmp_path / "tree.case")
    assert run("data-gen", "--grid", tmp_path / "tree.case", "--count", 20, "--out", tmp_path / "d") == 0
    assert run("train", "--grid", tmp_path / "tree.case", "--data", tmp_path / "d", "--max-epochs", 1,
               "--dims", "4,2,1", "--out", tmp_path) == 0
    capsys.readouterr()
    assert run("transfer", "--checkpoint", tmp_path / "gnn_fr.ckpt.json", "--grid", tmp_path / "tree.case",
               "--seeds", "0", "--out", tmp_path) == 6
    assert "NoValidPerturbation" in capsys.readouterr().err


def test_config_file_and_flag_precedence(workspace, tmp_path):
    (tmp_path / "c.ini").write_text("[grid]\nn = 9\nseed = 3\n[model]\nkind = gnn\n")
    assert run("grid-gen", "--config", tmp_path / "c.ini", "-o", tmp_path / "a.case") == 0
    assert read_case(tmp_path / "a.case").n_nodes == 9
    assert run("grid-gen", "--config", tmp_path / "c.ini", "--n", 11, "-o", tmp_path / "b.case") == 0
    assert read_case(tmp_path / "b.case").n_nodes == 11


@pytest.mark.parametrize("text", ["[grid]\nbogus = 1\n", "[nope]\nx = 1\n", "[train]\nlr = fast\n",
                                  "[train]\nlr = -1\n"])
def test_bad_config(tmp_path, text):
    (tmp_path / "c.ini").write_text(text)
    assert run("grid-gen", "--config", tmp_path / "c.ini", "--seed", 1, "-o", tmp_path / "g.case") == 2


def test_missing_config_file(tmp_path):
    assert run("grid-gen", "--config", tmp_path / "missing.ini", "--seed", 1) == 2


def test_bad_log_level(tmp_path, monkeypatch):
    monkeypatch.setenv("LMPLAB_LOG", "chatty")
    assert run("grid-gen", "--seed", 1, "-o", tmp_path / "g.case") == 2


def test_truncated_dataset_exit_3(workspace, tmp_path):
    lines = (workspace / "data" / "test.jsonl").read_text().splitlines()
    (tmp_path / "t.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    assert run("eval", "--checkpoint", workspace / "runs" / "gnn_fr.ckpt.json", "--data", tmp_path / "t.jsonl",
               "--grid", workspace / "g.case", "--out", tmp_path) == 3


def test_divergence_exit_4(workspace, tmp_path):
    assert run("train", "--grid", workspace / "g.case", "--data", workspace / "data", "--max-epochs", 20,
               "--dims", "4,8,1", "--lr", 1e300, "--out", tmp_path) == 4
