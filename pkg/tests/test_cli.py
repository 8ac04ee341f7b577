import json
import subprocess
import sys

import pytest

from mhc_gnn.cli import EXIT_CONFIG, EXIT_DATASET, EXIT_DIVERGED, EXIT_OK, main
from mhc_gnn.graphs import make_citation_like, save_dataset
from mhc_gnn.linalg import Rng

FAST = ["--epochs", "4", "--patience", "4", "--hidden", "8", "--layers", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    g = make_citation_like(120, num_features=35, rng=Rng(0), planetoid_split=(4, 30, 50))
    return str(save_dataset(g, tmp_path_factory.mktemp("data") / "toy"))


def body(path):
    """CSV rows without the trailing metadata comment."""
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def test_train_writes_summary(data, tmp_path, capsys):
    rc = main(["train", "--dataset", data, "--streams", "2", "--seeds", "1,2", "--out",
               str(tmp_path)] + FAST)
    assert rc == EXIT_OK
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "config,mean,std,p_value,n_runs,n_diverged"
    assert lines[1].startswith("gcn-mhc-n2-L2,")
    assert lines[-1].startswith("# config_hash=")
    assert (tmp_path / "runs" / "train" / "gcn-mhc-n2-L2" / "2.json").is_file()
    assert "±" in capsys.readouterr().out


def test_baseline_flag(data, tmp_path):
    assert main(["train", "--dataset", data, "--mode", "baseline", "--seed", "1", "--out",
                 str(tmp_path)] + FAST) == EXIT_OK
    assert body(tmp_path / "summary.csv")[1].startswith("gcn-baseline-L2,")


def test_same_seed_is_byte_identical(data, tmp_path):
    for sub in ("a", "b"):
        assert main(["train", "--dataset", data, "--seed", "7", "--jobs", "1", "--out",
                     str(tmp_path / sub)] + FAST) == EXIT_OK
    assert body(tmp_path / "a" / "summary.csv") == body(tmp_path / "b" / "summary.csv")
    ra = json.loads((tmp_path / "a/runs/train/gcn-mhc-n4-L2/7.json").read_text())
    rb = json.loads((tmp_path / "b/runs/train/gcn-mhc-n4-L2/7.json").read_text())
    ra.pop("wall_seconds"), rb.pop("wall_seconds")
    assert ra == rb


def test_flags_override_config_file(data, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"dataset": data, "model": {"layers": 3, "streams": 3, "hidden": 8},
                               "train": {"max_epochs": 3, "patience": 3, "seeds": [1]},
                               "output_dir": str(tmp_path / "o")}))
    assert main(["train", "--config", str(cfg), "--layers", "1"]) == EXIT_OK
    assert body(tmp_path / "o" / "summary.csv")[1].startswith("gcn-mhc-n3-L1,")


def test_post_init_flag(data, tmp_path):
    assert main(["train", "--dataset", data, "--seed", "1", "--post-init", "0.3", "--out",
                 str(tmp_path)] + FAST) == EXIT_OK
    rec = json.loads((tmp_path / "runs/train/gcn-mhc-n4-L2/1.json").read_text())
    assert rec["model"]["post_init"] == 0.3


def test_malformed_json_reports_position(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "model": {"layers": 2,}\n}')
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert "line 2 column" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [{"modle": {}}, {"model": {"layer": 2}},
                                 {"train": {"epochs": 3}}, {"model": {"backbone": "mlp"}}])
def test_unknown_or_invalid_keys(tmp_path, doc):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg), "--graph", "citation-like:50"]) == EXIT_CONFIG


def test_dataset_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "missing")] + FAST) == EXIT_DATASET
    assert main(["dataset", "validate", str(tmp_path)]) == EXIT_DATASET
    assert "dataset error" in capsys.readouterr().err


def test_graph_without_features_is_a_config_error():
    assert main(["train", "--graph", "cycle:8"] + FAST) == EXIT_CONFIG


def test_all_diverged_exit_3(data, tmp_path):
    rc = main(["train", "--dataset", data, "--lr", "1e200", "--seed", "1", "--out",
               str(tmp_path), "--dropout", "0"] + FAST)
    assert rc == EXIT_DIVERGED


def test_dataset_info(data, capsys):
    assert main(["dataset", "info", data]) == EXIT_OK
    out = capsys.readouterr().out
    assert "nodes: 120" in out and "homophily:" in out
    assert main(["dataset", "validate", data]) == EXIT_OK


def test_depth_scan_and_ablation(data, tmp_path):
    assert main(["depth-scan", "--dataset", data, "--depths", "1,2", "--streams-list", "2",
                 "--seed", "1", "--out", str(tmp_path)] + FAST[:6]) == EXIT_OK
    rows = body(tmp_path / "depth_scan.csv")
    assert rows[0] == "depth,config,mean,std,p_value,n_runs,n_diverged"
    assert [r.split(",")[:2] for r in rows[1:]] == [["1", "baseline"], ["1", "mhc-n2"],
                                                   ["2", "baseline"], ["2", "mhc-n2"]]
    assert (tmp_path / "depth_scan.svg").read_text().startswith("<svg")
    rec = json.loads((tmp_path / "runs/depth1/baseline/1.json").read_text())
    assert rec["model"]["baseline_residual"] is False
    assert main(["ablate", "--dataset", data, "--seed", "1", "--epochs", "3", "--patience", "3",
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = body(tmp_path / "ablation.csv")
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "dynamic_only", "static_only",
                                                   "no_sinkhorn"]
    rec = json.loads((tmp_path / "runs/ablation/full/1.json").read_text())
    assert rec["model"]["layers"] == 4 and rec["model"]["hidden"] == 16


def test_theory_wl(capsys):
    assert main(["theory", "wl", "--g1", "shrikhande", "--g2", "rook4"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "1-WL distinguishes: false"


def test_theory_smoothing(tmp_path, capsys):
    assert main(["theory", "smoothing", "--graph", "cycle:8", "--mode", "identity",
                 "--out", str(tmp_path), "--name", "c8"]) == EXIT_OK
    assert "fitted rho=0.80" in capsys.readouterr().out
    rows = body(tmp_path / "c8.csv")
    dist = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(b < a for a, b in zip(dist, dist[1:]))
    assert (tmp_path / "c8_fit.csv").is_file() and (tmp_path / "c8.svg").is_file()


def test_theory_smoothing_disconnected(capsys):
    assert main(["theory", "smoothing", "--graph", "sbm:5,5:1.0:0.0"]) == EXIT_DATASET


def test_theory_bench(tmp_path, capsys):
    assert main(["theory", "bench", "--N", "200", "--n", "4", "--d", "128", "--T", "10",
                 "--repeats", "1", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "overhead" in out and "(672N)" in out
    assert (tmp_path / "bench_ops.csv").is_file()


def test_theory_expressiveness(tmp_path, capsys):
    assert main(["theory", "expressiveness", "--seeds", "0", "--epochs", "20", "--out",
                 str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "expressiveness.json").read_text())
    assert rep["wl_distinguishes"] is False


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "mhc_gnn.cli", "theory", "wl"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "false" in res.stdout
