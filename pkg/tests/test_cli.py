import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from clientindex.cli import load_config, main, ConfigError

SMALL = {
    "seed": 3,
    "data": {"n_classes": 3, "n_domains": 2, "clients_per_domain": 3,
             "samples_per_client": [20, 30], "d_emb": 8},
    "index": {"epochs": 3, "batch_size": 32},
    "fl": {"rounds": 2, "fraction": 0.5, "local_epochs": 1},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(tmp_path, *args, cfg=SMALL, out="run"):
    return main(list(args) + ["--config", write_config(tmp_path, cfg), "--out", str(tmp_path / out)])


def test_gen_data_is_reproducible_and_creates_dirs(tmp_path):
    assert run(tmp_path, "gen-data", out="a/b") == 0
    assert run(tmp_path, "gen-data", out="c") == 0
    assert sha(tmp_path / "a/b/shards.fidx") == sha(tmp_path / "c/shards.fidx")
    spec = json.loads((tmp_path / "c/synthesis_spec.json").read_text())
    assert spec["seed"] == 3 and spec["d_emb"] == 8
    manifest = json.loads((tmp_path / "c/manifest_gen_data.json").read_text())
    assert all(Path(p).exists() for p in manifest["artifacts"].values())


def test_gen_data_rejects_cramped_spec(tmp_path, capsys):
    cfg = {**SMALL, "data": {**SMALL["data"], "d_emb": 4}}
    assert run(tmp_path, "gen-data", cfg=cfg) == 2
    assert "d_emb" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [
    {**SMALL, "dataa": {}},
    {**SMALL, "index": {"epochz": 1}},
    {**SMALL, "fl": {"tau": 0.5}},
    {**SMALL, "enhancements": {"temperature": 1.0}},
    {**SMALL, "paths": {"shard": "x"}},
    {k: v for k, v in SMALL.items() if k != "seed"},
])
def test_config_errors_exit_2(tmp_path, cfg):
    assert run(tmp_path, "gen-data", cfg=cfg) == 2


def test_seed_override(tmp_path):
    cfg = load_config(write_config(tmp_path, SMALL), seed=11)
    assert cfg.seed == cfg.data.seed == cfg.index.seed == cfg.fl.seed == 11
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))


def test_train_index_outputs(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert run(tmp_path, "train-index") == 0
    first = sha(tmp_path / "run/index_params.dsai")
    assert run(tmp_path, "train-index") == 0
    assert sha(tmp_path / "run/index_params.dsai") == first
    rows = list(csv.reader(open(tmp_path / "run/client_index.csv")))
    assert rows[0][:3] == ["client_id", "domain_id", "part"]
    assert len(rows) == 1 + 2 * 6

    fed = {**SMALL, "index": {"strategy": "federated", "rounds": 2, "local_epochs": 1}}
    assert run(tmp_path, "train-index", cfg=fed) == 0
    assert sha(tmp_path / "run/index_params.dsai") != first


def test_train_index_zero_epochs_uses_initial_params(tmp_path):
    from clientindex.embeddings import load_shards
    from clientindex.index_gen import IndexGenConfig, compute_client_indices, init_params, read_index_csv

    cfg = {**SMALL, "index": {"epochs": 0}}
    assert run(tmp_path, "gen-data", cfg=cfg) == 0
    assert run(tmp_path, "train-index", cfg=cfg) == 0
    shards = load_shards(tmp_path / "run/shards.fidx")
    expected = compute_client_indices(init_params(8, IndexGenConfig(epochs=0, seed=3)), shards)
    got = read_index_csv(tmp_path / "run/client_index.csv")
    for a, b in zip(expected, got):
        np.testing.assert_array_equal(a.beta_f, b.beta_f)


def test_train_index_without_shards_exit_2(tmp_path):
    assert run(tmp_path, "train-index") == 2


def test_numeric_failure_exit_3(tmp_path, capsys):
    cfg = {**SMALL, "index": {"epochs": 50, "learning_rate": 1e8, "momentum": 0.99}}
    assert run(tmp_path, "gen-data", cfg=cfg) == 0
    assert run(tmp_path, "train-index", cfg=cfg) == 3
    assert "non-finite" in capsys.readouterr().err


def test_run_fl_smoke_with_baseline(tmp_path):
    cfg = {**SMALL, "fl": {**SMALL["fl"], "rounds": 1},
           "enhancements": {"sampling": True, "aggregation": True, "local_reg": True}}
    assert run(tmp_path, "gen-data", cfg=cfg) == 0
    assert run(tmp_path, "train-index", cfg=cfg) == 0
    start = time.perf_counter()
    assert run(tmp_path, "run-fl", cfg=cfg) == 0
    assert time.perf_counter() - start < 10
    assert run(tmp_path, "run-fl", "--baseline", cfg=cfg) == 0
    enhanced = json.loads((tmp_path / "run/summary.json").read_text())
    baseline = json.loads((tmp_path / "run/summary_baseline.json").read_text())
    assert enhanced["config"]["sampling"] and not baseline["config"]["sampling"]
    for s in (enhanced, baseline):
        assert {"best_accuracy", "final_accuracy", "best_round"} <= set(s)
        assert s["config"]["lambda1"] == 1.0  # defaults are echoed


def test_run_fl_is_deterministic(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert run(tmp_path, "run-fl") == 0
    serial = sha(tmp_path / "run/rounds.csv")
    hashes = []
    for _ in range(2):
        assert run(tmp_path, "run-fl", "--workers", "2") == 0
        hashes.append((sha(tmp_path / "run/rounds.csv"), sha(tmp_path / "run/summary.json")))
    assert hashes[0] == hashes[1]
    assert hashes[0][0] == serial
    summary = json.loads((tmp_path / "run/summary.json").read_text())
    assert summary["config"]["workers"] == 2


def test_run_fl_needs_index_when_enhanced(tmp_path, capsys):
    cfg = {**SMALL, "enhancements": {"aggregation": True}}
    assert run(tmp_path, "gen-data", cfg=cfg) == 0
    assert run(tmp_path, "run-fl", cfg=cfg) == 2
    assert "index" in capsys.readouterr().err


def test_export_heatmap(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert run(tmp_path, "train-index") == 0
    assert run(tmp_path, "export-heatmap", "--part", "full") == 0
    rows = list(csv.reader(open(tmp_path / "run/heatmap_full.csv")))
    assert rows[0] == ["client_id"] + [str(k) for k in range(6)]
    S = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    np.testing.assert_array_equal(S, S.T)
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-9)


def test_export_heatmap_single_client_and_errors(tmp_path):
    idx = tmp_path / "one.csv"
    idx.write_text("client_id,domain_id,part,dim_0,dim_1\n4,0,f,1.0,2.0\n4,0,l,0.5,0.0\n")
    assert main(["export-heatmap", "--index-csv", str(idx), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "heatmap_feature.csv")))
    assert rows == [["client_id", "4"], ["4", "1.0"]]
    idx.write_text("client_id,domain_id,part,dim_0\n4,0,x,1.0\n")
    assert main(["export-heatmap", "--index-csv", str(idx), "--out", str(tmp_path)]) == 2
    assert main(["export-heatmap", "--index-csv", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path)]) == 2
