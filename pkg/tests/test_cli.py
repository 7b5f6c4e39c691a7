import csv
import json

import pytest

from dgcnn import tensor as T
from dgcnn.cli import EVAL_HEADER, METRICS_HEADER, main

TINY = {
    "preset": "desk",
    "data": {"synthetic": {"classes": ["cube", "sphere"], "train_per_class": 4, "test_per_class": 3, "points": 24}},
    "model": {"k": 4, "edgeconv_widths": [8, 8], "embed_width": 16, "head_widths": [8], "num_classes": 2},
    "train": {"epochs": 2, "batch_size": 4, "checkpoint_every": 1},
}


@pytest.fixture(autouse=True)
def reset_numerics():
    yield
    T.set_default_dtype("float64")
    T.set_strict(False)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def trained(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.json", "metrics.csv", "metrics.jsonl", "model.ckpt", "checkpoints"} <= names
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
    rows = read_csv(trained / "metrics.csv")
    assert tuple(rows[0]) == tuple(METRICS_HEADER) and len(rows) == 3
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["model"]["k"] == 4 and cfg["train"]["epochs"] == 2
    # Defaults such as the self-loop convention are recorded, not left implicit.
    assert cfg["model"]["self_loop"] is True and cfg["train"]["momentum"] == 0.9


def test_strict_runs_are_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert main(["train", "--config", tiny_config, "--strict-deterministic", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_eval_reproduces_final_test_metric(tmp_path, tiny_config, trained):
    out = tmp_path / "ev"
    assert main(["eval", "--config", tiny_config, "--checkpoint", str(trained / "model.ckpt"), "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    assert tuple(rows[0]) == EVAL_HEADER and rows[1][0] == "full"
    final = read_csv(trained / "metrics.csv")[-1]
    acc = METRICS_HEADER.index("test_accuracy")
    assert float(rows[1][4]) == pytest.approx(float(final[acc]), abs=1e-12)

    keep_all = tmp_path / "keep"
    assert main(["eval", "--config", tiny_config, "--checkpoint", str(trained / "model.ckpt"),
                 "--keep-fraction", "1.0", "--out", str(keep_all)]) == 0
    assert read_csv(keep_all / "eval.csv")[1][4] == rows[1][4]


def test_eval_robustness_modes(tmp_path, tiny_config, trained):
    ckpt = str(trained / "model.ckpt")
    assert main(["eval", "--config", tiny_config, "--checkpoint", ckpt, "--side-drop", "top",
                 "--keep", "0.5", "--out", str(tmp_path / "side")]) == 0
    row = read_csv(tmp_path / "side" / "eval.csv")[1]
    assert row[:3] == ["side_drop", "0.5", "top"]
    assert main(["eval", "--config", tiny_config, "--checkpoint", ckpt, "--keep-fraction", "0.5",
                 "--out", str(tmp_path / "drop")]) == 0
    assert read_csv(tmp_path / "drop" / "eval.csv")[1][0] == "random_dropout"


def test_export_distances(tmp_path, tiny_config, trained):
    out = tmp_path / "dist"
    assert main(["export-distances", "--config", tiny_config, "--checkpoint", str(trained / "model.ckpt"),
                 "--layer", "edgeconv2", "--index", "3", "--out", str(out)]) == 0
    rows = read_csv(out / "distances_edgeconv2_0_3.csv")
    assert rows[0] == ["index", "x", "y", "z", "distance"] and len(rows) == 25
    assert float(rows[4][4]) == 0.0


def test_missing_paths_exit_2(tmp_path, tiny_config):
    assert main(["eval", "--config", tiny_config, "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "y")]) == 2


def test_bad_arguments_exit_2(tmp_path, tiny_config):
    assert main(["train", "--config", tiny_config]) == 2
    assert main(["train", "--config", tiny_config, "--set", "train.epochs=0", "--out", str(tmp_path / "z")]) == 2
    assert main(["train", "--config", tiny_config, "--set", "model.num_classes=3", "--out", str(tmp_path / "z")]) == 2
    assert main(["bench", "--out", str(tmp_path / "b"), "--reps", "0"]) == 2
    assert main(["frobnicate"]) == 2


def test_mismatched_checkpoint_exit_3(tmp_path, tiny_config, trained):
    code = main(["eval", "--config", tiny_config, "--set", "model.embed_width=32",
                 "--checkpoint", str(trained / "model.ckpt"), "--out", str(tmp_path / "m")])
    assert code == 3


def test_verify_filter_and_fault_injection(tmp_path, capsys):
    assert main(["verify", "--filter", "knn", "--out", str(tmp_path / "v")]) == 0
    table = (tmp_path / "v" / "verify.txt").read_text()
    assert "knn" in table and "gradient" not in table
    assert main(["verify", "--filter", "knn", "--inject-fault", "knn-ties"]) == 1
    assert "failed" in capsys.readouterr().out
    # The fault is scoped to the run that asked for it.
    assert main(["verify", "--filter", "knn"]) == 0


def test_bench_single_rep(tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "--out", str(out), "--sizes", "32", "--ks", "4", "--features", "3",
                 "--reps", "1", "--classifier-reps", "0"]) == 0
    rows = read_csv(out / "bench.csv")
    assert rows[0] == ["op", "n", "k", "features", "reps", "median_ms", "p95_ms"]
    for r in rows[1:]:
        assert r[5] == r[6] and r[4] == "1"
    assert {p.name for p in out.iterdir()} == {"bench.csv", "bench_config.json"}


def test_outputs_stay_under_out(tmp_path, tiny_config, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["train", "--config", tiny_config, "--out", str(tmp_path / "run")]) == 0
    assert list(work.iterdir()) == []
