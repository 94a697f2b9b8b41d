"""CLI exit codes and a small end-to-end smoke run."""

import json

import numpy as np
import pytest

from tano import data as D
from tano.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    ds = D.generate_synthetic_domains(images_per_class=8, seed=0)
    D.write_dataset(ds, root)
    return root


def test_missing_seed_is_validation_error(capsys, data_dir, tmp_path):
    # non-interactive stdin -> --seed is mandatory
    code = main(["gen-data", "--out", str(tmp_path / "ds")])
    assert code == 2
    assert "--seed" in capsys.readouterr().err


def test_gen_data_writes_dataset(tmp_path):
    out = tmp_path / "ds"
    code = main(["gen-data", "--out", str(out), "--seed", "1",
                 "--per-class", "6"])
    assert code == 0
    ds = D.read_dataset(out)
    assert ds.manifest.images_per_class == 6
    assert sorted(ds.domain_ids) == [1, 2, 3, 4]


def test_gen_data_rejects_too_many_domains(tmp_path):
    code = main(["gen-data", "--out", str(tmp_path / "ds"), "--seed", "1",
                 "--domains", "9"])
    assert code == 2


def test_corrupt_dataset_gives_exit_4(tmp_path, data_dir):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(data_dir, broken)
    blob = next(iter((broken / "blobs").glob("*.tano")))
    blob.write_bytes(blob.read_bytes()[:-7])
    code = main(["pretrain", "--data", str(broken), "--out",
                 str(tmp_path / "ck"), "--seed", "0", "--epochs", "1"])
    assert code == 4


def test_missing_dataset_gives_exit_4(tmp_path):
    code = main(["pretrain", "--data", str(tmp_path / "nowhere"), "--out",
                 str(tmp_path / "ck"), "--seed", "0", "--epochs", "1"])
    assert code == 4


def test_eval_multi_mode_is_rejected(tmp_path, data_dir):
    code = main(["pretrain", "--data", str(data_dir), "--out",
                 str(tmp_path / "ck"), "--seed", "0", "--epochs", "1"])
    assert code == 0
    code = main(["eval", "--ckpt", str(tmp_path / "ck"), "--data",
                 str(data_dir), "--mode", "multi", "--episodes", "4",
                 "--seed", "0"])
    assert code == 2


def test_pipeline_smoke(tmp_path, data_dir, capsys):
    """pretrain -> meta-train -> eval -> analyze on a tiny budget."""
    pre = tmp_path / "pre"
    meta = tmp_path / "meta"
    assert main(["pretrain", "--data", str(data_dir), "--out", str(pre),
                 "--seed", "0", "--epochs", "1"]) == 0
    # 8 images/class supports at most 1 shot + 7 queries per episode
    assert main(["meta-train", "--data", str(data_dir), "--init", str(pre),
                 "--out", str(meta), "--epochs", "1", "--episodes", "4",
                 "--queries", "5", "--specialize-episodes", "2",
                 "--seed", "0"]) == 0
    out_json = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(meta / "best"), "--data", str(data_dir),
                 "--mode", "tano-hard", "--episodes", "6", "--seed", "0",
                 "--json", str(out_json)]) == 0
    report = json.loads(out_json.read_text())
    assert report["mode"] == "tano-hard"
    assert report["episode_count"] == 6
    assert 0.0 <= report["mean_accuracy"] <= 100.0
    analysis = tmp_path / "analysis.json"
    assert main(["analyze", "--ckpt", str(meta / "best"), "--data",
                 str(data_dir), "--json", str(analysis), "--seed", "0"]) == 0
    geo = json.loads(analysis.read_text())
    assert "sphere_residuals_relative" in geo
    capsys.readouterr()
