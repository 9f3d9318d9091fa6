import io
import json

import pytest

from spa.cli import run_command

CONFIG = {
    "dataset": {"synthetic": {"entity_count": 24, "relation_count": 2, "timestep_count": 8, "seed": 1}},
    "search": {"num_layers": 1, "tau": 2, "dim": 8, "batch_size": 4, "negative_ratio": 6, "supernet_epochs": 2,
               "search_iterations": 4, "finetune_epochs": 2, "finetune_trials": 1, "eval_every": 1,
               "spatial_heads": 2, "temporal_heads": 2},
    "rank_correlation": {"n": 3, "standalone_epochs": 1},
}


def spa(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run_command([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_synth_twice_is_byte_identical(config, tmp_path):
    assert spa("synth", "--config", config, "--out", tmp_path / "a")[0] == 0
    assert spa("synth", "--config", config, "--out", tmp_path / "b")[0] == 0
    for name in ("train.txt", "valid.txt", "test.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stats_from_files(config, tmp_path):
    spa("synth", "--config", config, "--out", tmp_path / "d")
    d = tmp_path / "d"
    code, out, _ = spa("stats", "--train", d / "train.txt", "--valid", d / "valid.txt", "--test", d / "test.txt",
                       "--out", tmp_path / "s")
    assert code == 0
    stats = json.loads(out)
    assert stats["timestepCount"] == 8 and stats["relationCount"] == 2


def test_missing_config_is_usage_error():
    code, _, err = spa("search")
    assert code == 1 and "--config" in err


def test_unreadable_config_is_usage_error(tmp_path):
    assert spa("search", "--config", tmp_path / "nope.json")[0] == 1


def test_unknown_command_is_usage_error():
    assert spa("frobnicate")[0] == 1


def test_unknown_config_key_is_usage_error(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(CONFIG | {"serach": {}}))
    code, _, err = spa("train-supernet", "--config", path, "--out", tmp_path)
    assert code == 1 and "serach" in err


def test_missing_supernet_is_runtime_error(config, tmp_path):
    code, _, err = spa("search", "--config", config, "--supernet", tmp_path / "missing.ckpt", "--out", tmp_path)
    assert code == 2
    assert err.startswith("ERROR:supernet:load")


def test_unparsable_dataset_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("only\ttwo\n")
    code, _, err = spa("stats", "--train", bad, "--valid", bad, "--test", bad, "--out", tmp_path)
    assert code == 2 and err.startswith("ERROR:data:parse")


def test_full_command_chain(config, tmp_path):
    out = tmp_path / "run"
    code, stdout, _ = spa("train-supernet", "--config", config, "--out", out)
    assert code == 0
    assert [json.loads(line)["event"] for line in stdout.splitlines()] == ["epoch", "epoch"]
    ckpt = out / "supernet.ckpt"
    assert spa("search", "--config", config, "--out", out, "--supernet", ckpt)[0] == 0
    records = (out / "search_records.jsonl").read_text().splitlines()
    assert 1 <= len(records) <= 4
    arch = out / "architecture.json"
    assert spa("finetune", "--config", config, "--out", out, "--arch", arch)[0] == 0
    assert spa("evaluate", "--config", config, "--out", out, "--arch", arch, "--supernet", out / "model.ckpt")[0] == 0
    assert "mrr" in json.loads((out / "evaluation.json").read_text())
    assert spa("rank-corr", "--config", config, "--out", out, "--supernet", ckpt)[0] == 0


def test_missing_architecture_is_usage_error(config, tmp_path):
    assert spa("finetune", "--config", config, "--out", tmp_path)[0] == 1


def test_resolved_config_reproduces_checkpoint(config, tmp_path):
    assert spa("train-supernet", "--config", config, "--out", tmp_path / "a", "--seed", "5")[0] == 0
    resolved = tmp_path / "a" / "resolved_config.json"
    assert json.loads(resolved.read_text())["search"]["seed"] == 5
    assert spa("train-supernet", "--config", resolved, "--out", tmp_path / "b")[0] == 0
    assert (tmp_path / "a" / "supernet.ckpt").read_bytes() == (tmp_path / "b" / "supernet.ckpt").read_bytes()


def test_inputs_are_not_modified(config, tmp_path):
    before = config.read_bytes()
    spa("train-supernet", "--config", config, "--out", tmp_path / "a")
    assert config.read_bytes() == before
