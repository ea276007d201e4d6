import json

import pytest

from moe_memrouter import cli

SMALL = {
    "model": {"vocab_size": 24, "model_dim": 8, "num_layers": 2, "num_experts": 4, "active_experts": 2,
              "num_heads": 2, "context_length": 16, "expert_hidden_dim": 16},
    "data": {
        "train": {"domain_id": "A", "sequence_length": 16, "num_sequences": 30, "active_tokens": 8, "regimes": 2},
        "ref": {"domain_id": "B", "sequence_length": 16, "num_sequences": 4, "active_tokens": 8, "regimes": 2,
                "base_domain": "A", "shift_fraction": 0.0, "marker_offset": 1},
        "test": {"domain_id": "B", "sequence_length": 16, "num_sequences": 6, "active_tokens": 8, "regimes": 2,
                 "base_domain": "A", "shift_fraction": 0.0, "marker_offset": 1},
        "ref_tokens": 40,
    },
    "train": {"steps": 5, "batch_size": 4, "seq_len": 16},
    "sweep": {"K": [1], "ref_tokens": [0, 40]},
}


@pytest.fixture
def config(tmp_path):
    cfg = json.loads(json.dumps(SMALL))
    cfg["output"] = {"dir": str(tmp_path / "run")}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def pipeline(config, *extra):
    for cmd in ("gen-data", "train", "build-memory", "eval"):
        assert cli.main([cmd, "--config", str(config), *extra]) == 0, cmd


def test_check_passes(capsys):
    assert cli.main(["check"]) == 0
    out = capsys.readouterr().out
    assert "PASS strict routing gradient" in out and "FAIL" not in out


def test_eval_without_checkpoint(config, capsys):
    assert cli.main(["eval", "--config", str(config)]) != 0
    assert "missing checkpoint" in capsys.readouterr().err


def test_unknown_keys_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"retrieval": {"K": 1, "neighbours": 3}}))
    assert cli.main(["gen-data", "--config", str(path)]) != 0
    assert "neighbours" in capsys.readouterr().err
    assert cli.main(["gen-data", "--set", "nope.K=1"]) != 0
    assert cli.main(["gen-data", "--set", "retrieval.K=zero"]) != 0


def test_overrides_and_seed():
    cfg = cli.load_config(overrides=["retrieval.K=3", "build.mode=fast", "output.dir=x"], seed=7)
    assert cfg["retrieval"]["K"] == 3 and cfg["build"]["mode"] == "fast" and cfg["output"]["dir"] == "x"
    assert set(cfg["seeds"].values()) == {7}
    assert cli.domain_spec(cfg, "ref").seed != cli.domain_spec(cfg, "test").seed
    with pytest.raises(cli.ConfigError):
        cli.load_config(overrides=["retrieval.K"])


def test_pipeline_outputs_and_manifest(config, tmp_path, capsys):
    pipeline(config)
    run = tmp_path / "run"
    for name in ("data/train.txt", "data/ref.txt", "model.ckpt", "memory.mem", "report_zero_shot.json",
                 "report_knn_moe.json", "report_knn_moe_selective.json", "buckets.json"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest-eval.json").read_text())
    assert set(manifest["inputs"]) == {"model.ckpt", "data/test.txt", "memory.mem"}
    assert manifest["config"]["retrieval"]["K"] == 1
    assert "numpy" in manifest["versions"]
    assert "timestamp" not in json.dumps(manifest)
    timing = json.loads((run / "timing-build-memory.json").read_text())
    assert timing["build_seconds"] > 0
    assert "knn_moe: ppl=" in capsys.readouterr().out


def test_same_seed_gives_identical_outputs(config, tmp_path):
    def hashes():
        pipeline(config, "--seed", "7")
        run = tmp_path / "run"
        return {cmd: json.loads((run / f"manifest-{cmd}.json").read_text())["outputs"]
                for cmd in ("gen-data", "train", "build-memory", "eval")}

    first = hashes()
    assert first == hashes()
    pipeline(config, "--seed", "8")
    assert json.loads((tmp_path / "run" / "manifest-train.json").read_text())["outputs"] != first["train"]


def test_sweep_command(config, tmp_path):
    for cmd in ("gen-data", "train"):
        assert cli.main([cmd, "--config", str(config)]) == 0
    assert cli.main(["sweep", "--config", str(config)]) == 0
    lines = (tmp_path / "run" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3


def test_memory_from_other_checkpoint_rejected(config, capsys):
    pipeline(config)
    assert cli.main(["train", "--config", str(config), "--set", "seeds.init=5"]) == 0
    assert cli.main(["eval", "--config", str(config), "--set", "seeds.init=5"]) != 0
    assert "fingerprint" in capsys.readouterr().err
