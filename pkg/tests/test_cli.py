import json

import pytest

from conftest import small_config
from tabmia.cli import main
from tabmia.config import ConfigError, RunConfig, bundled_config, bundled_config_path


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _write_config(tmp_path, **kw):
    cfg = small_config(tmp_path / "exp", **kw)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return cfg, path


# -- config -----------------------------------------------------------------


def test_config_roundtrip():
    cfg = bundled_config("tiny")
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()
    assert again.hash() == cfg.hash()


def test_bundled_tiny_config_shape():
    cfg = RunConfig.load(bundled_config_path())
    spec = cfg.challenge
    assert (spec.train_phase, spec.dev_phase, spec.final_phase, spec.members_per_model) == (6, 2, 2, 64)
    assert cfg.attack.n_eps == 32 and cfg.attack.timesteps == [5, 10, 20, 50]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"attack": {"n_eps": 3, "bogus": 1}})


def test_timestep_outside_schedule_rejected():
    with pytest.raises(ConfigError, match="timesteps"):
        RunConfig.from_dict({"diffusion": {"T": 50}, "attack": {"timesteps": [5, 60]}})


# -- exit codes -------------------------------------------------------------


def test_usage_error_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_missing_config_exits_four(tmp_path, capsys):
    code, _, err = _run(["gen-data", "--config", tmp_path / "absent.json"], capsys)
    assert code == 4
    assert json.loads(err)["exit_code"] == 4


def test_bad_config_exits_three(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    code, _, err = _run(["gen-data", "--config", p], capsys)
    assert code == 3
    assert json.loads(err)["error"] == "ConfigError"


def test_insufficient_models_exits_six(tmp_path, capsys):
    _, path = _write_config(tmp_path, train=1)
    code, _, err = _run(["run-challenge", "--config", path], capsys)
    assert code == 6
    assert "insufficient models" in json.loads(err)["message"]


def test_malformed_scores_exit_five(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "gt" / "m.csv").write_text("record_id,is_member\na,1\nb,1\n")
    (tmp_path / "s.csv").write_text("model_id,record_id,score\nm,a,0.5\nm,b,0.4\n")
    code, _, err = _run(["evaluate", "--scores", tmp_path / "s.csv", "--ground-truth", tmp_path / "gt",
                         "--out", tmp_path / "o"], capsys)
    assert code == 5
    assert json.loads(err)["error"] == "SingleClassError"


# -- evaluate ---------------------------------------------------------------


def test_evaluate_perfect_separation(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "gt" / "m.csv").write_text("record_id,is_member\na,1\nb,1\nc,0\nd,0\n")
    (tmp_path / "s.csv").write_text("model_id,record_id,score\nm,a,0.9\nm,b,0.8\nm,c,0.2\nm,d,0.1\n")
    code, out, _ = _run(["evaluate", "--scores", tmp_path / "s.csv", "--ground-truth", tmp_path / "gt",
                         "--out", tmp_path / "o"], capsys)
    assert code == 0
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics[0]["id"] == "pooled" and metrics[0]["auc"] == 1.0
    assert metrics[0]["tpr_at_fpr"] == {"0.10": 1.0}
    assert json.loads(out)["auc"] == 1.0


# -- staged pipeline --------------------------------------------------------


def test_staged_pipeline_and_idempotence(tmp_path, capsys):
    cfg, path = _write_config(tmp_path)
    exp = tmp_path / "exp"
    assert _run(["gen-data", "--config", path], capsys)[0] == 0
    pop = (exp / "population.csv").read_bytes()
    assert _run(["gen-data", "--config", path], capsys)[0] == 0
    assert (exp / "population.csv").read_bytes() == pop

    for mid in ("train_000", "train_001", "dev_000"):
        assert _run(["train-target", "--config", path, "--model-id", mid], capsys)[0] == 0
    ckpt = (exp / "models/dev_000/checkpoint.bin").read_bytes()
    assert _run(["train-target", "--config", path, "--model-id", "dev_000"], capsys)[0] == 0
    assert (exp / "models/dev_000/checkpoint.bin").read_bytes() == ckpt

    code, out, _ = _run(["synth", "--checkpoint", exp / "models/dev_000/checkpoint.bin", "--data-dir", exp,
                         "--n", 5, "--seed", 3, "--out", tmp_path / "s.csv"], capsys)
    assert code == 0 and len((tmp_path / "s.csv").read_text().splitlines()) == 6

    feats = {}
    for mid in ("train_000", "train_001"):
        feats[mid] = tmp_path / f"{mid}.tfmx"
        code, out, _ = _run(["extract-features", "--config", path, "--checkpoint",
                             exp / f"models/{mid}/checkpoint.bin", "--records", exp / f"models/{mid}/challenge.csv",
                             "--labels", exp / f"ground_truth/{mid}.csv", "--features-out", feats[mid]], capsys)
        assert code == 0
        assert json.loads(out)["width"] == cfg.attack.n_eps * len(cfg.attack.timesteps)
    code, _, _ = _run(["extract-features", "--config", path, "--checkpoint", exp / "models/dev_000/checkpoint.bin",
                       "--records", exp / "models/dev_000/challenge.csv", "--features-out", tmp_path / "dev.tfmx"],
                      capsys)
    assert code == 0

    clf = tmp_path / "clf.bin"
    assert _run(["train-attack", "--config", path, "--train", feats["train_000"], "--val", feats["train_001"],
                 "--classifier-out", clf], capsys)[0] == 0
    scores = tmp_path / "scores.csv"
    assert _run(["infer", "--classifier", clf, "--features", tmp_path / "dev.tfmx", "--scores-out", scores],
                capsys)[0] == 0
    first = scores.read_bytes()
    assert _run(["infer", "--classifier", clf, "--features", tmp_path / "dev.tfmx", "--scores-out", scores],
                capsys)[0] == 0
    assert scores.read_bytes() == first

    code, out, _ = _run(["evaluate", "--scores", scores, "--ground-truth", exp / "ground_truth",
                         "--out", tmp_path / "report"], capsys)
    assert code == 0
    assert 0.0 <= json.loads(out)["auc"] <= 1.0

    stages = json.loads((exp / "logs/stages.json").read_text())
    assert stages["target/dev_000"]["config_hash"] == cfg.hash()


def test_seed_flag_overrides_config(tmp_path, capsys):
    _, path = _write_config(tmp_path)
    assert _run(["gen-data", "--config", path, "--seed", 99, "--out", tmp_path / "other"], capsys)[0] == 0
    spec = json.loads((tmp_path / "other" / "spec.json").read_text())
    assert spec["master_seed"] == 99 and spec["out"] == str(tmp_path / "other")


def test_run_challenge_writes_metrics(tmp_path, capsys):
    _, path = _write_config(tmp_path)
    code, out, _ = _run(["run-challenge", "--config", path, "--workers", 2], capsys)
    assert code == 0
    assert json.loads(out)["tracks"] == ["white_box", "black_box"]
    assert (tmp_path / "exp" / "metrics.json").exists()
