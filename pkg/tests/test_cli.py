import csv
from pathlib import Path

import numpy as np
import pytest
import yaml

from dris_catch import cli
from dris_catch.config import RunConfig, config_from_dict, load_config
from dris_catch.physics import ConfigurationError

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "dris": {"size": 2, "dataset_envs": 2, "dataset_episodes": 1, "dataset_instances": 8},
    "network": {"pretrain_epochs": 2, "pretrain_samples": 16, "pretrain_batch": 8},
    "ppo": {"n_envs": 4, "epochs": 4, "minibatch": 32, "checkpoint_every": 2},
    "evaluation": {"episodes": 8, "noise_levels": [0.0, 2.0]},
    "theory": {"particle_sequences": 2, "particle_sizes": [1, 3], "synthetic_repetitions": 2000,
               "unmasking_draws": 400, "rademacher_samples": 8, "ipm_samples": 8, "variance_repetitions": 8,
               "variance_sizes": [1, 2, 4]},
}


@pytest.fixture()
def tiny(tmp_path):
    cfg = dict(TINY, output_dir=str(tmp_path / "run"), seed=7)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, tmp_path / "run"


# -- config -------------------------------------------------------------------------------

def test_example_config_matches_defaults():
    cfg = load_config(ROOT / "configs" / "example.yaml")
    resolved = cfg.resolved()
    resolved["output_dir"] = RunConfig().output_dir
    assert resolved == RunConfig().resolved()


@pytest.mark.parametrize("doc, key", [
    ({"ppo": {"lrr": 1.0}}, "ppo.lrr"),
    ({"bogus": 1}, "bogus"),
    ({"episode": {"horizon": "long"}}, "episode.horizon"),
    ({"episode": {"workspace": [0.1, 0.2]}}, "episode.workspace"),
])
def test_invalid_config_names_the_key(doc, key):
    with pytest.raises(ConfigurationError, match=key.replace(".", r"\.")):
        config_from_dict(doc)


def test_config_values_are_coerced():
    cfg = config_from_dict({"ppo": {"lr": 1}, "episode": {"launch_height": [-3, -2]}})
    assert cfg.ppo.lr == 1.0 and isinstance(cfg.ppo.lr, float)
    assert cfg.episode.launch_height == (-3.0, -2.0)


def test_train_config_carries_seed_and_size():
    cfg = config_from_dict({"seed": 11, "dris": {"size": 5}})
    tc = cfg.train_config()
    assert tc.seed == 11 and tc.dris_size == 5


# -- commands ----------------------------------------------------------------------------------

def test_pretrain_writes_outputs_and_is_reproducible(tiny, tmp_path):
    path, run = tiny
    assert cli.main(["pretrain", "--config", str(path)]) == 0
    ckpt = run / "pretrain" / "encoder.ckpt"
    first = ckpt.read_bytes()
    rows = list(csv.DictReader(open(run / "pretrain" / "pretrain_loss.csv")))
    assert len(rows) == 2
    record = yaml.safe_load((run / "pretrain" / "run.yaml").read_text())
    assert record["seed"] == 7 and "version" in record and record["config"]["dris"]["size"] == 2
    assert cli.main(["pretrain", "--config", str(path), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "encoder.ckpt").read_bytes() == first


def test_train_eval_theory_pipeline(tiny, tmp_path):
    path, run = tiny
    assert cli.main(["pretrain", "--config", str(path)]) == 0
    assert cli.main(["train", "--config", str(path)]) == 0
    train_dir = run / "train-dris2"
    assert (train_dir / "policy.ckpt").exists()
    assert sorted(p.name for p in (train_dir / "checkpoints").glob("*.ckpt")) == ["epoch_0002.ckpt",
                                                                                  "epoch_0004.ckpt"]
    hist = list(csv.DictReader(open(train_dir / "training.csv")))
    assert len(hist) == 4

    out = tmp_path / "m.csv"
    assert cli.main(["eval", "--config", str(path), "--policy", str(train_dir / "policy.ckpt"),
                     "--scenario", "all", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [(r["scenario"], float(r["level"])) for r in rows] == [("noise", 0.0), ("noise", 2.0), ("exec", 0.0),
                                                                  ("ood", 0.0)]
    again = tmp_path / "m2.csv"
    cli.main(["eval", "--config", str(path), "--policy", str(train_dir / "policy.ckpt"), "--scenario", "all",
              "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()

    code = cli.main(["theory", "--config", str(path), "--check", "ipm", "--policy-dir",
                     str(train_dir / "checkpoints")])
    assert code in (0, 3)
    assert (run / "theory" / "ipm.csv").exists()


def test_train_resume_matches_uninterrupted_run(tiny, tmp_path):
    path, run = tiny
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(path), "--baseline", "e2e", "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(path), "--baseline", "e2e", "--out", str(b), "--epochs", "2"]) == 0
    assert cli.main(["train", "--config", str(path), "--baseline", "e2e", "--out", str(b), "--resume"]) == 0
    assert (a / "training.csv").read_bytes() == (b / "training.csv").read_bytes()
    assert (a / "policy.ckpt").read_bytes() == (b / "policy.ckpt").read_bytes()


def test_train_without_encoder_is_a_config_error(tiny, capsys):
    path, _ = tiny
    assert cli.main(["train", "--config", str(path)]) == 1
    assert "encoder" in capsys.readouterr().err


def test_zero_dris_size_rejected(tiny):
    path, _ = tiny
    assert cli.main(["train", "--config", str(path), "--dris-size", "0"]) == 1


def test_eval_rejects_zero_episodes(tiny):
    path, _ = tiny
    assert cli.main(["eval", "--config", str(path), "--policy", "veltrack", "--episodes", "0"]) == 1


def test_eval_veltrack_baseline(tiny, tmp_path):
    path, _ = tiny
    out = tmp_path / "v.csv"
    assert cli.main(["eval", "--config", str(path), "--policy", "veltrack", "--scenario", "ood",
                     "--out", str(out)]) == 0
    row = next(csv.DictReader(open(out)))
    assert row["policy"] == "veltrack" and row["scenario"] == "ood"


def test_unknown_yaml_key_exits_with_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("ppo:\n  learning_rate: 0.1\n")
    assert cli.main(["eval", "--config", str(bad), "--policy", "veltrack"]) == 1
    assert "ppo.learning_rate" in capsys.readouterr().err


def test_theory_particle_check(tiny, capsys):
    path, run = tiny
    assert cli.main(["theory", "--config", str(path), "--check", "particle"]) == 0
    out = capsys.readouterr().out
    assert "pass" in out and "deviation 0" in out
    rows = list(csv.DictReader(open(run / "theory" / "particle.csv")))
    assert [float(r["max_deviation"]) for r in rows] == [0.0, 0.0]


def test_theory_synthetic_variance_reports_fit(tiny, capsys):
    path, _ = tiny
    cli.main(["theory", "--config", str(path), "--check", "synthetic-variance"])
    assert "sigma2=" in capsys.readouterr().out


def test_unknown_check_lists_available(capsys):
    assert cli.main(["theory", "--check", "nope"]) == 1
    err = capsys.readouterr().err
    for name in cli.CHECKS:
        assert name in err


def test_unmasking_check_passes(tiny):
    path, _ = tiny
    assert cli.main(["theory", "--config", str(path), "--check", "unmasking"]) == 0


# -- plot data -------------------------------------------------------------------------------------

def _metrics(path, policy):
    path.write_text("policy,scenario,level,episodes,mean_reward,reward_lo,reward_hi,success,success_lo,success_hi\n"
                    f"{policy},noise,0.0,8,1.5,1.0,2.0,0.5,0.25,0.75\n"
                    f"{policy},ood,0.0,8,1.0,0.5,1.5,0.25,0.0,0.5\n")
    return path


def test_plot_data_merges_and_is_idempotent(tmp_path):
    a = _metrics(tmp_path / "a.csv", "p1")
    b = _metrics(tmp_path / "b.csv", "p2")
    tidy = tmp_path / "tidy.csv"
    assert cli.main(["plot-data", str(a), str(b), "--out", str(tidy)]) == 0
    rows = list(csv.DictReader(open(tidy)))
    assert len(rows) == 2 * 2 * 7
    assert list(rows[0]) == cli.TIDY_COLUMNS
    again = tmp_path / "tidy2.csv"
    assert cli.main(["plot-data", str(tidy), "--out", str(again)]) == 0
    assert again.read_bytes() == tidy.read_bytes()


def test_plot_data_accepts_training_history(tmp_path):
    h = tmp_path / "training.csv"
    h.write_text("epoch,mean_return,success\n0,1.0,0.0\n1,2.0,0.5\n")
    out = tmp_path / "t.csv"
    assert cli.main(["plot-data", str(h), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["metric"] for r in rows} == {"mean_return", "success"} and len(rows) == 4


def test_plot_data_missing_input(tmp_path):
    assert cli.main(["plot-data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.csv")]) == 1
