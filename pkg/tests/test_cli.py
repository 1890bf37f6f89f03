import json

import pytest

from memshare import evaluation
from memshare.cli import load_config, main, parse_overrides, resolve_checkpoint
from memshare.csvio import read_csv
from memshare.errors import ConfigurationError
from tests.helpers import TINY_TRAIN


def write_config(path, **overrides):
    data = dict(TINY_TRAIN, task="CN", algorithm="MD-MADDPG", horizon=10, episodes=2)
    data.update(overrides)
    data = {k: v for k, v in data.items() if v is not None}
    path.write_text(json.dumps(data, indent=2))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "config.json")
    assert main(["train", str(config), "--output", str(root / "run")]) == 0
    return root / "run"


def test_parse_overrides():
    overrides = parse_overrides(["--memory-size", "64", "--task=SyncCN", "--noise_decay", "false",
                                 "--critic-hidden", "[8, 4]", "--variant", "no-read"])
    assert overrides == {"memory_size": 64, "task": "SyncCN", "noise_decay": False, "critic_hidden": [8, 4],
                         "variant": "no-read"}
    with pytest.raises(ConfigurationError):
        parse_overrides(["episodes", "3"])
    with pytest.raises(ConfigurationError):
        parse_overrides(["--episodes"])


def test_load_config_reads_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("task: SyncCN\nalgorithm: MADDPG\nn_agents: 3\nepisodes: 5\n")
    env, train, resolved = load_config(path, {"seed": 4})
    assert env.task == "SyncCN" and env.n_agents == 3
    assert train.algorithm == "MADDPG" and train.seed == 4
    assert resolved["horizon"] == 100 and resolved["episodes"] == 5


def test_missing_required_key_exits_2(tmp_path, capsys):
    config = write_config(tmp_path / "config.json", algorithm=None)
    assert main(["train", str(config)]) == 2
    assert "'algorithm'" in capsys.readouterr().err


def test_unknown_key_is_reported_with_its_line(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text('{\n  "task": "CN",\n  "algorithm": "MADDPG",\n  "gravity": 9.8\n}\n')
    assert main(["train", str(config)]) == 2
    assert f"{config}:4:" in capsys.readouterr().err


def test_invalid_value_names_the_key(tmp_path, capsys):
    config = write_config(tmp_path / "config.json", task="Soccer")
    assert main(["train", str(config)]) == 2
    err = capsys.readouterr().err
    assert f"{config}:" in err and "task" in err


def test_train_records_overrides_in_manifest(tmp_path):
    config = write_config(tmp_path / "config.json")
    out = tmp_path / "run"
    assert main(["train", str(config), "--output", str(out), "--episodes", "1", "--memory-size", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["config"]["episodes"] == 1 and manifest["config"]["memory_size"] == 3
    assert manifest["config"]["horizon"] == 10
    assert (out / "checkpoint" / "agent_1.ckpt").exists()
    assert list((out / "logs").glob("train_*.log"))


def test_train_defaults_to_runs_dir(tmp_path):
    config = write_config(tmp_path / "config.json", episodes=1, seed=7)
    assert main(["train", str(config)]) == 0
    runs = list((tmp_path / "runs").iterdir())
    assert len(runs) == 1 and runs[0].name.startswith("CN-MD-MADDPG-7-")


def test_learning_curve_is_reproducible(tmp_path):
    config = write_config(tmp_path / "config.json")
    assert main(["train", str(config), "--output", str(tmp_path / "a")]) == 0
    assert main(["train", str(config), "--output", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "learning_curve.csv").read_bytes() == (tmp_path / "b" / "learning_curve.csv").read_bytes()


def test_eval_writes_one_row_per_episode(trained_run, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", str(trained_run), "--episodes", "1", "--output", str(out)]) == 0
    assert len(read_csv(out / "eval_episodes.csv")) == 1
    assert {r["metric"] for r in read_csv(out / "eval_report.csv")} >= {"reward", "collisions"}
    assert "CN: 1 episodes" in capsys.readouterr().out


def test_eval_default_output_and_checkpoint_path(trained_run):
    assert resolve_checkpoint(trained_run) == (trained_run / "checkpoint", trained_run)
    assert resolve_checkpoint(trained_run / "checkpoint") == (trained_run / "checkpoint", trained_run)
    assert main(["eval", str(trained_run / "checkpoint"), "--episodes", "2", "--traces"]) == 0
    assert len(list((trained_run / "eval" / "traces").glob("episode_*.csv"))) == 2


def test_zero_noise_corruption_reproduces_eval(trained_run, tmp_path):
    assert main(["eval", str(trained_run), "--episodes", "3", "--seed", "2", "--output", str(tmp_path / "e")]) == 0
    assert main(["corrupt", str(trained_run), "--episodes", "3", "--seed", "2", "--noise-std", "0",
                 "--output", str(tmp_path / "c")]) == 0
    assert (tmp_path / "e" / "eval_episodes.csv").read_bytes() == (tmp_path / "c" / "eval_episodes.csv").read_bytes()


def test_corrupt_compare_and_random_memory(trained_run, tmp_path):
    assert main(["corrupt", str(trained_run), "--episodes", "2", "--compare", "--output", str(tmp_path / "p")]) == 0
    assert len(read_csv(tmp_path / "p" / "paired_reward_diff.csv")) == 2
    assert main(["corrupt", str(trained_run), "--episodes", "2", "--random-memory", "1.0",
                 "--output", str(tmp_path / "r")]) == 0


def test_incompatible_task_exits_4(trained_run, tmp_path):
    config = tmp_path / "three.json"
    config.write_text(json.dumps({"task": "CN", "n_agents": 3, "horizon": 10}))
    assert main(["eval", str(trained_run), "--config", str(config), "--episodes", "1",
                 "--output", str(tmp_path / "x")]) == 4
    manifest = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert manifest["status"] == "failed"


def test_missing_checkpoint_exits_2(tmp_path):
    assert main(["eval", str(tmp_path / "nowhere"), "--episodes", "1"]) == 2


def test_sweep_writes_one_row_per_value(tmp_path):
    config = write_config(tmp_path / "config.json")
    assert main(["sweep", str(config), "--axis", "memory-size=2,3", "--episodes", "1",
                 "--output", str(tmp_path / "grid")]) == 0
    rows = read_csv(tmp_path / "grid" / "sweep-memory-size" / "grid.csv")
    assert [(r["value"], r["status"]) for r in rows] == [("2", "ok"), ("3", "ok")]
    assert main(["sweep", str(config), "--axis", "colour=1,2"]) == 2


def test_grid_manifest_is_failed_when_a_cell_raises(tmp_path, monkeypatch):
    def broken_train(*args, **kwargs):
        raise RuntimeError("disk full")

    monkeypatch.setattr(evaluation, "train", broken_train)
    config = write_config(tmp_path / "config.json")
    with pytest.raises(RuntimeError):
        main(["sweep", str(config), "--axis", "memory-size=2,3", "--episodes", "1",
              "--output", str(tmp_path / "grid")])
    out = tmp_path / "grid" / "sweep-memory-size"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["error"] == "disk full"
    assert manifest["finished_at"]
    assert [(r["value"], r["status"]) for r in read_csv(out / "grid.csv")] == [("2", "failed")]


def test_ablate_runs_requested_variants(tmp_path):
    config = write_config(tmp_path / "config.json", episodes=1)
    assert main(["ablate", str(config), "--variants", "full,no-write", "--episodes", "1",
                 "--output", str(tmp_path / "grid")]) == 0
    rows = read_csv(tmp_path / "grid" / "ablate-ablation" / "grid.csv")
    assert [r["value"] for r in rows] == ["full", "no-write"]


def test_analyze_and_inspect(trained_run, tmp_path, capsys):
    out = tmp_path / "analysis"
    assert main(["analyze", str(trained_run), "--seed", "1", "--output", str(out)]) == 0
    assert len(read_csv(out / "pca_summary.csv")) == 4
    assert main(["inspect", str(trained_run)]) == 0
    printed = capsys.readouterr().out
    assert "agent_0.ckpt: MD-MADDPG on CN" in printed
    assert "actor.W_k:" in printed and '"status": "completed"' in printed


def test_overrides_on_checkpoint_commands_need_a_config(trained_run):
    assert main(["analyze", str(trained_run), "--horizon", "5"]) == 2


def test_bad_subcommand_is_usage_error():
    assert main(["fly"]) == 2
