import json

import numpy as np
import pytest
import yaml

from locopush import checkpoint as ckpt_io
from locopush import cli
from locopush import config as C
from locopush import eval as ev

TINY = {
    "ppo": {"n_envs": 3, "rollout_len": 5, "total_iterations": 2, "epochs": 1, "minibatches": 1},
    "network": {"actor_hidden": [8], "critic_hidden": [8]},
    "fixed_level": 0,
    "checkpoint_every": 1,
}


def write_cfg(tmp_path, **extra):
    data = json.loads(json.dumps(TINY))
    data.update(extra)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(data))
    return str(p)


def train(tmp_path, name, *flags, **extra):
    out = tmp_path / name
    rc = cli.main(["train", "--config", write_cfg(tmp_path, **extra), "--out", str(out), "--deterministic", *flags])
    assert rc == 0
    return out


def test_two_iteration_metrics(tmp_path):
    out = train(tmp_path, "a")
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].split(",") == cli.METRICS_HEADER
    assert [r["iteration"] for r in cli.read_metrics(out / "metrics.csv")] == ["1", "2"]
    assert (out / cli.CHECKPOINT_NAME).exists()
    assert C.load(out / "config.yaml").ppo.total_iterations == 2


def test_resume_matches_uninterrupted(tmp_path):
    full = train(tmp_path, "full", "--iterations", "4")
    part = train(tmp_path, "part", "--iterations", "2")
    assert cli.main(["train", "--config", write_cfg(tmp_path), "--out", str(part), "--deterministic",
                     "--iterations", "4", "--resume"]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    a, b = ckpt_io.load(full / cli.CHECKPOINT_NAME), ckpt_io.load(part / cli.CHECKPOINT_NAME)
    assert a.blocks.keys() == b.blocks.keys()
    for k in a.blocks:
        assert np.array_equal(a.blocks[k], b.blocks[k]), k


def test_resume_missing_checkpoint(tmp_path, capsys):
    rc = cli.main(["train", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "none"), "--resume"])
    assert rc == 1
    assert "no checkpoint" in capsys.readouterr().err


def test_no_smoothness_zero_column(tmp_path):
    out = train(tmp_path, "ns", "--no-smoothness")
    rows = cli.read_metrics(out / "metrics.csv")
    assert all(float(r["smoothness_loss"]) == 0.0 for r in rows)
    with_smooth = cli.read_metrics(train(tmp_path, "s") / "metrics.csv")
    assert any(float(r["smoothness_loss"]) != 0.0 for r in with_smooth)


def test_invalid_config_exit_code(tmp_path, capsys):
    rc = cli.main(["train", "--config", write_cfg(tmp_path, ppo={"gama": 1.0}), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "ppo.gama" in capsys.readouterr().err


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ck")
    return train(tmp, "run") / cli.CHECKPOINT_NAME


def test_eval_identical_reports(checkpoint, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert cli.main(["eval", str(checkpoint), "--n", "4", "--level", "0", "--seed", "2", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    assert rep["n_episodes"] == 4 and len(rep["episodes"]) == 4


def test_eval_level_out_of_range(checkpoint, capsys):
    assert cli.main(["eval", str(checkpoint), "--n", "1", "--level", "7"]) == 1
    assert "0..4" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.hlom"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert cli.main(["eval", str(bad), "--n", "1"]) == 1
    assert "bad magic" in capsys.readouterr().err


def test_replay_log(checkpoint, tmp_path):
    paths = [tmp_path / "r1.jsonl", tmp_path / "r2.jsonl"]
    for p in paths:
        assert cli.main(["replay", str(checkpoint), "--seed", "3", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    head, body = ev.read_replay(paths[0])
    pi, cfg = cli._load_policy(checkpoint)
    records, ret = ev.record_episode(pi, 3, 0, params=cfg.world, ranges=cfg.ranges, schedule=cfg.curriculum,
                                     reward_cfg=cfg.rewards)
    assert len(body) == len(records) == body[-1]["tick"]
    assert abs(sum(r["r"] for r in body) - head["episode_return"]) < 1e-9
    assert abs(head["episode_return"] - ret) < 1e-9


def test_print_config_round_trip(capsys):
    assert cli.main(["print-config"]) == 0
    text = capsys.readouterr().out
    assert C.from_dict(yaml.safe_load(text)) == C.from_dict({})
