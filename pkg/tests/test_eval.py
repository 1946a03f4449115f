import json
import math

import numpy as np
import pytest

from locopush import env as E
from locopush import eval as ev
from locopush import nn


def untrained(seed=0):
    return nn.GaussianPolicy.create(np.random.default_rng(seed), E.OBS_DIM, E.ACTION_DIM)


@pytest.fixture(scope="module")
def level4_report():
    pi = untrained()
    before = nn.param_checksum(pi.params())
    report = ev.run_eval(pi, 100, seed=3, level=4)
    return report, before, nn.param_checksum(pi.params())


def test_empty_eval():
    r = ev.run_eval(untrained(), 0, seed=0, level=0)
    assert r.n_episodes == 0 and r.success_rate == 0.0 and r.episodes == []
    assert json.loads(r.to_json())["avg_completion_time"] is None


def test_untrained_policy_fails_at_top_level(level4_report):
    report, _, _ = level4_report
    assert report.n_episodes == 100 and len(report.episodes) == 100
    assert report.success_rate < 0.05


def test_eval_does_not_touch_policy(level4_report):
    _, before, after = level4_report
    assert before == after


def test_report_invariants(level4_report):
    report, _, _ = level4_report
    outcomes = [e.outcome for e in report.episodes]
    assert report.success_rate == outcomes.count("success") / 100
    assert [e.index for e in report.episodes] == list(range(100))
    assert len({e.seed for e in report.episodes}) == 100
    for e in report.episodes:
        assert e.time <= E.EPISODE_TIMEOUT + 1e-9
        assert set(e.object) >= {"dims", "mass", "com", "friction", "restitution"}
    if math.isnan(report.avg_completion_time):
        assert "success" not in outcomes
    else:
        assert report.avg_completion_time <= E.EPISODE_TIMEOUT


def test_same_seed_bit_identical():
    pi = untrained(1)
    a = ev.run_eval(pi, 6, seed=11, level=0)
    b = ev.run_eval(pi, 6, seed=11, level=0)
    assert a.to_json() == b.to_json()
    c = ev.run_eval(pi, 6, seed=12, level=0)
    assert [e.seed for e in c.episodes] != [e.seed for e in a.episodes]


def test_episode_seeds_distinct_and_reproducible():
    s = ev.episode_seeds(5, 1000)
    assert len(set(s)) == 1000
    assert s == ev.episode_seeds(5, 1000)
    assert s[:10] == ev.episode_seeds(5, 10)


def test_level_out_of_range_rejected():
    with pytest.raises(ValueError, match="0..4"):
        ev.run_eval(untrained(), 1, seed=0, level=5)


def test_success_time_is_first_success():
    pi = untrained(2)
    r = ev.run_eval(pi, 8, seed=0, level=0)
    for e in r.episodes:
        if e.outcome == "success":
            assert e.pos_error < E.SUCCESS_POS_TOL and abs(e.yaw_error) < E.SUCCESS_YAW_TOL


# ---------------------------------------------------------------- replay

def test_one_tick_replay(tmp_path):
    env = E.PushEnv(1, seed=0)
    records = []
    env.log_hook = lambda i, rec: records.append(rec)
    env.reset()
    env.step(np.zeros((1, E.ACTION_DIM)))
    path = tmp_path / "one.jsonl"
    assert ev.write_replay(records, path) == 1
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    head, body = ev.read_replay(path)
    assert head["schema_version"] == ev.REPLAY_SCHEMA_VERSION and len(body) == 1
    rec = body[0]
    for key in ("t", "box", "robot", "contacts", "reward", "command"):
        assert key in rec
    assert set(rec["reward"]["terms"]) == set(E.REWARD_TERMS)


def test_replay_sum_matches_return(tmp_path):
    pi = untrained(4)
    records, ret = ev.record_episode(pi, seed=7, level=0)
    path = tmp_path / "ep.jsonl"
    n = ev.write_replay(records, path, {"episode_return": ret})
    head, body = ev.read_replay(path)
    assert n == len(body) == len(records)
    assert body[-1]["tick"] == n
    assert abs(sum(r["r"] for r in body) - head["episode_return"]) < 1e-9
    # the same episode seen through the batched env used for training
    env = E.PushEnv(1, terminate_on_success=True, fixed_level=0, episode_seeds=ev.episode_seeds(7, 1))
    actor, _ = env.reset()
    while True:
        actor, _, _, done, info = env.step(pi.mean(actor))
        if done[0]:
            break
    assert abs(info.finished_returns[0] - sum(r["r"] for r in body)) < 1e-9


def test_replay_contacts_match_flags():
    pi = untrained(5)
    env = E.PushEnv(4, seed=2, fixed_level=0)
    seen = []

    def hook(i, rec):
        flags = E.build_privileged_obs(env.state.box, env.state.contacts)[i, 5:7]
        seen.append((rec, flags))

    env.log_hook = hook
    actor, _ = env.reset()
    for _ in range(150):
        actor, *_ = env.step(pi.mean(actor))
    touching = 0
    for rec, flags in seen:
        if not flags.any():
            assert rec["contacts"] == []
        else:
            touching += 1
            feet = {c["foot"] for c in rec["contacts"]}
            assert feet == {name for name, f in zip(("left", "right"), flags) if f}
    assert touching > 0


def test_replay_deterministic_bytes(tmp_path):
    pi = untrained(6)
    paths = []
    for k in range(2):
        recs, ret = ev.record_episode(pi, seed=1, level=0)
        paths.append(tmp_path / f"r{k}.jsonl")
        ev.write_replay(recs, paths[-1], {"episode_return": ret})
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_replay_unwritable_path(tmp_path):
    with pytest.raises(OSError, match="cannot write replay"):
        ev.write_replay([], tmp_path / "missing" / "x.jsonl")


# ---------------------------------------------------------------- ablations

def _report(sr, t):
    return ev.EvalReport(n_episodes=10, success_rate=sr, avg_completion_time=t)


def test_identical_reports_zero_deltas():
    table = ev.compare_ablations({"full": _report(0.5, 10.0), "copy": _report(0.5, 10.0)})
    for row in table.rows:
        assert row[3] == 0.0 and row[4] == 0.0


def test_three_reports_table():
    table = ev.compare_ablations({"full": _report(0.6, 9.0), "no-curriculum": _report(0.4, 12.0),
                                  "no-key-rewards": _report(0.3, math.nan)})
    assert len(table.rows) == 3
    assert table.rows[1][3] == pytest.approx(-20.0) and table.rows[1][4] == pytest.approx(3.0)
    text = table.format().splitlines()
    assert len(text) == 1 + 3 + len(ev.REFERENCE_ROWS)
    assert [r[1:] for r in table.reference] == [(95.6, 12.1), (78.7, 18.9), (67.9, 21.3)]
    assert "95.6" in text[4] and "12.1" in text[4]


def test_compare_needs_two_reports():
    with pytest.raises(ValueError):
        ev.compare_ablations({"full": _report(0.5, 1.0)})


def test_ablation_switches():
    base = E.RewardConfig()
    ab = ev.AblationConfig(disable_key_rewards=True)
    cfg = ev.apply_ablation(ab, base)
    assert cfg.bicontact_bonus == 0.0 and cfg.orientation == 0.0
    assert cfg.dis_obj_tar == base.dis_obj_tar
    from locopush.ppo import PpoConfig
    p = PpoConfig()
    ev.apply_ablation(ev.AblationConfig(disable_smoothness=True), base, p)
    assert p.lambda_pi == 0.0 and p.lambda_v == 0.0
    assert ev.AblationConfig().name == "full"
