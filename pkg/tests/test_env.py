import time

import numpy as np
import pytest

from locopush import env as E
from locopush import geom
from locopush import world as W

DT = 0.02


def single_world(box_pos=(0.8, 0.0), yaw=0.0, dims=(0.4, 0.5, 0.3), mass=10.0):
    p = W.WorldParams()
    box = W.make_box(dims, mass, params=p)
    box.pos[0, :2] = box_pos
    box.quat = geom.quat_from_yaw(np.array([yaw]))
    return W.make_world(box, W.make_robot(1, p), p), p


def goal_at(x, y, yaw=0.0, z=0.15):
    return E.TaskGoal(np.array([[x, y, z]]), np.array([yaw]))


def zero_cmd():
    return W.Command(np.zeros((1, 3)), np.array([W.DEFAULT_FOOT_POS]))


def reward(w, goal, gate_open=True, prev=None, cfg=None):
    gate = E.RewardGate.fresh(w.n)
    gate.gate_open[:] = gate_open
    bd, _ = E.planner_reward(prev or w, w, goal, zero_cmd(), zero_cmd(), gate, cfg)
    return bd


# ---------------------------------------------------------------- observations

def test_observation_dims_every_tick():
    t0 = time.perf_counter()
    env = E.PushEnv(8, seed=0)
    actor, critic = env.reset()
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert actor.shape == (8, E.OBS_DIM) == (8, 81)
        assert critic.shape == (8, 101)
        assert critic[:, 81:].shape[1] == E.PRIV_DIM == 20
        assert actor[:, E.controller_obs_slice()].shape[1] == E.CTRL_OBS_DIM == 69
        actor, critic, *_ = env.step(rng.normal(size=(8, E.ACTION_DIM)))
    assert E.ACTION_DIM == 9
    assert time.perf_counter() - t0 < 1.0


def test_obs_zero_at_base_origin():
    w, p = single_world()
    w.box.pos[0] = [0.0, 0.0, p.base_height]
    goal = goal_at(0.0, 0.0, 0.0, z=p.base_height)
    zero = W.Command(np.zeros((1, 3)), np.zeros((1, 2, 3)))
    obs = E.build_planner_obs(w, goal, zero)
    np.testing.assert_array_equal(obs[0, :12], 0.0)
    assert obs.shape == (1, 81)


def test_obs_base_frame_transform():
    w, p = single_world()
    w.robot.base[0] = [0.0, 0.0, np.pi / 2]
    w.box.pos[0] = [0.0, 1.0, 0.2]
    obs = E.build_planner_obs(w, goal_at(0.0, 0.0), zero_cmd())
    base = geom.Pose(np.array([0.0, 0.0, p.base_height]), geom.quat_from_yaw(np.pi / 2))
    np.testing.assert_allclose(obs[0, :3], geom.world_to_frame(base, w.box.pos[0]), atol=1e-12)
    np.testing.assert_allclose(obs[0, :2], [1.0, 0.0], atol=1e-12)
    # relative yaw of an unrotated box seen from the yawed base
    assert obs[0, 5] == pytest.approx(-np.pi / 2, abs=1e-12)


def test_obs_controller_block_layout():
    w, _ = single_world()
    w.robot.base_vel[0] = [0.1, 0.0, 0.3]
    c = W.Command(np.array([[0.2, 0.1, -0.4]]), np.array([W.DEFAULT_FOOT_POS]) + 0.01)
    obs = E.build_planner_obs(w, goal_at(1.0, 0.0), c)
    oc = obs[0, E.controller_obs_slice()]
    np.testing.assert_array_equal(oc[:3], [0.0, 0.0, 0.3])
    np.testing.assert_array_equal(oc[3:6], [0.0, 0.0, -1.0])
    np.testing.assert_array_equal(oc[6:60], 0.0)
    np.testing.assert_array_equal(oc[60:], c.flat()[0])


def test_privileged_contact_flags_and_inertia():
    w, _ = single_world()
    priv = E.build_privileged_obs(w.box, W.ContactSet.empty(1))
    np.testing.assert_array_equal(priv[0, 5:7], [0.0, 0.0])
    cs = W.ContactSet.empty(1)
    cs.active[0, 4:6] = True
    cs.surface[0, 4:6] = int(W.SurfaceId.BOX_NEG_X)
    priv = E.build_privileged_obs(w.box, cs)
    np.testing.assert_array_equal(priv[0, 5:7], [1.0, 1.0])
    inertia = priv[0, 11:20].reshape(3, 3)
    np.testing.assert_array_equal(inertia, w.box.inertia[0])
    np.testing.assert_array_equal(inertia, inertia.T)
    assert priv[0, 4] == w.box.mass[0]
    np.testing.assert_array_equal(priv[0, :3], w.box.dims[0])


# ---------------------------------------------------------------- rewards

def test_reward_closed_forms():
    w, _ = single_world()
    x, y = w.box.pos[0, :2]
    bd = reward(w, goal_at(x, y))
    assert bd.raw["dis_obj_tar"][0] == pytest.approx(1.0, abs=1e-12)
    assert bd.weighted["dis_obj_tar"][0] == pytest.approx(0.06, abs=1e-9)
    assert bd.raw["dir_tar"][0] == pytest.approx(np.exp(3.0), abs=1e-9)
    assert bd.raw["dir_tar"][0] == pytest.approx(20.0855, abs=1e-4)
    bd = reward(w, goal_at(x + 0.4, y))
    assert bd.raw["dis_obj_tar"][0] == pytest.approx(np.exp(-1.0), abs=1e-12)
    assert bd.raw["dis_obj_tar"][0] == pytest.approx(0.367879, abs=1e-6)


def test_orientation_penalty_tilted_box():
    w, _ = single_world()
    w.box.quat = geom.quat_from_axis_angle(np.array([1.0, 0, 0]), np.pi / 2)[None]
    bd = reward(w, goal_at(2.0, 0.0))
    assert bd.raw["orientation"][0] == pytest.approx(1.0, abs=1e-12)
    assert bd.weighted["orientation"][0] == pytest.approx(-0.2, abs=1e-9)


def test_total_is_independent_sum():
    env = E.PushEnv(16, seed=3)
    env.reset()
    rng = np.random.default_rng(3)
    for _ in range(30):
        _, _, r, _, info = env.step(rng.normal(0, 0.5, (16, 9)))
        bd = info.breakdown
        cfg = env.reward_cfg
        total = np.zeros(16)
        for k in E.REWARD_TERMS:
            total = total + bd.raw[k] * cfg.weight(k)
        np.testing.assert_allclose(bd.total, total + bd.bicontact_bonus, atol=1e-12)


def test_weights_match_table():
    cfg = E.RewardConfig()
    expected = {"dis_foot_obj": 1.0, "dir_tar_obj": 0.05, "dis_obj_tar": 3.0, "dir_tar": 0.075,
                "orientation": -10.0, "foot_velocity": -0.5, "foot_acc": -0.0002, "action_rate": -0.5,
                "action_limits": -1.0, "termination": 10.0}
    for k, v in expected.items():
        assert cfg.weight(k) == pytest.approx(v * DT, abs=1e-15)
    assert cfg.bicontact_bonus == 0.3
    assert E.RewardConfig(terminal_reward=10.0).weight("termination") == 10.0


def test_gate_closed_goal_terms_zero_and_goal_independent():
    w, _ = single_world()
    rng = np.random.default_rng(4)
    base = None
    for _ in range(50):
        g = goal_at(*rng.uniform(-2, 2, 2), rng.uniform(-np.pi, np.pi))
        bd = reward(w, g, gate_open=False)
        for k in E.GOAL_TERMS:
            assert bd.weighted[k][0] == 0.0
        others = {k: bd.weighted[k][0] for k in E.REWARD_TERMS if k not in E.GOAL_TERMS and k != "termination"}
        if base is None:
            base = others
        assert others == base


def test_dis_obj_tar_strictly_decreasing():
    w, _ = single_world()
    x, y = w.box.pos[0, :2]
    vals = [reward(w, goal_at(x + d, y)).raw["dis_obj_tar"][0] for d in np.linspace(0.0, 3.0, 301)]
    assert np.all(np.diff(vals) < 0)


def test_bonus_iff_bi_contact():
    w, _ = single_world()
    for flags in ((False, False), (True, False), (False, True), (True, True)):
        w.contacts = W.ContactSet.empty(1)
        w.contacts.active[0, 4:6] = flags
        w.contacts.surface[0, 4:6] = int(W.SurfaceId.BOX_NEG_X)
        bd = reward(w, goal_at(2.0, 0.0), gate_open=False)
        assert bd.bicontact_bonus[0] == (0.3 if all(flags) else 0.0)
        assert bd.gate_open[0] == all(flags)


def test_bonus_one_shot_switch():
    w, _ = single_world()
    w.contacts.active[0, 4:6] = True
    w.contacts.surface[0, 4:6] = int(W.SurfaceId.BOX_NEG_X)
    cfg = E.RewardConfig(bonus_one_shot=True)
    gate = E.RewardGate.fresh(1)
    bd1, gate = E.planner_reward(w, w, goal_at(2, 0), zero_cmd(), zero_cmd(), gate, cfg)
    bd2, gate = E.planner_reward(w, w, goal_at(2, 0), zero_cmd(), zero_cmd(), gate, cfg)
    assert bd1.bicontact_bonus[0] == 0.3 and bd2.bicontact_bonus[0] == 0.0


def test_penalties_non_positive_and_zero_at_rest():
    w, _ = single_world()
    bd = reward(w, goal_at(2.0, 0.0))
    for k in ("orientation", "foot_velocity", "foot_acc", "action_rate", "action_limits"):
        assert bd.weighted[k][0] == 0.0
    env = E.PushEnv(8, seed=5)
    env.reset()
    rng = np.random.default_rng(5)
    for _ in range(20):
        *_, info = env.step(rng.normal(0, 2, (8, 9)))
        for k in ("orientation", "foot_velocity", "foot_acc", "action_rate", "action_limits"):
            assert np.all(info.breakdown.weighted[k] <= 0.0)


def test_gating_and_freezing_randomized_episodes():
    """1000 randomized episodes; goal terms gated until bi-contact, interaction terms frozen after success."""
    violations = 0
    episodes = 0
    successes = 0
    n = 100
    for batch in range(10):
        rng = np.random.default_rng(100 + batch)
        env = E.PushEnv(n, seed=100 + batch)
        _, critic = env.reset()
        episodes += n
        gate = np.zeros(n, bool)
        frozen = np.zeros(n, bool)
        held = np.zeros((n, 2))
        snap_tick = rng.integers(5, 50, n)
        # forward, feet reaching ahead, with noise
        bias = np.array([0.6, 0.0, 0.0, 0.6, 0.0, 0.0, 0.6, 0.0, 0.0])
        for t in range(70):
            # move the goal onto the box at a random tick so success occurs
            hit = snap_tick == t
            env.goal.p_cmd[hit] = env.state.box.pos[hit]
            env.goal.yaw_cmd[hit] = geom.yaw_of(env.state.box.quat[hit])
            action = bias + rng.normal(0, 0.5, (n, 9))
            _, critic, _, done, info = env.step(action)
            bd = info.breakdown
            live = ~done  # auto-reset already replaced the state of finished envs
            contact = (env.state.contacts.active[:, 4:6]
                       & (env.state.contacts.surface[:, 4:6] != int(W.SurfaceId.GROUND))).all(axis=1)
            gate |= contact & live
            violations += int(np.sum((bd.gate_open != gate) & live))
            for k in E.GOAL_TERMS:
                violations += int(np.sum((bd.weighted[k] != 0.0) & ~gate & live))
            cur = np.stack([bd.raw["dis_foot_obj"], bd.raw["dir_tar_obj"]], axis=1)
            newly = (info.status == E.EpisodeStatus.SUCCESS) & ~frozen
            held[newly] = cur[newly]
            frozen |= newly
            successes += int(newly.sum())
            violations += int(np.sum(np.any(cur != held, axis=1) & frozen))
            episodes += int(done.sum())
            gate[done] = False
            frozen[done] = False
    assert episodes >= 1000
    assert successes > 100
    assert violations == 0


def test_freeze_uses_last_pre_success_value():
    w0, p = single_world(box_pos=(0.8, 0.0))
    goal = goal_at(0.8, 0.0)
    gate = E.RewardGate.fresh(1)
    gate.gate_open[:] = True
    far = goal_at(3.0, 0.0)
    bd0, gate = E.planner_reward(w0, w0, far, zero_cmd(), zero_cmd(), gate)
    w1 = w0.copy()
    w1.robot.foot_pos[0, :, 0] += 0.1
    bd1, gate = E.planner_reward(w0, w1, goal, zero_cmd(), zero_cmd(), gate)
    assert bd1.success_frozen[0]
    assert bd1.raw["dis_foot_obj"][0] == bd0.raw["dis_foot_obj"][0]
    w2 = w1.copy()
    w2.robot.foot_pos[0, :, 1] += 0.2
    w2.box.pos[0, 0] += 1.0
    bd2, _ = E.planner_reward(w1, w2, goal, zero_cmd(), zero_cmd(), gate)
    assert bd2.raw["dis_foot_obj"][0] == bd0.raw["dis_foot_obj"][0]
    assert bd2.raw["dir_tar_obj"][0] == bd0.raw["dir_tar_obj"][0]


# ---------------------------------------------------------------- termination

def _status(pos_err, yaw_err_deg, t, pitch_deg=0.0):
    w, p = single_world(box_pos=(1.0, 0.0))
    w.box.quat = geom.quat_from_euler(0.0, np.radians(pitch_deg), np.radians(yaw_err_deg))[None]
    w.tick[:] = int(round(t / p.control_dt))
    w.time[:] = w.tick * p.control_dt
    return E.check_termination(w, goal_at(1.0 + pos_err, 0.0, 0.0))[0]


def test_termination_examples():
    assert _status(0.04, 4.0, 10.0) == E.EpisodeStatus.SUCCESS
    assert _status(0.04, 6.0, 25.0) == E.EpisodeStatus.TIMEOUT
    assert _status(0.04, 4.0, 25.0) == E.EpisodeStatus.SUCCESS
    assert _status(0.3, 0.0, 3.0, pitch_deg=41.0) == E.EpisodeStatus.TILT_RESET
    assert _status(0.3, 0.0, 3.0, pitch_deg=39.0) == E.EpisodeStatus.RUNNING
    assert _status(0.06, 0.0, 10.0) == E.EpisodeStatus.RUNNING


def test_termination_diverged():
    w, _ = single_world()
    w.box.lin_vel[0, 0] = np.nan
    assert E.check_termination(w, goal_at(2.0, 0.0))[0] == E.EpisodeStatus.DIVERGED


# ---------------------------------------------------------------- curriculum

def test_curriculum_promotion():
    c = E.CurriculumState()
    for i in range(100):
        c = E.curriculum_update(c, E.EpisodeStatus.SUCCESS if i < 80 else E.EpisodeStatus.TIMEOUT)
    assert c.level == 1 and c.window == []


def test_curriculum_below_threshold_and_ceiling():
    c = E.CurriculumState()
    for i in range(100):
        c = E.curriculum_update(c, E.EpisodeStatus.SUCCESS if i < 79 else E.EpisodeStatus.TIMEOUT)
    assert c.level == 0
    c = E.CurriculumState(level=4)
    for _ in range(150):
        c = E.curriculum_update(c, E.EpisodeStatus.SUCCESS)
    assert c.level == 4
    c = E.curriculum_update(E.CurriculumState(), E.EpisodeStatus.TILT_RESET)
    assert c.level == 0


def test_curriculum_limits_schedule():
    s = E.CurriculumSchedule()
    for k in range(5):
        lim = s.limits(k)
        assert lim["dy"] == pytest.approx(0.1 + 0.15 * k)
        assert lim["dyaw"] == pytest.approx(np.radians(10 + 12.5 * k))
        assert lim["dx"] == pytest.approx((0.5, 0.8 + 0.3 * k))


# ---------------------------------------------------------------- sampling

def test_reset_episode_level_bounds():
    rng = np.random.default_rng(6)
    cur = E.CurriculumState(level=0)
    dy, dyaw, mass = [], [], []
    for _ in range(10_000):
        w, g = E.reset_episode(rng, cur, E.RandomizationRanges())
        dy.append(g.p_cmd[0, 1] - w.box.pos[0, 1])
        dyaw.append(g.yaw_cmd[0])
        mass.append(w.box.mass[0])
    assert np.max(np.abs(dy)) <= 0.1
    assert np.max(np.abs(dyaw)) <= np.radians(10.0)
    assert 5.0 <= min(mass) and max(mass) <= 15.0


def test_reset_episode_deterministic():
    cur = E.CurriculumState(level=2)
    a = E.reset_episode(np.random.default_rng(7), cur, E.RandomizationRanges())
    b = E.reset_episode(np.random.default_rng(7), cur, E.RandomizationRanges())
    for x, y in ((a[0].box.pos, b[0].box.pos), (a[0].box.inertia, b[0].box.inertia), (a[1].p_cmd, b[1].p_cmd)):
        np.testing.assert_array_equal(x, y)


def test_randomization_ranges_and_coverage():
    ranges = E.RandomizationRanges()
    rng = np.random.default_rng(8)
    draws = [E.sample_box(rng, ranges) for _ in range(100_000)]
    cols = {
        "length": np.array([d["dims"][0] for d in draws]),
        "width": np.array([d["dims"][1] for d in draws]),
        "height": np.array([d["dims"][2] for d in draws]),
        "com_x": np.array([d["com"][0] for d in draws]),
        "com_y": np.array([d["com"][1] for d in draws]),
        "com_z": np.array([d["com"][2] for d in draws]),
    }
    for k in ("mass", "friction", "restitution", "ground_friction", "tau_scale"):
        cols[k] = np.array([d[k] for d in draws])
    for k, v in cols.items():
        lo, hi = getattr(ranges, k)
        assert np.all((v >= lo) & (v <= hi)), k
        span = hi - lo
        assert v.min() - lo <= 0.02 * span, k
        assert hi - v.max() <= 0.02 * span, k
    expected = {"length": (0.3, 0.5), "height": (0.25, 0.5), "width": (0.45, 0.6), "mass": (5.0, 15.0),
                "friction": (0.3, 0.8), "restitution": (0.0, 0.3), "ground_friction": (0.3, 1.0),
                "tau_scale": (0.9, 1.1), "com_x": (-0.2, 0.1), "com_y": (-0.1, 0.1), "com_z": (-0.1, 0.1)}
    for k, v in expected.items():
        assert tuple(getattr(ranges, k)) == v


def test_sampled_inertia_parallel_axis():
    rng = np.random.default_rng(9)
    w, _ = E.reset_episode(rng, E.CurriculumState(), E.RandomizationRanges())
    b = w.box
    d, m, c = b.dims[0], b.mass[0], b.com[0]
    ic = m / 12.0 * np.diag([d[1] ** 2 + d[2] ** 2, d[0] ** 2 + d[2] ** 2, d[0] ** 2 + d[1] ** 2])
    oracle = ic + m * (c @ c * np.eye(3) - np.outer(c, c))
    np.testing.assert_allclose(b.inertia[0], oracle, atol=1e-12)


# ---------------------------------------------------------------- driver

def test_action_command_round_trip():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(5, 9))
    d = np.tile(np.array(W.DEFAULT_FOOT_POS), (5, 1, 1))
    np.testing.assert_allclose(E.command_to_action(E.action_to_command(a, d), d), a, atol=1e-12)


def test_env_state_round_trip():
    rng = np.random.default_rng(11)
    actions = rng.normal(0, 0.7, (40, 6, 9))
    env = E.PushEnv(6, seed=11)
    env.reset()
    for a in actions[:20]:
        env.step(a)
    snap = env.get_state()
    ref = [env.step(a)[2] for a in actions[20:]]
    other = E.PushEnv(6, seed=999)
    other.set_state(snap)
    got = [other.step(a)[2] for a in actions[20:]]
    for x, y in zip(ref, got):
        assert x.tobytes() == y.tobytes()


def test_env_resets_with_fresh_gate():
    env = E.PushEnv(2, seed=12)
    env.reset()
    env.gate.gate_open[:] = True
    env.state.box.quat[0] = geom.quat_from_axis_angle(np.array([1.0, 0, 0]), np.radians(60))
    _, _, _, done, info = env.step(np.zeros((2, 9)))
    assert done[0] and info.finished_outcomes[0] == E.EpisodeStatus.TILT_RESET
    assert not env.gate.gate_open[0] and env.gate.gate_open[1]
    assert env.state.tick[0] == 0
