"""Planner-level pushing task: observations, rewards, termination, curriculum.

``PushEnv`` steps ``N`` environments in lock-step on top of the batched
physics in :mod:`locopush.world`. Reward, observation and termination
functions are pure functions of world states so they can be tested alone.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import geom
from . import world as W

OBS_DIM = 81
PRIV_DIM = 20
CTRL_OBS_DIM = 69
ACTION_DIM = 9
N_JOINTS = 18

SUCCESS_POS_TOL = 0.05
SUCCESS_YAW_TOL = np.radians(5.0)
TILT_LIMIT = np.radians(40.0)
EPISODE_TIMEOUT = 25.0

# A unit policy action moves the command by ACTION_SCALE of the box half-range
# about its center, so unit exploration noise stays small next to the object.
ACTION_SCALE = 0.15
_ACT_CENTER = np.concatenate([
    0.5 * (W.VEL_LOW + W.VEL_HIGH),
    np.tile(0.5 * (W.FOOT_DELTA_LOW + W.FOOT_DELTA_HIGH), 2),
])
_ACT_HALF = ACTION_SCALE * np.concatenate([
    0.5 * (W.VEL_HIGH - W.VEL_LOW),
    np.tile(0.5 * (W.FOOT_DELTA_HIGH - W.FOOT_DELTA_LOW), 2),
])

REWARD_TERMS = (
    "dis_foot_obj",
    "dir_tar_obj",
    "dis_obj_tar",
    "dir_tar",
    "orientation",
    "foot_velocity",
    "foot_acc",
    "action_rate",
    "action_limits",
    "termination",
)
GOAL_TERMS = ("dir_tar_obj", "dis_obj_tar", "dir_tar")


class EpisodeStatus(enum.IntEnum):
    RUNNING = 0
    SUCCESS = 1
    TILT_RESET = 2
    TIMEOUT = 3
    DIVERGED = 4


@dataclass
class RewardConfig:
    """Per-term weights in units of dt (multiplied by ``dt`` when applied)."""

    dt: float = 0.02
    dis_foot_obj: float = 1.0
    dir_tar_obj: float = 0.05
    dis_obj_tar: float = 3.0
    dir_tar: float = 0.075
    orientation: float = -10.0
    foot_velocity: float = -0.5
    foot_acc: float = -0.0002
    action_rate: float = -0.5
    action_limits: float = -1.0
    termination: float = 10.0
    # Absolute per-tick value of the success reward; None means termination * dt.
    terminal_reward: Optional[float] = None
    bicontact_bonus: float = 0.3
    bonus_one_shot: bool = False

    def weight(self, term: str) -> float:
        if term == "termination" and self.terminal_reward is not None:
            return self.terminal_reward
        return getattr(self, term) * self.dt


@dataclass
class RandomizationRanges:
    length: tuple = (0.3, 0.5)
    height: tuple = (0.25, 0.5)
    width: tuple = (0.45, 0.60)
    mass: tuple = (5.0, 15.0)
    friction: tuple = (0.3, 0.8)
    restitution: tuple = (0.0, 0.3)
    ground_friction: tuple = (0.3, 1.0)
    tau_scale: tuple = (0.9, 1.1)
    com_x: tuple = (-0.2, 0.1)
    com_y: tuple = (-0.1, 0.1)
    com_z: tuple = (-0.1, 0.1)
    # COM draws are rejected unless inside this fraction of the half extents.
    com_margin: float = 0.8


@dataclass
class CurriculumSchedule:
    n_levels: int = 5
    dy_base: float = 0.1
    dy_step: float = 0.15
    dyaw_base_deg: float = 10.0
    dyaw_step_deg: float = 12.5
    dx_min: float = 0.5
    dx_max_base: float = 0.8
    dx_step: float = 0.3
    gap_min: float = 0.03
    gap_max_base: float = 0.10
    gap_step: float = 0.05
    promote_threshold: float = 0.8
    window_size: int = 100

    def limits(self, level: int) -> dict:
        return {
            "dy": self.dy_base + self.dy_step * level,
            "dyaw": np.radians(self.dyaw_base_deg + self.dyaw_step_deg * level),
            "dx": (self.dx_min, self.dx_max_base + self.dx_step * level),
            "gap": (self.gap_min, self.gap_max_base + self.gap_step * level),
        }


@dataclass
class CurriculumState:
    level: int = 0
    window: list = field(default_factory=list)
    promote_threshold: float = 0.8
    window_size: int = 100
    n_levels: int = 5


def curriculum_update(c: CurriculumState, outcome: EpisodeStatus) -> CurriculumState:
    window = (c.window + [outcome == EpisodeStatus.SUCCESS])[-c.window_size:]
    level = c.level
    if (len(window) >= c.window_size and np.mean(window) >= c.promote_threshold
            and level < c.n_levels - 1):
        level += 1
        window = []
    return CurriculumState(level, window, c.promote_threshold, c.window_size, c.n_levels)


@dataclass
class TaskGoal:
    p_cmd: np.ndarray  # (N, 3) world
    yaw_cmd: np.ndarray  # (N,)

    @property
    def quat(self) -> np.ndarray:
        return geom.quat_from_yaw(self.yaw_cmd)


def action_to_command(action, foot_default) -> W.Command:
    """Affine map of a normalized policy action onto a raw (unclamped) command."""
    raw = _ACT_CENTER + _ACT_HALF * np.asarray(action, dtype=np.float64)
    cmd = W.Command.from_flat(raw)
    cmd.foot_cmd = cmd.foot_cmd + foot_default
    return cmd


def command_to_action(cmd: W.Command, foot_default) -> np.ndarray:
    flat = W.Command(cmd.v_cmd, cmd.foot_cmd - foot_default).flat()
    return (flat - _ACT_CENTER) / _ACT_HALF


# ---------------------------------------------------------------- sampling

def _uniform(rng, lo_hi):
    return rng.uniform(lo_hi[0], lo_hi[1])


def sample_box(rng: np.random.Generator, ranges: RandomizationRanges) -> dict:
    dims = np.array([_uniform(rng, ranges.length), _uniform(rng, ranges.width), _uniform(rng, ranges.height)])
    limit = ranges.com_margin * 0.5 * dims
    while True:
        com = np.array([_uniform(rng, ranges.com_x), _uniform(rng, ranges.com_y), _uniform(rng, ranges.com_z)])
        if np.all(np.abs(com) <= limit):
            break
    return {
        "dims": dims,
        "com": com,
        "mass": _uniform(rng, ranges.mass),
        "friction": _uniform(rng, ranges.friction),
        "restitution": _uniform(rng, ranges.restitution),
        "ground_friction": _uniform(rng, ranges.ground_friction),
        "tau_scale": _uniform(rng, ranges.tau_scale),
    }


def reset_episode(rng: np.random.Generator, curriculum: CurriculumState, ranges: RandomizationRanges,
                  params: Optional[W.WorldParams] = None,
                  schedule: Optional[CurriculumSchedule] = None) -> tuple[W.WorldState, TaskGoal]:
    """Sample one randomized episode: box ahead of the robot, goal per curriculum level."""
    params = params or W.WorldParams()
    schedule = schedule or CurriculumSchedule()
    lim = schedule.limits(curriculum.level)
    p = sample_box(rng, ranges)
    robot = W.make_robot(1, params)
    robot.tau_base *= p["tau_scale"]
    robot.tau_foot *= p["tau_scale"]
    front_x = max(f[0] for f in params.foot_default) + params.foot_radius
    gap = _uniform(rng, lim["gap"])
    x0 = front_x + gap + 0.5 * p["dims"][0]
    y0 = rng.uniform(-0.05, 0.05)
    sink = p["mass"] * params.gravity / (4.0 * params.contact_stiffness)
    pos = np.array([x0, y0, 0.5 * p["dims"][2] - sink])
    box = W.make_box(p["dims"], p["mass"], p["com"], p["friction"], p["restitution"], pos=pos, params=params)
    state = W.make_world(box, robot, params, ground_friction=p["ground_friction"])
    dx = _uniform(rng, lim["dx"])
    dy = rng.uniform(-lim["dy"], lim["dy"])
    dyaw = rng.uniform(-lim["dyaw"], lim["dyaw"])
    goal = TaskGoal(p_cmd=(pos + np.array([dx, dy, 0.0]))[None], yaw_cmd=np.array([dyaw]))
    return state, goal


# ---------------------------------------------------------------- observations

def default_proprioception(w: W.WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions and velocities; the kinematic plant has none, so zeros."""
    return np.zeros((w.n, N_JOINTS)), np.zeros((w.n, N_JOINTS))


def build_planner_obs(w: W.WorldState, goal: TaskGoal, prev_planner_action: W.Command,
                      prev_ctrl_action=None, params: Optional[W.WorldParams] = None,
                      proprioception: Callable = default_proprioception) -> np.ndarray:
    """(N, 81) actor observation with object and goal in the robot base frame."""
    params = params or W.WorldParams()
    n = w.n
    base = W.base_pose(w.robot, params)
    p_obj = geom.world_to_frame(base, w.box.pos)
    rel_q = geom.quat_mul(geom.quat_conj(base.orientation), w.box.quat)
    r_obj = geom.quat_to_euler(rel_q)
    p_cmd = geom.world_to_frame(base, goal.p_cmd)
    r_cmd = np.zeros((n, 3))
    r_cmd[:, 2] = geom.wrap_angle(goal.yaw_cmd - w.robot.base[:, 2])
    omega = np.zeros((n, 3))
    omega[:, 2] = w.robot.base_vel[:, 2]
    gravity = geom.projected_gravity(base.orientation)
    q, qd = proprioception(w)
    a_prev_c = np.zeros((n, N_JOINTS)) if prev_ctrl_action is None else np.broadcast_to(prev_ctrl_action, (n, N_JOINTS))
    c = prev_planner_action.flat().reshape(n, ACTION_DIM)
    return np.concatenate([p_obj, r_obj, p_cmd, r_cmd, omega, gravity, q, qd, a_prev_c, c], axis=1)


def controller_obs_slice() -> slice:
    return slice(OBS_DIM - CTRL_OBS_DIM, OBS_DIM)


def build_privileged_obs(box: W.BoxObject, contacts: W.ContactSet) -> np.ndarray:
    """(N, 20) critic-only block: object properties plus foot contact flags."""
    n = box.mass.shape[0]
    touching = contacts.foot_contact() & (contacts.surface[:, 4:6] != int(W.SurfaceId.GROUND))
    return np.concatenate([
        box.dims,
        box.restitution[:, None],
        box.mass[:, None],
        touching.astype(np.float64),
        box.com,
        box.friction[:, None],
        box.inertia.reshape(n, 9),
    ], axis=1)


# ---------------------------------------------------------------- termination

def goal_errors(w: W.WorldState, goal: TaskGoal) -> tuple[np.ndarray, np.ndarray]:
    """Planar position error and signed yaw error of the box."""
    pos_err = np.linalg.norm(w.box.pos[:, :2] - goal.p_cmd[:, :2], axis=1)
    yaw_err = geom.yaw_error(w.box.quat, goal.quat)
    return pos_err, yaw_err


def tilt_angles(quat) -> np.ndarray:
    """(…, 2) absolute roll and pitch."""
    rpy = geom.quat_to_euler(quat)
    return np.abs(rpy[..., :2])


def success_condition(w: W.WorldState, goal: TaskGoal) -> np.ndarray:
    pos_err, yaw_err = goal_errors(w, goal)
    return (pos_err < SUCCESS_POS_TOL) & (np.abs(yaw_err) < SUCCESS_YAW_TOL)


def check_termination(w: W.WorldState, goal: TaskGoal, timeout: float = EPISODE_TIMEOUT) -> np.ndarray:
    """Per-environment EpisodeStatus codes."""
    status = np.full(w.n, int(EpisodeStatus.RUNNING))
    status[w.time >= timeout - 1e-9] = EpisodeStatus.TIMEOUT
    status[np.any(tilt_angles(w.box.quat) > TILT_LIMIT, axis=1)] = EpisodeStatus.TILT_RESET
    status[success_condition(w, goal)] = EpisodeStatus.SUCCESS
    bad = w.diverged.copy()
    for arr in (w.box.pos, w.box.quat, w.box.lin_vel, w.box.ang_vel):
        bad |= ~np.isfinite(arr).all(axis=1)
    status[bad] = EpisodeStatus.DIVERGED
    return status


# ---------------------------------------------------------------- rewards

@dataclass
class RewardGate:
    """Per-episode reward bookkeeping; reset with the episode."""

    gate_open: np.ndarray
    success_frozen: np.ndarray
    frozen: np.ndarray  # (N, 2): dis_foot_obj, dir_tar_obj raw values
    last: np.ndarray  # (N, 2)
    has_last: np.ndarray
    bonus_given: np.ndarray

    @classmethod
    def fresh(cls, n: int) -> "RewardGate":
        return cls(np.zeros(n, bool), np.zeros(n, bool), np.zeros((n, 2)), np.zeros((n, 2)),
                   np.zeros(n, bool), np.zeros(n, bool))

    def reset(self, idx) -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = 0

    def copy(self) -> "RewardGate":
        return RewardGate(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class RewardBreakdown:
    raw: dict
    weighted: dict
    total: np.ndarray
    gate_open: np.ndarray
    success_frozen: np.ndarray
    bicontact_bonus: np.ndarray

    def record(self, i: int) -> dict:
        return {
            "terms": {k: [float(self.raw[k][i]), float(self.weighted[k][i])] for k in REWARD_TERMS},
            "bicontact_bonus": float(self.bicontact_bonus[i]),
            "total": float(self.total[i]),
            "gate_open": bool(self.gate_open[i]),
            "success_frozen": bool(self.success_frozen[i]),
        }


def _side_face_frames(box: W.BoxObject):
    """Outward normals, face centers and lateral half-widths of the four side faces."""
    n = box.mass.shape[0]
    local = np.array([[-1.0, 0, 0], [1.0, 0, 0], [0, -1.0, 0], [0, 1.0, 0]])
    q4 = np.repeat(box.quat[:, None], 4, axis=1)
    normals = geom.quat_rotate(q4, np.broadcast_to(local, (n, 4, 3)))
    half = 0.5 * box.dims
    centers = box.pos[:, None] + normals * np.stack([half[:, 0], half[:, 0], half[:, 1], half[:, 1]], axis=1)[..., None]
    lateral = np.stack([half[:, 1], half[:, 1], half[:, 0], half[:, 0]], axis=1)
    return normals, centers, lateral


def foot_targets(w: W.WorldState, direction_xy: np.ndarray, params: W.WorldParams,
                 lateral_fraction: float = 0.25) -> np.ndarray:
    """(N, 2, 3) pushing targets on the face whose normal most opposes ``direction_xy``.

    Targets sit one foot radius outside the face, at the COM's height and
    lateral position, spread left/right by ``lateral_fraction`` of the face width.
    """
    normals, centers, lateral = _side_face_frames(w.box)
    d = direction_xy / np.maximum(np.linalg.norm(direction_xy, axis=1, keepdims=True), 1e-12)
    face = np.argmin(np.einsum("nfk,nk->nf", normals[..., :2], d), axis=1)
    idx = np.arange(w.n)
    nrm = normals[idx, face]
    ctr = centers[idx, face]
    com = w.box.com_world()
    on_face = com - np.sum((com - ctr) * nrm, axis=1, keepdims=True) * nrm
    anchor = on_face + params.foot_radius * nrm
    anchor[:, 2] = com[:, 2]
    left_dir = geom.cross(np.array([0.0, 0.0, 1.0]), -nrm)
    left_dir[:, 2] = 0.0
    left_dir /= np.maximum(np.linalg.norm(left_dir, axis=1, keepdims=True), 1e-12)
    offset = (lateral_fraction * 2.0 * lateral[idx, face])[:, None] * left_dir
    return np.stack([anchor + offset, anchor - offset], axis=1)


def _exp_direction(cos):
    return np.exp(cos / 0.25 - 1.0)


def planner_reward(w_prev: W.WorldState, w: W.WorldState, goal: TaskGoal, a_prev: W.Command, a: W.Command,
                   gate: RewardGate, cfg: Optional[RewardConfig] = None,
                   params: Optional[W.WorldParams] = None) -> tuple[RewardBreakdown, RewardGate]:
    """Per-term planner reward for the transition ``w_prev -> w``; returns the updated gate."""
    cfg = cfg or RewardConfig()
    params = params or W.WorldParams()
    gate = gate.copy()
    n = w.n

    bi_contact = build_privileged_obs(w.box, w.contacts)[:, 5:7].all(axis=1)
    gate.gate_open |= bi_contact
    success = success_condition(w, goal)

    feet = W.feet_world(w.robot, params)
    to_goal = goal.p_cmd[:, :2] - w.box.pos[:, :2]
    from_base = w.box.pos[:, :2] - w.robot.base[:, :2]
    face_dir = np.where(gate.gate_open[:, None], to_goal, from_base)
    targets = foot_targets(w, face_dir, params)
    dis_foot = np.exp(-np.linalg.norm(feet - targets, axis=2) / 0.2).sum(axis=1)

    v = w.box.lin_vel[:, :2]
    speed = np.linalg.norm(v, axis=1)
    dist = np.linalg.norm(to_goal, axis=1)
    moving = (speed > 1e-3) & (dist > 1e-9)
    cos_theta = np.where(moving, np.sum(v * to_goal, axis=1) / np.where(moving, speed * dist, 1.0), 0.0)
    dir_tar_obj = _exp_direction(cos_theta) * gate.gate_open

    dis_obj_tar = np.exp(-dist / 0.4) * gate.gate_open
    cos_phi = np.cos(geom.yaw_error(w.box.quat, goal.quat))
    dir_tar = _exp_direction(cos_phi) * gate.gate_open

    # Freeze interaction terms at their last pre-success values.
    current = np.stack([dis_foot, dir_tar_obj], axis=1)
    newly = success & ~gate.success_frozen
    gate.frozen[newly] = np.where(gate.has_last[newly, None], gate.last[newly], current[newly])
    gate.success_frozen |= newly
    held = np.where(gate.success_frozen[:, None], gate.frozen, current)
    live = ~gate.success_frozen
    gate.last[live] = current[live]
    gate.has_last |= live

    g = geom.projected_gravity(w.box.quat)
    dt = cfg.dt
    foot_acc = (w.robot.foot_vel - w_prev.robot.foot_vel) / dt
    raw = {
        "dis_foot_obj": held[:, 0],
        "dir_tar_obj": held[:, 1],
        "dis_obj_tar": dis_obj_tar,
        "dir_tar": dir_tar,
        "orientation": np.sum(g[:, :2] ** 2, axis=1),
        "foot_velocity": np.sum(w.robot.foot_vel**2, axis=(1, 2)),
        "foot_acc": np.sum(foot_acc**2, axis=(1, 2)),
        "action_rate": np.sum((a.flat() - a_prev.flat()) ** 2, axis=1),
        "action_limits": W.command_limit_violation(a, w.robot.foot_default),
        "termination": success.astype(np.float64),
    }
    weighted = {k: raw[k] * cfg.weight(k) for k in REWARD_TERMS}
    if cfg.bonus_one_shot:
        pay = bi_contact & ~gate.bonus_given
    else:
        pay = bi_contact
    gate.bonus_given |= bi_contact
    bonus = cfg.bicontact_bonus * pay
    total = np.zeros(n)
    for k in REWARD_TERMS:
        total = total + weighted[k]
    total = total + bonus
    return RewardBreakdown(raw, weighted, total, gate.gate_open.copy(), gate.success_frozen.copy(), bonus), gate


# ---------------------------------------------------------------- vectorized driver

def _write_env(dst: W.WorldState, i: int, src: W.WorldState) -> None:
    for part in ("box", "robot"):
        d, s = getattr(dst, part), getattr(src, part)
        for k, v in vars(s).items():
            getattr(d, k)[i] = v[0]
    for part in ("active", "point", "normal", "force", "penetration", "surface"):
        getattr(dst.contacts, part)[i] = getattr(src.contacts, part)[0]
    dst.ground_friction[i] = src.ground_friction[0]
    dst.time[i] = 0.0
    dst.tick[i] = 0
    dst.diverged[i] = False


def _stack_states(states: list[W.WorldState]) -> W.WorldState:
    def cat(objs):
        cls = type(objs[0])
        return cls(**{k: np.concatenate([getattr(o, k) for o in objs]) for k in vars(objs[0])})

    return W.WorldState(
        box=cat([s.box for s in states]),
        robot=cat([s.robot for s in states]),
        ground_friction=np.concatenate([s.ground_friction for s in states]),
        time=np.concatenate([s.time for s in states]),
        tick=np.concatenate([s.tick for s in states]),
        contacts=cat([s.contacts for s in states]),
        diverged=np.concatenate([s.diverged for s in states]),
    )


@dataclass
class StepInfo:
    status: np.ndarray
    breakdown: RewardBreakdown
    timeout: np.ndarray  # episode truncated by the time limit
    terminal_critic_obs: np.ndarray  # critic obs before auto-reset
    finished_returns: list
    finished_lengths: list
    finished_outcomes: list
    diverged: int
    finished_index: list = field(default_factory=list)
    finished_detail: list = field(default_factory=list)  # terminal errors and object parameters


class PushEnv:
    """``n_envs`` pushing episodes stepped together, with auto-reset."""

    def __init__(self, n_envs: int, seed: int = 0, params: Optional[W.WorldParams] = None,
                 ranges: Optional[RandomizationRanges] = None, schedule: Optional[CurriculumSchedule] = None,
                 reward_cfg: Optional[RewardConfig] = None, curriculum: Optional[CurriculumState] = None,
                 terminate_on_success: bool = False, fixed_level: Optional[int] = None,
                 episode_seeds: Optional[list] = None):
        self.n = n_envs
        self.params = params or W.WorldParams()
        self.ranges = ranges or RandomizationRanges()
        self.schedule = schedule or CurriculumSchedule()
        self.reward_cfg = reward_cfg or RewardConfig(dt=self.params.control_dt)
        if curriculum is None:
            curriculum = CurriculumState(promote_threshold=self.schedule.promote_threshold,
                                         window_size=self.schedule.window_size, n_levels=self.schedule.n_levels)
        self.curriculum = curriculum
        self.terminate_on_success = terminate_on_success
        self.fixed_level = fixed_level
        self.proprioception = default_proprioception
        self.log_hook: Optional[Callable[[int, dict], None]] = None
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_envs)]
        if episode_seeds is not None:
            self.rngs = [np.random.default_rng(s) for s in episode_seeds]
        self.state: Optional[W.WorldState] = None

    # -- episode management
    def _level(self) -> int:
        return self.curriculum.level if self.fixed_level is None else self.fixed_level

    def _sample(self, i: int) -> tuple[W.WorldState, TaskGoal]:
        cur = CurriculumState(level=self._level())
        return reset_episode(self.rngs[i], cur, self.ranges, self.params, self.schedule)

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        samples = [self._sample(i) for i in range(self.n)]
        self.state = _stack_states([s for s, _ in samples])
        self.goal = TaskGoal(np.concatenate([g.p_cmd for _, g in samples]),
                             np.concatenate([g.yaw_cmd for _, g in samples]))
        self.gate = RewardGate.fresh(self.n)
        self.prev_cmd = W.Command(np.zeros((self.n, 3)), self.state.robot.foot_default.copy())
        self.prev_raw = W.Command(np.zeros((self.n, 3)), self.state.robot.foot_default.copy())
        self.succeeded = np.zeros(self.n, bool)
        self.ep_return = np.zeros(self.n)
        self.ep_len = np.zeros(self.n, dtype=np.int64)
        return self.observe()

    def _reset_one(self, i: int) -> None:
        s, g = self._sample(i)
        _write_env(self.state, i, s)
        self.goal.p_cmd[i] = g.p_cmd[0]
        self.goal.yaw_cmd[i] = g.yaw_cmd[0]
        self.gate.reset(i)
        self.prev_cmd.v_cmd[i] = 0.0
        self.prev_cmd.foot_cmd[i] = self.state.robot.foot_default[i]
        self.prev_raw.v_cmd[i] = 0.0
        self.prev_raw.foot_cmd[i] = self.state.robot.foot_default[i]
        self.succeeded[i] = False
        self.ep_return[i] = 0.0
        self.ep_len[i] = 0

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        actor = build_planner_obs(self.state, self.goal, self.prev_cmd, None, self.params, self.proprioception)
        priv = build_privileged_obs(self.state.box, self.state.contacts)
        return actor, np.concatenate([actor, priv], axis=1)

    # -- stepping
    def step(self, action: np.ndarray):
        """Apply normalized actions; returns (actor_obs, critic_obs, reward, done, info)."""
        raw = action_to_command(action, self.state.robot.foot_default)
        prev = self.state
        self.state, _ = W.step_world(prev, raw, self.params)
        breakdown, self.gate = planner_reward(prev, self.state, self.goal, self.prev_raw, raw, self.gate,
                                              self.reward_cfg, self.params)
        self.prev_raw = raw
        self.prev_cmd = W.clamp_command(raw, self.state.robot.foot_default)
        status = check_termination(self.state, self.goal)
        self.succeeded |= status == EpisodeStatus.SUCCESS
        reward = breakdown.total
        diverged = status == EpisodeStatus.DIVERGED
        reward = np.where(diverged, 0.0, reward)
        self.ep_return += reward
        self.ep_len += 1

        if self.log_hook is not None:
            for i in range(self.n):
                self.log_hook(i, self.tick_record(i, raw, breakdown, status, reward))

        end_status = status.copy()
        if not self.terminate_on_success:
            end_status[end_status == EpisodeStatus.SUCCESS] = EpisodeStatus.RUNNING
        done = end_status != EpisodeStatus.RUNNING
        timeout = end_status == EpisodeStatus.TIMEOUT
        _, terminal_critic = self.observe()
        info = StepInfo(status, breakdown, timeout, terminal_critic, [], [], [], int(diverged.sum()))
        for i in np.flatnonzero(done):
            outcome = EpisodeStatus.SUCCESS if self.succeeded[i] else EpisodeStatus(int(end_status[i]))
            info.finished_returns.append(float(self.ep_return[i]))
            info.finished_lengths.append(int(self.ep_len[i]))
            info.finished_outcomes.append(outcome)
            info.finished_index.append(int(i))
            info.finished_detail.append(self.episode_detail(i))
            if self.fixed_level is None:
                self.curriculum = curriculum_update(self.curriculum, outcome)
            self._reset_one(i)
        actor, critic = self.observe()
        return actor, critic, reward, done, info

    def episode_detail(self, i: int) -> dict:
        """Goal errors and object parameters of env ``i`` in its current state."""
        s, b = self.state, self.state.box
        pos_err, yaw_err = goal_errors(s, self.goal)
        return {
            "pos_error": float(pos_err[i]),
            "yaw_error": float(yaw_err[i]),
            "object": {
                "dims": b.dims[i].tolist(), "mass": float(b.mass[i]), "com": b.com[i].tolist(),
                "friction": float(b.friction[i]), "restitution": float(b.restitution[i]),
                "ground_friction": float(s.ground_friction[i]),
            },
        }

    def tick_record(self, i: int, raw: W.Command, breakdown: RewardBreakdown, status, reward=None) -> dict:
        s = self.state
        contacts, ground = [], []
        for c in s.contacts.to_list(i):
            rec = {
                "surface": c.surface_id.name.lower(),
                "point": c.point_world.tolist(),
                "force": c.force_world.tolist(),
                "penetration": c.penetration,
            }
            if c.foot_id is None:
                ground.append(rec)
            else:
                rec["foot"] = c.foot_id.name.lower()
                contacts.append(rec)
        return {
            "t": float(s.time[i]),
            "tick": int(s.tick[i]),
            "box": {
                "pos": s.box.pos[i].tolist(),
                "quat": s.box.quat[i].tolist(),
                "lin_vel": s.box.lin_vel[i].tolist(),
                "ang_vel": s.box.ang_vel[i].tolist(),
            },
            "robot": {"base": s.robot.base[i].tolist(), "feet": s.robot.foot_pos[i].tolist()},
            "contacts": contacts,  # foot-object contacts only
            "ground_contacts": ground,
            "reward": breakdown.record(i),
            "r": float(breakdown.total[i] if reward is None else reward[i]),
            "command": raw.flat()[i].tolist(),
            "status": EpisodeStatus(int(status[i])).name.lower(),
        }

    # -- persistence for exact resume
    def get_state(self) -> dict:
        s = self.state
        arrays = {}
        for part in ("box", "robot", "contacts"):
            for k, v in vars(getattr(s, part)).items():
                arrays[f"{part}.{k}"] = v
        for k in ("ground_friction", "time", "tick", "diverged"):
            arrays[k] = getattr(s, k)
        for f in fields(self.gate):
            arrays[f"gate.{f.name}"] = getattr(self.gate, f.name)
        arrays.update({
            "goal.p_cmd": self.goal.p_cmd, "goal.yaw_cmd": self.goal.yaw_cmd,
            "prev_cmd": self.prev_cmd.flat(), "prev_raw": self.prev_raw.flat(),
            "succeeded": self.succeeded, "ep_return": self.ep_return, "ep_len": self.ep_len,
        })
        return {
            "arrays": {k: np.asarray(v) for k, v in arrays.items()},
            "rngs": [r.bit_generator.state for r in self.rngs],
            "curriculum": {"level": self.curriculum.level, "window": [bool(x) for x in self.curriculum.window]},
        }

    def set_state(self, blob: dict) -> None:
        if self.state is None:
            self.reset()
        a = blob["arrays"]

        def load(obj, prefix):
            for k, v in vars(obj).items():
                setattr(obj, k, np.array(a[f"{prefix}.{k}"], dtype=v.dtype).reshape(v.shape))

        for part in ("box", "robot", "contacts"):
            load(getattr(self.state, part), part)
        for k in ("ground_friction", "time", "tick", "diverged"):
            v = getattr(self.state, k)
            setattr(self.state, k, np.array(a[k], dtype=v.dtype).reshape(v.shape))
        for f in fields(self.gate):
            v = getattr(self.gate, f.name)
            setattr(self.gate, f.name, np.array(a[f"gate.{f.name}"], dtype=v.dtype).reshape(v.shape))
        self.goal = TaskGoal(np.array(a["goal.p_cmd"]).reshape(self.n, 3), np.array(a["goal.yaw_cmd"]).reshape(self.n))
        self.prev_cmd = W.Command.from_flat(np.array(a["prev_cmd"]).reshape(self.n, 9))
        self.prev_raw = W.Command.from_flat(np.array(a["prev_raw"]).reshape(self.n, 9))
        self.succeeded = np.array(a["succeeded"], dtype=bool).reshape(self.n)
        self.ep_return = np.array(a["ep_return"], dtype=np.float64).reshape(self.n)
        self.ep_len = np.array(a["ep_len"], dtype=np.int64).reshape(self.n)
        for r, st in zip(self.rngs, blob["rngs"]):
            r.bit_generator.state = st
        self.curriculum = CurriculumState(blob["curriculum"]["level"], list(blob["curriculum"]["window"]),
                                          self.curriculum.promote_threshold, self.curriculum.window_size,
                                          self.curriculum.n_levels)
