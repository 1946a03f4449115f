"""Box-pushing physics: a dynamic box, a kinematic robot plant, penalty contacts.

All state is batched along a leading environment axis ``N``; a single
environment is simply ``N == 1``. The robot base is kinematic: contact
forces act on the box only.

Contact convention: ``normal`` points out of the box surface toward the other
body (foot or ground), ``force`` is the force applied *to the box*.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import geom

VEL_LOW = np.array([0.0, -0.3, -1.0])
VEL_HIGH = np.array([0.5, 0.3, 1.0])
FOOT_DELTA_LOW = np.array([-0.25, -0.1, -0.2])
FOOT_DELTA_HIGH = np.array([0.25, 0.2, 0.2])
MIN_FOOT_SEPARATION = 0.15

DEFAULT_FOOT_POS = ((0.35, 0.15, -0.15), (0.35, -0.15, -0.15))

# Bottom corners of a unit box, in half-extent units.
_BOTTOM_CORNERS = np.array(
    [[1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, -1.0]]
)


class SurfaceId(enum.IntEnum):
    BOX_NEG_X = 0
    BOX_POS_X = 1
    BOX_NEG_Y = 2
    BOX_POS_Y = 3
    BOX_NEG_Z = 4
    BOX_POS_Z = 5
    GROUND = 6


class FootId(enum.IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass
class WorldParams:
    gravity: float = 9.81
    ground_friction: float = 0.6
    contact_stiffness: float = 1.0e5
    # Multiplies the damping ratio derived from the object restitution.
    contact_damping: float = 1.0
    # Added to the object restitution before deriving the damping ratio; offsets
    # the rebound speed lost to gravity while the soft contact is compressed.
    restitution_bias: float = 0.015
    max_damping_ratio: float = 1.5
    foot_radius: float = 0.02
    substeps_per_tick: int = 10
    control_dt: float = 0.02
    base_height: float = 0.30
    tau_base: float = 0.15
    tau_foot: float = 0.10
    foot_default: tuple = DEFAULT_FOOT_POS

    def __post_init__(self):
        if self.substeps_per_tick < 1:
            raise ValueError("substeps_per_tick must be >= 1")
        if self.control_dt <= 0:
            raise ValueError("control_dt must be positive")

    @property
    def substep_dt(self) -> float:
        return self.control_dt / self.substeps_per_tick


@dataclass
class Command:
    v_cmd: np.ndarray  # (..., 3): vx, vy, yaw rate
    foot_cmd: np.ndarray  # (..., 2, 3): left, right, base frame

    def flat(self) -> np.ndarray:
        lead = self.v_cmd.shape[:-1]
        return np.concatenate([self.v_cmd, self.foot_cmd.reshape(lead + (6,))], axis=-1)

    @classmethod
    def from_flat(cls, c) -> "Command":
        c = np.asarray(c, dtype=np.float64)
        return cls(c[..., :3].copy(), c[..., 3:9].reshape(c.shape[:-1] + (2, 3)).copy())


@dataclass
class BoxObject:
    dims: np.ndarray  # (N, 3) full extents
    mass: np.ndarray  # (N,)
    com: np.ndarray  # (N, 3) body-frame offset of the COM from the geometric center
    inertia: np.ndarray  # (N, 3, 3) about the COM, body frame
    friction: np.ndarray  # (N,)
    restitution: np.ndarray  # (N,)
    pos: np.ndarray  # (N, 3) geometric center, world
    quat: np.ndarray  # (N, 4)
    lin_vel: np.ndarray  # (N, 3) COM velocity, world
    ang_vel: np.ndarray  # (N, 3) world

    @property
    def pose(self) -> geom.Pose:
        return geom.Pose(self.pos, self.quat)

    @property
    def twist(self) -> geom.Twist:
        return geom.Twist(self.lin_vel, self.ang_vel)

    def com_world(self) -> np.ndarray:
        return self.pos + geom.quat_rotate(self.quat, self.com)

    def copy(self) -> "BoxObject":
        return BoxObject(**{k: np.array(v, copy=True) for k, v in vars(self).items()})


def cuboid_inertia(dims, mass, com):
    """Uniform cuboid inertia about the point ``com`` (parallel-axis shift)."""
    dims = np.asarray(dims, dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    com = np.asarray(com, dtype=np.float64)
    sq = dims**2
    diag = np.stack([sq[..., 1] + sq[..., 2], sq[..., 0] + sq[..., 2], sq[..., 0] + sq[..., 1]], axis=-1)
    inertia = np.zeros(dims.shape[:-1] + (3, 3))
    idx = np.arange(3)
    inertia[..., idx, idx] = mass[..., None] * diag / 12.0
    shift = np.sum(com**2, axis=-1)[..., None, None] * np.eye(3) - com[..., :, None] * com[..., None, :]
    return inertia + mass[..., None, None] * shift


def make_box(dims, mass, com=(0.0, 0.0, 0.0), friction=0.5, restitution=0.0,
             pos=None, yaw=0.0, params: Optional[WorldParams] = None) -> BoxObject:
    """Build a batch-of-one (or batched) box resting on the ground at equilibrium depth."""
    dims = np.atleast_2d(np.asarray(dims, dtype=np.float64))
    n = dims.shape[0]
    mass = np.broadcast_to(np.asarray(mass, dtype=np.float64), (n,)).copy()
    com = np.broadcast_to(np.asarray(com, dtype=np.float64), (n, 3)).copy()
    params = params or WorldParams()
    if pos is None:
        sink = mass * params.gravity / (4.0 * params.contact_stiffness)
        pos = np.stack([np.zeros(n), np.zeros(n), 0.5 * dims[:, 2] - sink], axis=-1)
    pos = np.broadcast_to(np.asarray(pos, dtype=np.float64), (n, 3)).copy()
    return BoxObject(
        dims=dims,
        mass=mass,
        com=com,
        inertia=cuboid_inertia(dims, mass, com),
        friction=np.broadcast_to(np.asarray(friction, dtype=np.float64), (n,)).copy(),
        restitution=np.broadcast_to(np.asarray(restitution, dtype=np.float64), (n,)).copy(),
        pos=pos,
        quat=geom.quat_from_yaw(np.broadcast_to(np.asarray(yaw, dtype=np.float64), (n,))),
        lin_vel=np.zeros((n, 3)),
        ang_vel=np.zeros((n, 3)),
    )


@dataclass
class RobotPlant:
    base: np.ndarray  # (N, 3): x, y, yaw
    base_vel: np.ndarray  # (N, 3): vx, vy, yaw rate in the base frame
    foot_pos: np.ndarray  # (N, 2, 3) base frame
    foot_vel: np.ndarray  # (N, 2, 3)
    foot_default: np.ndarray  # (N, 2, 3)
    tau_base: np.ndarray  # (N,)
    tau_foot: np.ndarray  # (N,)

    def copy(self) -> "RobotPlant":
        return RobotPlant(**{k: np.array(v, copy=True) for k, v in vars(self).items()})


def make_robot(n: int = 1, params: Optional[WorldParams] = None) -> RobotPlant:
    params = params or WorldParams()
    default = np.broadcast_to(np.asarray(params.foot_default, dtype=np.float64), (n, 2, 3)).copy()
    return RobotPlant(
        base=np.zeros((n, 3)),
        base_vel=np.zeros((n, 3)),
        foot_pos=default.copy(),
        foot_vel=np.zeros((n, 2, 3)),
        foot_default=default,
        tau_base=np.full(n, params.tau_base),
        tau_foot=np.full(n, params.tau_foot),
    )


@dataclass
class Contact:
    point_world: np.ndarray
    normal_world: np.ndarray
    force_world: np.ndarray
    penetration: float
    surface_id: SurfaceId
    foot_id: Optional[FootId] = None


@dataclass
class ContactSet:
    """Batched contacts: 4 ground corners then 2 feet per environment."""

    active: np.ndarray  # (N, 6) bool
    point: np.ndarray  # (N, 6, 3)
    normal: np.ndarray  # (N, 6, 3)
    force: np.ndarray  # (N, 6, 3)
    penetration: np.ndarray  # (N, 6)
    surface: np.ndarray  # (N, 6) int

    @classmethod
    def empty(cls, n: int) -> "ContactSet":
        surface = np.full((n, 6), int(SurfaceId.GROUND))
        return cls(np.zeros((n, 6), bool), np.zeros((n, 6, 3)), np.zeros((n, 6, 3)),
                   np.zeros((n, 6, 3)), np.zeros((n, 6)), surface)

    def foot_contact(self) -> np.ndarray:
        """(N, 2) flags: left/right foot touching a box face."""
        return self.active[:, 4:6].copy()

    def to_list(self, i: int) -> list[Contact]:
        out = []
        for j in np.flatnonzero(self.active[i]):
            out.append(Contact(
                point_world=self.point[i, j].copy(),
                normal_world=self.normal[i, j].copy(),
                force_world=self.force[i, j].copy(),
                penetration=float(self.penetration[i, j]),
                surface_id=SurfaceId(int(self.surface[i, j])),
                foot_id=FootId(j - 4) if j >= 4 else None,
            ))
        return out

    def copy(self) -> "ContactSet":
        return ContactSet(**{k: np.array(v, copy=True) for k, v in vars(self).items()})


@dataclass
class WorldState:
    box: BoxObject
    robot: RobotPlant
    ground_friction: np.ndarray  # (N,)
    time: np.ndarray  # (N,)
    tick: np.ndarray  # (N,) int
    contacts: ContactSet = None
    diverged: np.ndarray = None

    def __post_init__(self):
        n = self.n
        if self.contacts is None:
            self.contacts = ContactSet.empty(n)
        if self.diverged is None:
            self.diverged = np.zeros(n, bool)

    @property
    def n(self) -> int:
        return self.box.mass.shape[0]

    def copy(self) -> "WorldState":
        return WorldState(
            box=self.box.copy(),
            robot=self.robot.copy(),
            ground_friction=self.ground_friction.copy(),
            time=self.time.copy(),
            tick=self.tick.copy(),
            contacts=self.contacts.copy(),
            diverged=self.diverged.copy(),
        )


def make_world(box: BoxObject, robot: Optional[RobotPlant] = None,
               params: Optional[WorldParams] = None, ground_friction=None) -> WorldState:
    params = params or WorldParams()
    n = box.mass.shape[0]
    robot = robot if robot is not None else make_robot(n, params)
    gf = params.ground_friction if ground_friction is None else ground_friction
    return WorldState(box=box, robot=robot,
                      ground_friction=np.broadcast_to(np.asarray(gf, dtype=np.float64), (n,)).copy(),
                      time=np.zeros(n), tick=np.zeros(n, dtype=np.int64))


# ---------------------------------------------------------------- commands

_CMD_FIELDS = ["v_cmd.vx", "v_cmd.vy", "v_cmd.yaw_rate"] + [
    f"foot_cmd.{side}.{ax}" for side in ("left", "right") for ax in "xyz"
]


def _clamp(raw: Command, defaults) -> tuple[Command, dict[str, np.ndarray]]:
    flat = raw.flat()
    bad = ~np.isfinite(flat)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise ValueError(f"non-finite command component {_CMD_FIELDS[idx[-1]]} at index {tuple(idx)}")
    defaults = np.asarray(defaults, dtype=np.float64)
    v = np.clip(raw.v_cmd, VEL_LOW, VEL_HIGH)
    lo = defaults + FOOT_DELTA_LOW
    hi = defaults + FOOT_DELTA_HIGH
    foot = np.clip(raw.foot_cmd, lo, hi)
    fired = {
        "v_cmd.vx": v[..., 0] != raw.v_cmd[..., 0],
        "v_cmd.vy": v[..., 1] != raw.v_cmd[..., 1],
        "v_cmd.yaw_rate": v[..., 2] != raw.v_cmd[..., 2],
    }
    for s, side in enumerate(("left", "right")):
        for a, ax in enumerate("xyz"):
            fired[f"foot_cmd.{side}.{ax}"] = foot[..., s, a] != raw.foot_cmd[..., s, a]
    # Lateral separation last: spread both targets about their midpoint.
    left_y = foot[..., 0, 1]
    right_y = foot[..., 1, 1]
    violated = right_y > left_y - MIN_FOOT_SEPARATION
    mid = 0.5 * (left_y + right_y)
    new_left = mid + 0.5 * MIN_FOOT_SEPARATION
    foot[..., 0, 1] = np.where(violated, new_left, left_y)
    foot[..., 1, 1] = np.where(violated, new_left - MIN_FOOT_SEPARATION, right_y)
    fired["foot_separation"] = violated
    return Command(v, foot), fired


def clamp_command(raw: Command, defaults) -> Command:
    """Project a raw command onto the feasible command set."""
    return _clamp(raw, defaults)[0]


def command_limit_violation(raw: Command, defaults) -> np.ndarray:
    """Sum of hinge violations of the box bounds (velocity and foot offsets)."""
    defaults = np.asarray(defaults, dtype=np.float64)
    v = raw.v_cmd
    pv = np.maximum(VEL_LOW - v, 0.0) + np.maximum(v - VEL_HIGH, 0.0)
    d = raw.foot_cmd - defaults
    pf = np.maximum(FOOT_DELTA_LOW - d, 0.0) + np.maximum(d - FOOT_DELTA_HIGH, 0.0)
    return pv.sum(axis=-1) + pf.sum(axis=(-1, -2))


# ---------------------------------------------------------------- plant

def step_plant(robot: RobotPlant, cmd: Command, dt: float) -> RobotPlant:
    """First-order tracking of the (already clamped) command."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    a_base = np.minimum(dt / robot.tau_base, 1.0)[:, None]
    vel = robot.base_vel + a_base * (cmd.v_cmd - robot.base_vel)
    yaw = robot.base[:, 2]
    c, s = np.cos(yaw), np.sin(yaw)
    base = robot.base.copy()
    base[:, 0] += (c * vel[:, 0] - s * vel[:, 1]) * dt
    base[:, 1] += (s * vel[:, 0] + c * vel[:, 1]) * dt
    base[:, 2] = geom.wrap_angle(yaw + vel[:, 2] * dt)
    a_foot = np.minimum(dt / robot.tau_foot, 1.0)[:, None, None]
    foot = robot.foot_pos + a_foot * (cmd.foot_cmd - robot.foot_pos)
    return RobotPlant(
        base=base,
        base_vel=vel,
        foot_pos=foot,
        foot_vel=(foot - robot.foot_pos) / dt,
        foot_default=robot.foot_default,
        tau_base=robot.tau_base,
        tau_foot=robot.tau_foot,
    )


def base_pose(robot: RobotPlant, params: WorldParams) -> geom.Pose:
    n = robot.base.shape[0]
    pos = np.stack([robot.base[:, 0], robot.base[:, 1], np.full(n, params.base_height)], axis=-1)
    return geom.Pose(pos, geom.quat_from_yaw(robot.base[:, 2]))


def feet_world(robot: RobotPlant, params: WorldParams) -> np.ndarray:
    """(N, 2, 3) foot positions in the world frame."""
    pose = base_pose(robot, params)
    q = np.repeat(pose.orientation[:, None, :], 2, axis=1)
    return geom.quat_rotate(q, robot.foot_pos) + pose.position[:, None, :]


# ---------------------------------------------------------------- contact geometry

def _sphere_box(p_local, radius, half):
    """Sphere-vs-box query in box coordinates.

    Returns (hit, penetration, normal_local, surface_point_local, face) with
    ``face`` a SurfaceId code (axis * 2 + positive side).
    """
    q = np.clip(p_local, -half, half)
    d = p_local - q
    dist = np.linalg.norm(d, axis=-1)
    outside = dist > 0.0
    # Outside: nearest-point normal, face = axis of largest excess.
    n_out = d / np.where(outside, dist, 1.0)[..., None]
    axis_out = np.argmax(np.abs(d), axis=-1)
    # Inside: the face closest to the center.
    depth = half - np.abs(p_local)
    axis_in = np.argmin(depth, axis=-1)
    depth_min = np.min(depth, axis=-1)
    axis = np.where(outside, axis_out, axis_in)[..., None]
    positive = np.take_along_axis(p_local, axis, axis=-1)[..., 0] >= 0.0
    sign = np.where(positive, 1.0, -1.0)[..., None]
    n_in = np.zeros_like(p_local)
    np.put_along_axis(n_in, axis, sign, axis=-1)
    on_face = p_local.copy()
    np.put_along_axis(on_face, axis, sign * np.take_along_axis(np.broadcast_to(half, p_local.shape), axis, axis=-1), axis=-1)
    normal = np.where(outside[..., None], n_out, n_in)
    point = np.where(outside[..., None], q, on_face)
    pen = np.where(outside, radius - dist, radius + depth_min)
    face = axis[..., 0] * 2 + positive.astype(np.int64)
    return pen > 0.0, np.maximum(pen, 0.0), normal, point, face


def foot_box_contact(foot_world, radius: float, box: BoxObject, index: int = 0) -> Optional[Contact]:
    """Sphere-vs-box test for one environment of ``box``; None when separated."""
    half = 0.5 * box.dims[index]
    q = box.quat[index]
    p_local = geom.quat_rotate_inverse(q, np.asarray(foot_world, dtype=np.float64) - box.pos[index])
    hit, pen, n_local, closest, face = _sphere_box(p_local, radius, half)
    if not hit:
        return None
    return Contact(
        point_world=geom.quat_rotate(q, closest) + box.pos[index],
        normal_world=geom.quat_rotate(q, n_local),
        force_world=np.zeros(3),
        penetration=float(pen),
        surface_id=SurfaceId(int(face)),
    )


# ---------------------------------------------------------------- contact forces

def _cor_closed_form(zeta):
    """Restitution of a clamped linear spring-damper, ``F = max(0, k x + c v)``.

    Analytic in the damping ratio: the bodies separate when the force first
    reaches zero during restitution.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    out = np.empty_like(zeta)
    under = zeta < 1.0
    z = zeta[under]
    b = np.sqrt(1.0 - z * z)
    s = np.pi - np.arctan2(2.0 * z * b, 1.0 - 2.0 * z * z)
    out[under] = np.exp(-z * s / b) * np.abs(np.cos(s) - z / b * np.sin(s))
    z = zeta[~under]
    root = np.sqrt(np.maximum(z * z - 1.0, 0.0))
    crit = root < 1e-9
    root = np.where(crit, 1.0, root)
    a, bb = -z + root, -z - root
    t = np.log((1.0 + 2.0 * z * bb) / (1.0 + 2.0 * z * a)) / (a - bb)
    vel = (a * np.exp(a * t) - bb * np.exp(bb * t)) / (a - bb)
    out[~under] = np.where(crit, np.exp(-2.0), np.abs(vel))
    return out


@functools.lru_cache(maxsize=1)
def _cor_table():
    zeta = np.concatenate([np.linspace(0.0, 0.999, 2000), np.linspace(1.0, 10.0, 2000)[1:]])
    return zeta, _cor_closed_form(zeta)


def damping_ratio(restitution, cap: float = np.inf):
    """Damping ratio whose clamped spring-damper rebound equals ``restitution``."""
    zeta, cor = _cor_table()
    e = np.clip(np.asarray(restitution, dtype=np.float64), cor[-1], 1.0)
    # cor is decreasing in zeta
    return np.minimum(np.interp(e, cor[::-1], zeta[::-1]), cap)


def _normal_and_friction(pen, n, v_rel, k, c, mu, demand_mass, dt):
    """Spring-damper normal force plus Coulomb-clamped tangential force on the box.

    ``v_rel`` is the box contact-point velocity relative to the other body and
    ``demand_mass`` the mass whose tangential motion the friction would stop
    within ``dt``.
    """
    v_n = np.sum(v_rel * n, axis=-1)
    f_n = np.where(pen > 0.0, np.maximum(0.0, k * pen + c * v_n), 0.0)
    v_t = v_rel - v_n[..., None] * n
    speed = np.linalg.norm(v_t, axis=-1)
    demand = demand_mass * speed / dt
    f_t_mag = np.minimum(demand, mu * f_n)
    t_hat = v_t / np.where(speed > 0.0, speed, 1.0)[..., None]
    return f_n, -f_t_mag[..., None] * t_hat


def penalty_force(c: Contact, rel_vel_world, params: WorldParams, friction: float,
                  restitution: float, eff_mass: float = 1.0, dt: Optional[float] = None) -> np.ndarray:
    """Force on the box from one penalty contact.

    ``rel_vel_world`` is the box point velocity relative to the other body;
    the tangential part is opposed with the force needed to stop ``eff_mass``
    within one substep, clamped to the friction cone.
    """
    dt = params.substep_dt if dt is None else dt
    k = params.contact_stiffness
    zeta = params.contact_damping * damping_ratio(restitution + params.restitution_bias, params.max_damping_ratio)
    damp = 2.0 * zeta * np.sqrt(k * eff_mass)
    damp = damp / (1.0 + dt * damp / eff_mass)  # backward-Euler damping, as in the simulator
    n = np.asarray(c.normal_world, dtype=np.float64)
    f_n, f_t = _normal_and_friction(np.float64(c.penetration), n, np.asarray(rel_vel_world, dtype=np.float64),
                                    k, damp, friction, eff_mass, dt)
    return -f_n * n + f_t


# ---------------------------------------------------------------- dynamics

def _inv_eff_mass(r, d, inv_mass, inv_inertia_w):
    """1/m + (r x d) . I^-1 (r x d) for unit directions ``d``."""
    rxd = geom.cross(r, d)
    ang = np.sum(rxd * (inv_inertia_w[:, None] @ rxd[..., None])[..., 0], axis=-1)
    return inv_mass + ang


def _substep(state: WorldState, cmd: Command, params: WorldParams, dt: float,
             inv_inertia: np.ndarray, feet_old: np.ndarray) -> np.ndarray:
    box, k = state.box, params.contact_stiffness
    n = state.n
    state.robot = step_plant(state.robot, cmd, dt)
    feet_new = feet_world(state.robot, params)
    feet_vel = (feet_new - feet_old) / dt

    rot = geom.quat_to_matrix(box.quat)
    com_w = box.pos + geom.quat_rotate(box.quat, box.com)
    inv_inertia_w = rot @ inv_inertia @ np.swapaxes(rot, -1, -2)
    inertia_w = rot @ box.inertia @ np.swapaxes(rot, -1, -2)
    inv_mass = 1.0 / box.mass

    half = 0.5 * box.dims
    corners_local = _BOTTOM_CORNERS[None] * half[:, None, :]
    q4 = np.repeat(box.quat[:, None, :], 4, axis=1)
    corners_w = geom.quat_rotate(q4, corners_local) + box.pos[:, None, :]
    pen_g = np.maximum(-corners_w[..., 2], 0.0)
    active_g = pen_g > 0.0
    n_g = np.broadcast_to(np.array([0.0, 0.0, -1.0]), (n, 4, 3))

    q2 = np.repeat(box.quat[:, None, :], 2, axis=1)
    p_local = geom.quat_rotate_inverse(q2, feet_new - box.pos[:, None, :])
    hit_f, pen_f, nl_f, cl_f, face_f = _sphere_box(p_local, params.foot_radius, half[:, None, :])
    n_f = geom.quat_rotate(q2, nl_f)
    pts_f = geom.quat_rotate(q2, cl_f) + box.pos[:, None, :]

    active = np.concatenate([active_g, hit_f], axis=1)
    pen = np.concatenate([pen_g, pen_f], axis=1)
    normal = np.concatenate([n_g, n_f], axis=1)
    points = np.concatenate([corners_w, pts_f], axis=1)
    points[:, :4, 2] = np.where(active_g, 0.0, points[:, :4, 2])
    pen = np.where(active, pen, 0.0)
    r = np.concatenate([corners_w, pts_f], axis=1) - com_w[:, None, :]
    other_vel = np.concatenate([np.zeros((n, 4, 3)), feet_vel], axis=1)

    n_ground = np.maximum(active_g.sum(axis=1), 1)
    n_all = np.maximum(active.sum(axis=1), 1)
    m_normal = np.concatenate([
        np.repeat((box.mass / n_ground)[:, None], 4, axis=1),
        1.0 / _inv_eff_mass(r[:, 4:], n_f, inv_mass[:, None], inv_inertia_w),
    ], axis=1)
    zeta = params.contact_damping * damping_ratio(box.restitution + params.restitution_bias, params.max_damping_ratio)
    damp = 2.0 * zeta[:, None] * np.sqrt(k * m_normal)
    mu = np.concatenate([
        np.repeat((0.5 * (box.friction + state.ground_friction))[:, None], 4, axis=1),
        np.repeat(box.friction[:, None], 2, axis=1),
    ], axis=1)

    gravity = np.array([0.0, 0.0, -params.gravity])
    gyro = geom.cross(box.ang_vel, (inertia_w @ box.ang_vel[..., None])[..., 0])

    # Damping is implicit and coupled across the env's contacts: explicit damping
    # with a stiff enough c diverges in the rocking modes of flat boxes.
    f_spring = -np.where(active, k * pen, 0.0)[..., None] * normal
    v_pre = box.lin_vel + dt * inv_mass[:, None] * (box.mass[:, None] * gravity + f_spring.sum(axis=1))
    w_pre = box.ang_vel + dt * (inv_inertia_w @ (geom.cross(r, f_spring).sum(axis=1) - gyro)[..., None])[..., 0]
    v_n_pre = np.sum((v_pre[:, None, :] + geom.cross(w_pre[:, None, :], r) - other_vel) * normal, axis=-1)
    rxn = geom.cross(r, normal)
    a_mat = inv_mass[:, None, None] * (normal @ np.swapaxes(normal, -1, -2))
    a_mat = a_mat + rxn @ inv_inertia_w @ np.swapaxes(rxn, -1, -2)
    c_act = np.where(active, damp, 0.0)
    lhs = np.eye(6) + dt * c_act[..., None] * a_mat
    f_damp = np.linalg.solve(lhs, (c_act * v_n_pre)[..., None])[..., 0]
    f_n = np.where(active, np.maximum(0.0, k * pen + f_damp), 0.0)
    f_normal = -f_n[..., None] * normal

    force = box.mass[:, None] * gravity + f_normal.sum(axis=1)
    torque = geom.cross(r, f_normal).sum(axis=1)
    v_pred = box.lin_vel + dt * inv_mass[:, None] * force
    w_pred = box.ang_vel + dt * (inv_inertia_w @ (torque - gyro)[..., None])[..., 0]

    v_rel_pred = v_pred[:, None, :] + geom.cross(w_pred[:, None, :], r) - other_vel
    v_np = np.sum(v_rel_pred * normal, axis=-1)
    v_t = v_rel_pred - v_np[..., None] * normal
    speed = np.linalg.norm(v_t, axis=-1)
    t_hat = v_t / np.where(speed > 0.0, speed, 1.0)[..., None]
    m_t = 1.0 / _inv_eff_mass(r, t_hat, inv_mass[:, None], inv_inertia_w)
    demand = m_t * speed / (dt * n_all[:, None])
    f_t = -np.where(active, np.minimum(demand, mu * f_n), 0.0)[..., None] * t_hat

    force = force + f_t.sum(axis=1)
    torque = torque + geom.cross(r, f_t).sum(axis=1)
    box.lin_vel = box.lin_vel + dt * inv_mass[:, None] * force
    box.ang_vel = box.ang_vel + dt * (inv_inertia_w @ (torque - gyro)[..., None])[..., 0]
    com_w = com_w + dt * box.lin_vel
    box.quat = geom.integrate_quat(box.quat, box.ang_vel, dt)
    box.pos = com_w - geom.quat_rotate(box.quat, box.com)

    surface = np.concatenate([np.full((n, 4), int(SurfaceId.GROUND)), face_f], axis=1)
    state.contacts = ContactSet(
        active=active,
        point=points,
        normal=np.where(active[..., None], normal, 0.0),
        force=f_normal + f_t,
        penetration=pen,
        surface=surface,
    )
    return feet_new


def step_world(state: WorldState, raw_cmd: Command, params: WorldParams) -> tuple[WorldState, ContactSet]:
    """Advance every environment by one control tick (``substeps_per_tick`` substeps)."""
    cmd = clamp_command(raw_cmd, state.robot.foot_default)
    new = state.copy()
    dt = params.substep_dt
    inv_inertia = np.linalg.inv(new.box.inertia)
    feet = feet_world(new.robot, params)
    for _ in range(params.substeps_per_tick):
        feet = _substep(new, cmd, params, dt, inv_inertia, feet)
    new.tick = new.tick + 1
    new.time = new.tick * params.control_dt
    finite = np.ones(new.n, bool)
    for arr in (new.box.pos, new.box.quat, new.box.lin_vel, new.box.ang_vel):
        finite &= np.isfinite(arr).all(axis=-1)
    new.diverged = new.diverged | ~finite
    return new, new.contacts


def box_energy(state: WorldState, params: WorldParams) -> np.ndarray:
    """Kinetic + gravitational energy of each box plus elastic ground-contact energy."""
    box = state.box
    rot = geom.quat_to_matrix(box.quat)
    inertia_w = rot @ box.inertia @ np.swapaxes(rot, -1, -2)
    ke = 0.5 * box.mass * np.sum(box.lin_vel**2, axis=-1)
    ke += 0.5 * np.einsum("ni,nij,nj->n", box.ang_vel, inertia_w, box.ang_vel)
    pe = box.mass * params.gravity * box.com_world()[:, 2]
    half = 0.5 * box.dims
    corners = geom.quat_rotate(np.repeat(box.quat[:, None], 4, axis=1), _BOTTOM_CORNERS[None] * half[:, None]) + box.pos[:, None]
    spring = 0.5 * params.contact_stiffness * np.sum(np.maximum(-corners[..., 2], 0.0) ** 2, axis=1)
    return ke + pe + spring
