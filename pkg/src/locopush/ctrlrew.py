"""Low-level controller reward terms over an 18-joint hexapod state.

Pure functions only; nothing here is simulated. The squared error of a
vector means the sum of its squared components.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import world as W

N_JOINTS = 18
N_LEGS = 6
N_FORELEGS = 2

CTRL_TERMS = (
    "tracking_xy",
    "tracking_z",
    "tracking_p",
    "leg_lift",
    "joint_deviation",
    "joint_acc",
    "torque",
    "action_rate",
    "velocity_penalty",
    "orientation",
)


@dataclass(frozen=True)
class CtrlRewardConfig:
    dt: float = 0.02
    w_tracking_xy: float = 2.0
    w_tracking_z: float = 1.0
    w_tracking_p: float = 2.0
    w_leg_lift: float = 0.5
    w_joint_deviation: float = -0.3
    w_joint_acc: float = -2.5e-7
    w_torque: float = -1e-5
    w_action_rate: float = -0.03
    w_velocity_penalty: float = -2.0
    w_orientation: float = -20.0
    tracking_sigma: float = 0.25
    foot_sigma: float = 0.3
    lift_low: float = 0.1
    lift_high: float = 1.0

    def weight(self, term: str) -> float:
        return getattr(self, "w_" + term) * self.dt


@dataclass
class CtrlState:
    omega: np.ndarray
    g: np.ndarray
    q: np.ndarray
    q_vel: np.ndarray
    q_vel_prev: np.ndarray
    tau: np.ndarray
    q_default: np.ndarray
    v: np.ndarray
    v_cmd: np.ndarray  # (vx, vy, wz)
    foot_pos: np.ndarray  # (2, 3) forelegs
    foot_cmd: np.ndarray
    foot_normal_force: np.ndarray  # per leg in the selected set
    a_c: np.ndarray
    a_c_prev: np.ndarray
    dt: float = 0.02

    @classmethod
    def ideal(cls, n_legs: int = N_LEGS) -> "CtrlState":
        """Upright, perfectly tracking state with every penalty at zero."""
        z = np.zeros(N_JOINTS)
        feet = np.array(W.DEFAULT_FOOT_POS)
        return cls(
            omega=np.zeros(3), g=np.array([0.0, 0.0, -1.0]), q=z.copy(), q_vel=z.copy(),
            q_vel_prev=z.copy(), tau=z.copy(), q_default=z.copy(), v=np.zeros(3),
            v_cmd=np.zeros(3), foot_pos=feet.copy(), foot_cmd=feet.copy(),
            foot_normal_force=np.full(n_legs, 0.5), a_c=z.copy(), a_c_prev=z.copy(),
        )


_SHAPES = {
    "omega": (3,), "g": (3,), "q": (N_JOINTS,), "q_vel": (N_JOINTS,), "q_vel_prev": (N_JOINTS,),
    "tau": (N_JOINTS,), "q_default": (N_JOINTS,), "v": (3,), "v_cmd": (3,),
    "foot_pos": (N_FORELEGS, 3), "foot_cmd": (N_FORELEGS, 3),
    "a_c": (N_JOINTS,), "a_c_prev": (N_JOINTS,),
}


def validate_state(s: CtrlState) -> None:
    for name, shape in _SHAPES.items():
        arr = np.asarray(getattr(s, name), dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    f = np.asarray(s.foot_normal_force, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError(f"foot_normal_force: expected a non-empty 1-D array, got shape {f.shape}")
    if not s.dt > 0:
        raise ValueError(f"dt: must be positive, got {s.dt}")


@dataclass
class CtrlRewardBreakdown:
    raw: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    total: float = 0.0


def leg_lift(force, low: float = 0.1, high: float = 1.0, legs: Optional[Sequence[int]] = None) -> float:
    """Sum over the selected legs of bool[F < low] - bool[F > high]."""
    f = np.asarray(force, dtype=np.float64)
    if legs is not None:
        f = f[list(legs)]
    return float(np.sum((f < low).astype(np.float64) - (f > high).astype(np.float64)))


def controller_reward(s: CtrlState, cfg: Optional[CtrlRewardConfig] = None,
                      legs: Optional[Sequence[int]] = None) -> CtrlRewardBreakdown:
    cfg = cfg or CtrlRewardConfig()
    validate_state(s)
    a = {f.name: np.asarray(getattr(s, f.name), dtype=np.float64) for f in fields(s) if f.name != "dt"}

    raw = {}
    e_xy = a["v_cmd"][:2] - a["v"][:2]
    raw["tracking_xy"] = float(np.exp(-np.dot(e_xy, e_xy) / cfg.tracking_sigma))
    e_z = a["v_cmd"][2] - a["omega"][2]
    raw["tracking_z"] = float(np.exp(-e_z * e_z / cfg.tracking_sigma))
    dist = np.linalg.norm(a["foot_cmd"] - a["foot_pos"], axis=-1)
    raw["tracking_p"] = float(np.mean(np.exp(-dist / cfg.foot_sigma)))
    raw["leg_lift"] = leg_lift(a["foot_normal_force"], cfg.lift_low, cfg.lift_high, legs)
    raw["joint_deviation"] = float(np.sum((a["q"] - a["q_default"]) ** 2))
    raw["joint_acc"] = float(np.sum(((a["q_vel"] - a["q_vel_prev"]) / s.dt) ** 2))
    raw["torque"] = float(np.sum(a["tau"] ** 2))
    raw["action_rate"] = float(np.sum((a["a_c"] - a["a_c_prev"]) ** 2))
    raw["velocity_penalty"] = float(a["v"][2] ** 2)
    raw["orientation"] = float(np.sum(a["g"][:2] ** 2))

    weighted = {k: cfg.weight(k) * raw[k] for k in CTRL_TERMS}
    total = float(sum(weighted[k] for k in CTRL_TERMS))
    return CtrlRewardBreakdown(raw, weighted, total)


def validate_command(c: W.Command, defaults=W.DEFAULT_FOOT_POS) -> tuple[W.Command, list[str]]:
    """Clamp like ``world.clamp_command`` and list the constraints that fired."""
    out, fired = W._clamp(c, defaults)
    report = [name for name, hit in fired.items() if np.any(hit)]
    return out, report
