"""Small 3-D geometry kernel.

Quaternions are stored as ``(w, x, y, z)`` float64 arrays. Every function
broadcasts over leading dimensions, so the same code serves a single pose
and a batch of ``N`` environments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


@dataclass
class Twist:
    linear: np.ndarray
    angular: np.ndarray


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def cross(a, b):
    """Cross product over the last axis (cheaper than ``np.cross`` on small batches)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(np.shape(a), np.shape(b)))
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_yaw(yaw):
    half = 0.5 * np.asarray(yaw, dtype=np.float64)
    z = np.zeros_like(half)
    return np.stack([np.cos(half), z, z, np.sin(half)], axis=-1)


def quat_from_euler(roll, pitch, yaw):
    """Intrinsic z-y'-x'' (yaw, then pitch, then roll) convention."""
    cr, sr = np.cos(0.5 * np.asarray(roll)), np.sin(0.5 * np.asarray(roll))
    cp, sp = np.cos(0.5 * np.asarray(pitch)), np.sin(0.5 * np.asarray(pitch))
    cy, sy = np.cos(0.5 * np.asarray(yaw)), np.sin(0.5 * np.asarray(yaw))
    return np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_to_euler(q):
    """Return (roll, pitch, yaw) for the z-y'-x'' convention."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.stack([roll, pitch, yaw], axis=-1)


def quat_rotate(q, v):
    """Rotate body-frame vectors ``v`` into the world frame."""
    qv = q[..., 1:]
    t = 2.0 * cross(qv, v)
    return v + q[..., :1] * t + cross(qv, t)


def quat_rotate_inverse(q, v):
    """Express world-frame vectors ``v`` in the body frame of ``q``."""
    qv = q[..., 1:]
    t = 2.0 * cross(qv, v)
    return v - q[..., :1] * t + cross(qv, t)


def yaw_of(q):
    """Heading of the body x-axis projected on the ground plane."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def world_to_frame(pose: Pose, point_world):
    return quat_rotate_inverse(pose.orientation, np.asarray(point_world) - pose.position)


def frame_to_world(pose: Pose, point_local):
    return quat_rotate(pose.orientation, np.asarray(point_local)) + pose.position


def yaw_error(a, b):
    """Signed yaw of ``a`` minus yaw of ``b``, wrapped to (-pi, pi]."""
    return wrap_angle(yaw_of(a) - yaw_of(b))


def projected_gravity(q):
    """World -z unit vector expressed in the frame of ``q``."""
    down = np.broadcast_to(-UP, np.shape(q)[:-1] + (3,))
    return quat_rotate_inverse(q, down)


def integrate_quat(q, omega_world, dt):
    """First-order update of ``q`` by world angular velocity, renormalized."""
    zeros = np.zeros(np.shape(omega_world)[:-1] + (1,))
    dq = quat_mul(np.concatenate([zeros, omega_world], axis=-1), q)
    return quat_normalize(q + 0.5 * dt * dq)
