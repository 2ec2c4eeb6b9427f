"""6-DoF camera-state algebra, trajectory composition and KITTI pose files.

Rotations use the intrinsic ZYX convention, ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
Poses are camera-to-world; the relative motion between two absolute poses
``a`` and ``b`` is ``inverse(a) @ b``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import GimbalLockError, InvalidRotationError, ParseError

ORTHO_TOL = 1e-9
REPAIR_TOL = 1e-4
GIMBAL_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class EulerPose6D:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite pose component in {values.tolist()}")
        for name in ("roll", "pitch", "yaw"):
            a = getattr(self, name)
            if not (-math.pi < a <= math.pi):
                raise ValueError(f"{name}={a!r} outside (-pi, pi]")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "EulerPose6D":
        if len(values) != 6:
            raise ValueError(f"expected 6 pose components, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])

    def __getitem__(self, index: int) -> float:
        return float(self.as_array()[index])


DOF_NAMES = ("x", "y", "z", "roll", "pitch", "yaw")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidRotationError("non-finite transform entries")
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err >= ORTHO_TOL:
            raise InvalidRotationError(f"rotation not orthonormal (max |R^T R - I| = {err:.3g})")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise InvalidRotationError("rotation is a reflection")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        """Build from a 3x4 or 4x4 ``[R|t]`` matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "RigidTransform", atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class Trajectory:
    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("trajectory must contain at least one pose")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, k):
        return self.poses[k]

    def __iter__(self):
        return iter(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def transformed(self, g: RigidTransform) -> "Trajectory":
        """Apply the rigid change of world frame ``g`` to every pose."""
        return Trajectory(tuple(compose(g, p) for p in self.poses))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_transform(p: EulerPose6D) -> RigidTransform:
    rot = rot_z(p.yaw) @ rot_y(p.pitch) @ rot_x(p.roll)
    return RigidTransform(rot, np.array([p.x, p.y, p.z]))


def transform_to_euler(t: RigidTransform) -> EulerPose6D:
    r = t.rotation
    if abs(r[2, 0]) > 1.0 - GIMBAL_TOL:
        raise GimbalLockError(f"pitch at +-pi/2 (R[2][0] = {r[2, 0]!r})")
    pitch = math.atan2(-r[2, 0], math.hypot(r[0, 0], r[1, 0]))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    x, y, z = (float(v) for v in t.translation)
    return EulerPose6D(x, y, z, wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Apply ``b`` then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def relative_pose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return compose(inverse(a), b)


def accumulate(relatives: Iterable[RigidTransform]) -> Trajectory:
    poses = [RigidTransform.identity()]
    for rel in relatives:
        poses.append(compose(poses[-1], rel))
    return Trajectory(tuple(poses))


def relatives_of(traj: Trajectory) -> list:
    """Consecutive relative motions; the inverse of :func:`accumulate`."""
    return [relative_pose(traj[k], traj[k + 1]) for k in range(len(traj) - 1)]


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar factor)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def parse_kitti_poses(text) -> Trajectory:
    """Parse KITTI odometry poses: 12 numbers per line, row-major ``[R|t]``.

    ``text`` may be a string or a readable text stream.  Rotations that are
    slightly off orthonormal (up to 1e-4) are projected back onto SO(3).
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    poses = []
    for lineno, line in enumerate(text, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise ParseError(f"expected 12 numbers, found {len(tokens)}", line=lineno)
        try:
            values = np.array([float(tok) for tok in tokens])
        except ValueError as exc:
            raise ParseError(f"non-numeric token ({exc})", line=lineno) from None
        if not np.all(np.isfinite(values)):
            raise ParseError("non-finite value", line=lineno)
        m = values.reshape(3, 4)
        rot = m[:, :3]
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err > REPAIR_TOL or np.linalg.det(rot) <= 0:
            raise InvalidRotationError(f"line {lineno}: rotation not orthonormal (error {err:.3g})")
        if err >= ORTHO_TOL:
            rot = orthonormalize(rot)
        poses.append(RigidTransform(rot, m[:, 3]))
    if not poses:
        raise ParseError("no poses found")
    return Trajectory(tuple(poses))


def _fmt(v: float) -> str:
    return "%.17g" % (float(v) + 0.0)


def write_kitti_poses(traj: Trajectory, stream: TextIO | None = None) -> str:
    lines = []
    for pose in traj:
        m = np.hstack([pose.rotation, pose.translation[:, None]])
        lines.append(" ".join(_fmt(v) for v in m.ravel()))
    out = "".join(line + "\n" for line in lines)
    if stream is not None:
        stream.write(out)
    return out
