"""Command vector stream: the unified interface between retargeting and
everything downstream.

A command is root motion expressed relative to where the robot was one frame
ago (planar velocity in the heading frame, yaw rate) plus absolute height,
roll, pitch, and the full joint targets (body, neck, both hands).  Commands
flatten into a fixed, versioned layout so the bus, recorder, and policy
runner all agree on what each dimension means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_to_matrix, rpy_from_quat, wrap_angle, yaw_of_quat
from .model import LinkPose, RobotModel

LAYOUT_VERSION = 1

ROOT_FIELDS = ("vx", "vy", "z", "roll", "pitch", "yaw_rate")


@dataclass
class LayoutDescriptor:
    """Names and order of every dimension of a flattened CommandVector."""

    body_joints: list[str]
    neck_joints: list[str] = field(default_factory=lambda: ["neck_yaw", "neck_pitch"])
    hand_dof: int = 7
    version: int = LAYOUT_VERSION

    @classmethod
    def from_model(cls, model: RobotModel) -> "LayoutDescriptor":
        hand_dof = int((model.hands or {}).get("joint_count", 0))
        return cls(body_joints=list(model.joint_names), hand_dof=hand_dof)

    @property
    def dim(self) -> int:
        return 6 + len(self.body_joints) + len(self.neck_joints) + 2 * self.hand_dof

    def names(self) -> list[str]:
        out = list(ROOT_FIELDS)
        out += [f"q:{n}" for n in self.body_joints]
        out += [f"neck:{n}" for n in self.neck_joints]
        for side in ("left", "right"):
            out += [f"hand:{side}:{i}" for i in range(self.hand_dof)]
        return out

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "body_joints": list(self.body_joints),
            "neck_joints": list(self.neck_joints),
            "hand_dof": self.hand_dof,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutDescriptor":
        if d.get("version") != LAYOUT_VERSION:
            raise ValueError(
                f"unsupported layout version {d.get('version')!r} "
                f"(this build speaks version {LAYOUT_VERSION})")
        return cls(body_joints=list(d["body_joints"]),
                   neck_joints=list(d["neck_joints"]),
                   hand_dof=int(d["hand_dof"]),
                   version=int(d["version"]))


@dataclass
class CommandVector:
    vx: float = 0.0
    vy: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw_rate: float = 0.0
    q_ref: np.ndarray = field(default_factory=lambda: np.zeros(0))
    neck: np.ndarray = field(default_factory=lambda: np.zeros(2))
    hand_left: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hand_right: np.ndarray = field(default_factory=lambda: np.zeros(0))
    timestamp: int = 0

    def __post_init__(self) -> None:
        self.q_ref = np.asarray(self.q_ref, dtype=float)
        self.neck = np.asarray(self.neck, dtype=float)
        self.hand_left = np.asarray(self.hand_left, dtype=float)
        self.hand_right = np.asarray(self.hand_right, dtype=float)


@dataclass
class ProprioState:
    """What the plant reports back: root attitude + joint state."""

    root_orientation: np.ndarray
    root_angular_velocity: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    timestamp: int = 0

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.root_orientation, self.root_angular_velocity,
                               self.q, self.dq])

    @classmethod
    def unflatten(cls, flat: np.ndarray, n_joints: int,
                  timestamp: int = 0) -> "ProprioState":
        flat = np.asarray(flat, dtype=float)
        want = 7 + 2 * n_joints
        if flat.shape != (want,):
            raise ValueError(f"proprio vector has shape {flat.shape}, "
                             f"expected ({want},)")
        return cls(root_orientation=flat[:4].copy(),
                   root_angular_velocity=flat[4:7].copy(),
                   q=flat[7:7 + n_joints].copy(),
                   dq=flat[7 + n_joints:].copy(),
                   timestamp=timestamp)


def flatten(cmd: CommandVector, layout: LayoutDescriptor | None = None) -> np.ndarray:
    flat = np.concatenate([
        [cmd.vx, cmd.vy, cmd.z, cmd.roll, cmd.pitch, cmd.yaw_rate],
        cmd.q_ref, cmd.neck, cmd.hand_left, cmd.hand_right,
    ])
    if layout is not None and flat.shape != (layout.dim,):
        raise ValueError(
            f"command flattens to {flat.shape[0]} dims, layout expects {layout.dim}")
    return flat


def unflatten(flat: np.ndarray, layout: LayoutDescriptor,
              timestamp: int = 0) -> CommandVector:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (layout.dim,):
        raise ValueError(
            f"flat vector has shape {flat.shape}, layout expects ({layout.dim},)")
    nb = len(layout.body_joints)
    nn = len(layout.neck_joints)
    nh = layout.hand_dof
    i = 6
    return CommandVector(
        vx=float(flat[0]), vy=float(flat[1]), z=float(flat[2]),
        roll=float(flat[3]), pitch=float(flat[4]), yaw_rate=float(flat[5]),
        q_ref=flat[i:i + nb].copy(),
        neck=flat[i + nb:i + nb + nn].copy(),
        hand_left=flat[i + nb + nn:i + nb + nn + nh].copy(),
        hand_right=flat[i + nb + nn + nh:i + nb + nn + 2 * nh].copy(),
        timestamp=timestamp,
    )


def derive_command(prev: tuple[LinkPose, np.ndarray],
                   curr: tuple[LinkPose, np.ndarray],
                   dt: float,
                   neck: np.ndarray | None = None,
                   hand_left: np.ndarray | None = None,
                   hand_right: np.ndarray | None = None,
                   timestamp: int = 0) -> CommandVector:
    """One finite-difference step of the command stream.

    ``prev``/``curr`` are (root pose, joint config) pairs a time ``dt``
    apart.  Planar velocity is the world root displacement rotated into the
    previous heading frame (heading = yaw of the previous root orientation).
    Height, roll, and pitch are absolute from ``curr``.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    prev_pose, _ = prev
    curr_pose, q_curr = curr
    disp = curr_pose.position - prev_pose.position
    if not (np.all(np.isfinite(disp)) and np.all(np.isfinite(q_curr))):
        raise ValueError("non-finite pose input to derive_command")
    heading = yaw_of_quat(prev_pose.rotation)
    c, s = np.cos(-heading), np.sin(-heading)
    vx = (c * disp[0] - s * disp[1]) / dt
    vy = (s * disp[0] + c * disp[1]) / dt
    yaw_curr = yaw_of_quat(curr_pose.rotation)
    yaw_rate = wrap_angle(yaw_curr - heading) / dt
    roll, pitch, _ = rpy_from_quat(curr_pose.rotation)
    return CommandVector(
        vx=float(vx), vy=float(vy), z=float(curr_pose.position[2]),
        roll=roll, pitch=pitch, yaw_rate=float(yaw_rate),
        q_ref=np.asarray(q_curr, dtype=float).copy(),
        neck=np.zeros(2) if neck is None else np.asarray(neck, dtype=float),
        hand_left=np.zeros(0) if hand_left is None else np.asarray(hand_left, dtype=float),
        hand_right=np.zeros(0) if hand_right is None else np.asarray(hand_right, dtype=float),
        timestamp=timestamp,
    )


class CommandSession:
    """Stateful wrapper: keeps the one-frame history and smooths velocities.

    The exponential smoothing (factor beta, applied to vx/vy/yaw_rate) is
    seeded with the first derived value, so constant motion passes through
    untouched from the first sample.
    """

    def __init__(self, beta: float = 0.2):
        if not 0.0 < beta <= 1.0:
            raise ValueError("smoothing factor must be in (0, 1]")
        self.beta = beta
        self._prev: tuple[LinkPose, np.ndarray] | None = None
        self._vel: np.ndarray | None = None

    def reset(self) -> None:
        self._prev = None
        self._vel = None

    def push(self, pose: LinkPose, q: np.ndarray, dt: float,
             neck: np.ndarray | None = None,
             hand_left: np.ndarray | None = None,
             hand_right: np.ndarray | None = None,
             timestamp: int = 0) -> CommandVector | None:
        """Feed one retargeted pose; returns None for the very first frame."""
        entry = (LinkPose(pose.rotation.copy(), pose.position.copy()),
                 np.asarray(q, dtype=float).copy())
        if self._prev is None:
            self._prev = entry
            return None
        cmd = derive_command(self._prev, entry, dt, neck=neck,
                             hand_left=hand_left, hand_right=hand_right,
                             timestamp=timestamp)
        self._prev = entry
        raw = np.array([cmd.vx, cmd.vy, cmd.yaw_rate])
        if self._vel is None:
            self._vel = raw
        else:
            self._vel = (1.0 - self.beta) * self._vel + self.beta * raw
        cmd.vx, cmd.vy, cmd.yaw_rate = (float(self._vel[0]), float(self._vel[1]),
                                        float(self._vel[2]))
        return cmd


@dataclass
class NormalizationStats:
    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        self.offset = np.asarray(self.offset, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.offset.shape != self.scale.shape:
            raise ValueError("offset/scale shapes differ")
        if np.any(self.scale <= 0.0):
            bad = int(np.argmax(self.scale <= 0.0))
            raise ValueError(f"scale must be positive everywhere "
                             f"(dimension {bad} is {self.scale[bad]})")

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "NormalizationStats":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_samples(cls, flats: np.ndarray,
                     min_scale: float = 1e-8) -> "NormalizationStats":
        """Per-dimension mean/stdev; constant dimensions get unit scale."""
        flats = np.asarray(flats, dtype=float)
        if flats.ndim != 2 or flats.shape[0] < 1:
            raise ValueError("need a (samples, dim) array")
        offset = flats.mean(axis=0)
        scale = flats.std(axis=0)
        scale = np.where(scale < min_scale, 1.0, scale)
        return cls(offset, scale)

    def to_dict(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["offset"]), np.asarray(d["scale"]))


def _check_dims(flat: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    flat = np.asarray(flat, dtype=float)
    if flat.shape[-1] != stats.dim:
        raise ValueError(
            f"vector dim {flat.shape[-1]} does not match stats dim {stats.dim}")
    return flat


def normalize(flat: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (_check_dims(flat, stats) - stats.offset) / stats.scale


def denormalize(flat: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return _check_dims(flat, stats) * stats.scale + stats.offset


def add_proprio_noise(flat: np.ndarray, stats: NormalizationStats,
                      fraction: float = 0.10,
                      rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Gaussian perturbation with stdev = fraction * stats.scale, per dim."""
    if fraction < 0.0:
        raise ValueError("noise fraction must be non-negative")
    flat = _check_dims(flat, stats)
    if fraction == 0.0:
        return flat.copy()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return flat + rng.normal(0.0, fraction * stats.scale, size=flat.shape)


def proprio_from_sim(root_rotation: np.ndarray, ang_vel: np.ndarray,
                     q: np.ndarray, dq: np.ndarray,
                     timestamp: int = 0) -> ProprioState:
    return ProprioState(np.asarray(root_rotation, dtype=float),
                        np.asarray(ang_vel, dtype=float),
                        np.asarray(q, dtype=float),
                        np.asarray(dq, dtype=float), timestamp)
