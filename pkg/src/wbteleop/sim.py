"""Kinematic-root, PD-joint plant for closing the loop without hardware.

Joints are independent double integrators driven by PD torque toward the
commanded targets.  The root is not dynamic: planar velocity and yaw rate
integrate directly (in the current heading frame), while height, roll, and
pitch relax toward their commands through a first-order low-pass.  That
split mirrors how the downstream controller consumes the command stream and
keeps the simulator deterministic and fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .command import CommandVector, flatten
from .geometry import quat_from_rpy
from .model import LinkPose, RobotModel

SUBSTEP_HZ = 500.0
POSE_FILTER_TAU = 0.1

DEFAULT_KP = 100.0
DEFAULT_INERTIA = 0.1


@dataclass
class SimState:
    q: np.ndarray
    dq: np.ndarray
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    time: float = 0.0
    neck: np.ndarray = field(default_factory=lambda: np.zeros(2))
    hand_left: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hand_right: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def root_pose(self) -> LinkPose:
        return LinkPose(quat_from_rpy(self.roll, self.pitch, self.yaw),
                        np.array([self.x, self.y, self.z]))

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.dq.copy(), self.x, self.y, self.z,
                        self.roll, self.pitch, self.yaw, self.time,
                        self.neck.copy(), self.hand_left.copy(),
                        self.hand_right.copy())


class TrackerSim:
    """Steps a SimState against the command stream.

    kp/kd/inertia may be scalars or per-joint arrays.  kd defaults to the
    critically damped value 2*sqrt(kp*inertia).
    """

    def __init__(self, model: RobotModel,
                 kp: float | np.ndarray | None = None,
                 kd: float | np.ndarray | None = None,
                 inertia: float | np.ndarray | None = None,
                 substep_hz: float | None = None):
        self.model = model
        cfg = model.sim or {}
        n = model.n_joints
        if kp is None:
            kp = cfg.get("kp", DEFAULT_KP)
        if inertia is None:
            inertia = cfg.get("inertia", DEFAULT_INERTIA)
        self.kp = np.broadcast_to(np.asarray(kp, dtype=float), (n,)).copy()
        self.inertia = np.broadcast_to(np.asarray(inertia, dtype=float), (n,)).copy()
        if np.any(self.kp <= 0.0) or np.any(self.inertia <= 0.0):
            raise ValueError("kp and inertia must be positive")
        if kd is None:
            kd = 2.0 * np.sqrt(self.kp * self.inertia)
        self.kd = np.broadcast_to(np.asarray(kd, dtype=float), (n,)).copy()
        if np.any(self.kd < 0.0):
            raise ValueError("kd must be non-negative")
        self.substep_hz = float(substep_hz if substep_hz is not None
                                else cfg.get("substep_hz", SUBSTEP_HZ))
        self.lo, self.hi = model.limits

    def initial_state(self, q0: np.ndarray | None = None, z0: float = 0.0) -> SimState:
        n = self.model.n_joints
        q = np.zeros(n) if q0 is None else np.asarray(q0, dtype=float).copy()
        if q.shape != (n,):
            raise ValueError(f"q0 has shape {q.shape}, model has {n} joints")
        hand_dof = int((self.model.hands or {}).get("joint_count", 0))
        return SimState(q=q, dq=np.zeros(n), z=z0,
                        hand_left=np.zeros(hand_dof),
                        hand_right=np.zeros(hand_dof))

    def pd_torque(self, state: SimState, q_target: np.ndarray) -> np.ndarray:
        return self.kp * (q_target - state.q) - self.kd * state.dq

    def step(self, state: SimState, cmd: CommandVector, dt: float) -> SimState:
        """Advance a copy of ``state`` by ``dt`` under command ``cmd``."""
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        if cmd.q_ref.shape != state.q.shape:
            raise ValueError(
                f"command q_ref has shape {cmd.q_ref.shape}, state expects "
                f"{state.q.shape}")
        s = state.copy()
        n_sub = max(1, int(np.ceil(dt * self.substep_hz - 1e-12)))
        h = dt / n_sub
        alpha = 1.0 - np.exp(-h / POSE_FILTER_TAU)
        for _ in range(n_sub):
            # Semi-implicit Euler: velocity first, then position.
            tau = self.kp * (cmd.q_ref - s.q) - self.kd * s.dq
            s.dq += h * tau / self.inertia
            s.q += h * s.dq
            hit_lo = s.q < self.lo
            hit_hi = s.q > self.hi
            if hit_lo.any() or hit_hi.any():
                s.q = np.clip(s.q, self.lo, self.hi)
                s.dq[hit_lo | hit_hi] = 0.0
            c, sn = np.cos(s.yaw), np.sin(s.yaw)
            s.x += (c * cmd.vx - sn * cmd.vy) * h
            s.y += (sn * cmd.vx + c * cmd.vy) * h
            s.yaw += cmd.yaw_rate * h
            s.z += alpha * (cmd.z - s.z)
            s.roll += alpha * (cmd.roll - s.roll)
            s.pitch += alpha * (cmd.pitch - s.pitch)
        s.neck = cmd.neck.copy()
        if cmd.hand_left.shape == s.hand_left.shape:
            s.hand_left = cmd.hand_left.copy()
        if cmd.hand_right.shape == s.hand_right.shape:
            s.hand_right = cmd.hand_right.copy()
        s.time = state.time + dt
        return s

    def achieved_command(self, state: SimState, cmd: CommandVector) -> CommandVector:
        """What the plant actually did this tick, in command layout.

        Planar velocity and yaw rate integrate exactly by construction, so
        they echo the command; height/roll/pitch and the joint vector come
        from the state, which is where the lag lives.  Neck and hands are
        kinematic passthrough.
        """
        return CommandVector(
            vx=cmd.vx, vy=cmd.vy, z=state.z, roll=state.roll,
            pitch=state.pitch, yaw_rate=cmd.yaw_rate,
            q_ref=state.q.copy(), neck=state.neck.copy(),
            hand_left=state.hand_left.copy(), hand_right=state.hand_right.copy(),
            timestamp=cmd.timestamp)


@dataclass
class TrackingMetric:
    r_track: float
    error_norm: float
    alpha: float


def tracking_metric(cmd, achieved, alpha: float = 1.0) -> TrackingMetric:
    """r = exp(-alpha * ||cmd - achieved||_2) over the flattened vectors."""
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    a = cmd if isinstance(cmd, np.ndarray) else flatten(cmd)
    b = achieved if isinstance(achieved, np.ndarray) else flatten(achieved)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"layout mismatch: {a.shape} vs {b.shape}")
    err = float(np.linalg.norm(a - b))
    return TrackingMetric(r_track=float(np.exp(-alpha * err)),
                          error_norm=err, alpha=alpha)
