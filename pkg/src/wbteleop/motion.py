"""Synthetic human motion and the pose-file container.

Generated motion is scripted in robot joint space and pushed through forward
kinematics, so every emitted frame is exactly reachable by the robot.  That
makes these files useful both as demo input and as ground truth: retargeting
a generated frame should recover the scripted joint vector.

Pose files (``.tw2m``) hold a JSON header, fixed-stride binary frame
records, and a checksummed footer, in the same spirit as episode files so
the tooling for one carries over to the other.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import quat_from_axis_angle, quat_from_rpy, quat_multiply
from .model import LinkPose, RobotModel, forward_kinematics
from .retarget import HumanPoseFrame

POSE_MAGIC = b"TW2M"
POSE_VERSION = 1
MOTION_KINDS = ("walk", "crouch", "reach", "head-scan")

_FOOT = struct.Struct("<IQ4s")  # crc32, frame count, magic again


def frame_stride(n_links: int) -> int:
    """Bytes per frame record: timestamp + present mask + 7 doubles a link."""
    return 16 + 56 * n_links


def pack_frame(frame: HumanPoseFrame, link_names: list[str]) -> bytes:
    """Fixed-stride binary encoding of one frame, given the link order.

    Links absent from the frame are zero-filled and cleared in the present
    mask.  The same encoding is used on the wire and in pose files.
    """
    if len(link_names) > 64:
        raise ValueError("frame codec supports at most 64 links")
    mask = 0
    body = np.zeros((len(link_names), 7))
    for i, name in enumerate(link_names):
        if frame.has(name):
            pose = frame.links[name]
            mask |= 1 << i
            body[i, :4] = pose.rotation
            body[i, 4:] = pose.position
    return struct.pack("<QQ", frame.timestamp, mask) + body.tobytes()


def unpack_frame(buf: bytes, link_names: list[str]) -> HumanPoseFrame:
    stride = frame_stride(len(link_names))
    if len(buf) != stride:
        raise ValueError(f"frame record is {len(buf)} bytes, expected {stride}")
    timestamp, mask = struct.unpack_from("<QQ", buf)
    body = np.frombuffer(buf, dtype=float, offset=16).reshape(len(link_names), 7)
    links = {}
    present = []
    for i, name in enumerate(link_names):
        if mask & (1 << i):
            links[name] = LinkPose(body[i, :4].copy(), body[i, 4:].copy())
            present.append(name)
    return HumanPoseFrame(timestamp=int(timestamp), links=links,
                          present=frozenset(present))


def write_pose_file(path, frames: list[HumanPoseFrame], link_names: list[str],
                    rate_hz: float, meta: dict | None = None) -> None:
    header = {
        "format": "tw2m",
        "version": POSE_VERSION,
        "links": list(link_names),
        "rate_hz": rate_hz,
        "count": len(frames),
    }
    if meta:
        header.update(meta)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    crc = 0
    with open(path, "wb") as f:
        f.write(POSE_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for frame in frames:
            rec = pack_frame(frame, link_names)
            crc = zlib.crc32(rec, crc)
            f.write(rec)
        f.write(_FOOT.pack(crc, len(frames), POSE_MAGIC))


def read_pose_file(path) -> tuple[list[HumanPoseFrame], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != POSE_MAGIC:
        raise ValueError(f"{path}: not a pose file (bad magic)")
    (header_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + header_len])
    if header.get("version") != POSE_VERSION:
        raise ValueError(f"{path}: unsupported pose file version "
                         f"{header.get('version')!r}")
    links = header["links"]
    stride = frame_stride(len(links))
    count = header["count"]
    off = 8 + header_len
    end = off + stride * count
    if len(data) < end + _FOOT.size:
        raise ValueError(f"{path}: truncated pose file")
    crc, foot_count, foot_magic = _FOOT.unpack_from(data, end)
    if foot_magic != POSE_MAGIC or foot_count != count:
        raise ValueError(f"{path}: corrupt pose file footer")
    if zlib.crc32(data[off:end]) != crc:
        raise ValueError(f"{path}: pose file checksum mismatch")
    frames = [unpack_frame(data[off + i * stride:off + (i + 1) * stride], links)
              for i in range(count)]
    return frames, header


def synthesize_frame(model: RobotModel, q: np.ndarray, root: LinkPose,
                     neck: tuple[float, float] = (0.0, 0.0),
                     timestamp: int = 0) -> HumanPoseFrame:
    """Human pose frame consistent with the robot at configuration ``q``.

    Mapped links take their robot FK pose; the head is the spine pose
    composed with the neck yaw-then-pitch rotation.
    """
    fk = forward_kinematics(model, q, root)
    links = {human: fk.pose(robot) for human, robot in model.mapping.items()}
    spine = links.get("spine")
    if spine is not None:
        turn = quat_multiply(quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), neck[0]),
                             quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), neck[1]))
        head_rot = quat_multiply(spine.rotation, turn)
        links["head"] = LinkPose(head_rot, spine.position + np.array([0, 0, 0.25]))
    return HumanPoseFrame(timestamp=timestamp, links=links,
                          present=frozenset(links))


@dataclass
class _Script:
    """Joint/root/neck trajectories as callables of time."""

    q: object
    root: object
    neck: object


def _std_pelvis_z(model: RobotModel) -> float:
    # Upright pelvis height: leg chain fully extended, foot sole on ground.
    return 0.78


def _walk_script(model: RobotModel, rng: np.random.Generator) -> _Script:
    n = model.n_joints
    j = model.joint_index
    f = 0.4 * (1.0 + 0.1 * (rng.random() - 0.5))
    vx = 0.25 * (1.0 + 0.2 * (rng.random() - 0.5))
    hip_a = 0.20 * (1.0 + 0.1 * (rng.random() - 0.5))
    arm_a = 0.25 * (1.0 + 0.1 * (rng.random() - 0.5))
    phase0 = rng.random() * 2 * np.pi
    z0 = _std_pelvis_z(model)

    def q_of(t: float) -> np.ndarray:
        q = np.zeros(n)
        p = 2 * np.pi * f * t + phase0
        s, c = np.sin(p), np.cos(p)
        q[j("left_hip_pitch")] = hip_a * s
        q[j("right_hip_pitch")] = -hip_a * s
        q[j("left_knee")] = 0.25 - 0.2 * c
        q[j("right_knee")] = 0.25 + 0.2 * c
        q[j("left_ankle_pitch")] = -0.08 * s
        q[j("right_ankle_pitch")] = 0.08 * s
        q[j("left_shoulder_pitch")] = -arm_a * s
        q[j("right_shoulder_pitch")] = arm_a * s
        q[j("left_elbow")] = 0.5 + 0.1 * s
        q[j("right_elbow")] = 0.5 - 0.1 * s
        q[j("waist_yaw")] = 0.05 * s
        return q

    def root_of(t: float) -> LinkPose:
        p = 2 * np.pi * f * t + phase0
        pos = np.array([vx * t, 0.02 * np.sin(p), z0])
        return LinkPose(quat_from_rpy(0.0, 0.0, 0.0), pos)

    return _Script(q=q_of, root=root_of, neck=lambda t: (0.0, 0.0))


def _crouch_script(model: RobotModel, rng: np.random.Generator,
                   duration: float) -> _Script:
    n = model.n_joints
    j = model.joint_index
    depth = 0.28 * (1.0 + 0.1 * (rng.random() - 0.5))
    z0 = _std_pelvis_z(model)

    def bump(t: float) -> float:
        return float(np.sin(np.pi * np.clip(t / duration, 0.0, 1.0)) ** 2)

    def q_of(t: float) -> np.ndarray:
        u = bump(t)
        q = np.zeros(n)
        for side in ("left", "right"):
            q[j(f"{side}_hip_pitch")] = -0.9 * u
            q[j(f"{side}_knee")] = 1.8 * u
            q[j(f"{side}_ankle_pitch")] = -0.85 * u
        q[j("waist_pitch")] = 0.25 * u
        q[j("left_shoulder_pitch")] = -0.5 * u
        q[j("right_shoulder_pitch")] = -0.5 * u
        return q

    def root_of(t: float) -> LinkPose:
        return LinkPose(quat_from_rpy(0.0, 0.1 * bump(t), 0.0),
                        np.array([0.0, 0.0, z0 - depth * bump(t)]))

    return _Script(q=q_of, root=root_of, neck=lambda t: (0.0, -0.2 * bump(t)))


def _reach_script(model: RobotModel, rng: np.random.Generator,
                  duration: float) -> _Script:
    n = model.n_joints
    j = model.joint_index
    side = "right" if rng.random() < 0.5 else "left"
    lift = 1.2 * (1.0 + 0.1 * (rng.random() - 0.5))
    z0 = _std_pelvis_z(model)

    def ramp(t: float) -> float:
        u = float(np.clip(2.0 * t / duration, 0.0, 1.0))
        return u * u * (3.0 - 2.0 * u)  # smoothstep up, then hold

    def q_of(t: float) -> np.ndarray:
        u = ramp(t)
        q = np.zeros(n)
        q[j(f"{side}_shoulder_pitch")] = -lift * u
        q[j(f"{side}_shoulder_roll")] = (-0.25 if side == "right" else 0.25) * u
        q[j(f"{side}_elbow")] = 0.2 * (1.0 - u) + 0.05 * u
        other = "left" if side == "right" else "right"
        q[j(f"{other}_elbow")] = 0.4
        q[j("waist_pitch")] = 0.15 * u
        return q

    def root_of(t: float) -> LinkPose:
        return LinkPose(quat_from_rpy(0.0, 0.0, 0.0), np.array([0.0, 0.0, z0]))

    return _Script(q=q_of, root=root_of, neck=lambda t: (0.0, -0.3 * ramp(t)))


def _head_scan_script(model: RobotModel, rng: np.random.Generator) -> _Script:
    n = model.n_joints
    f = 0.25 * (1.0 + 0.1 * (rng.random() - 0.5))
    z0 = _std_pelvis_z(model)
    q0 = np.zeros(n)
    q0[model.joint_index("left_elbow")] = 0.3
    q0[model.joint_index("right_elbow")] = 0.3
    root = LinkPose(quat_from_rpy(0.0, 0.0, 0.0), np.array([0.0, 0.0, z0]))

    def neck_of(t: float) -> tuple[float, float]:
        return (0.6 * np.sin(2 * np.pi * f * t),
                0.2 * np.sin(2 * np.pi * 0.4 * f * t))

    return _Script(q=lambda t: q0.copy(), root=lambda t: root, neck=neck_of)


def generate_motion(model: RobotModel, kind: str, duration: float = 10.0,
                    rate_hz: float = 100.0, seed: int = 0,
                    t0_ns: int = 0) -> list[HumanPoseFrame]:
    """Deterministic scripted motion of the given kind, sampled at rate_hz."""
    if kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {kind!r}, "
                         f"choose from {', '.join(MOTION_KINDS)}")
    if duration <= 0 or rate_hz <= 0:
        raise ValueError("duration and rate_hz must be positive")
    rng = np.random.default_rng(seed)
    if kind == "walk":
        script = _walk_script(model, rng)
    elif kind == "crouch":
        script = _crouch_script(model, rng, duration)
    elif kind == "reach":
        script = _reach_script(model, rng, duration)
    else:
        script = _head_scan_script(model, rng)
    count = int(round(duration * rate_hz))
    step_ns = int(round(1e9 / rate_hz))
    frames = []
    for i in range(count):
        t = i / rate_hz
        q = model.clamp(script.q(t))
        frames.append(synthesize_frame(model, q, script.root(t),
                                       neck=script.neck(t),
                                       timestamp=t0_ns + i * step_ns))
    return frames


def generate_motion_file(model: RobotModel, path, kind: str,
                         duration: float = 10.0, rate_hz: float = 100.0,
                         seed: int = 0) -> int:
    frames = generate_motion(model, kind, duration, rate_hz, seed)
    write_pose_file(path, frames, list(model.human_links), rate_hz,
                    meta={"kind": kind, "seed": seed})
    return len(frames)
