"""Rigid-body tree model for a humanoid: links, revolute joints, forward
kinematics, and geometric Jacobians.

The model is deliberately minimal.  Links form a tree stored parent-first
and every joint is revolute with a fixed unit axis.  A joint lives on the
edge between a link and its parent: it rotates about an axis expressed in
the parent frame, at the parent's origin, and the child's fixed transform
is applied inside the rotated frame.  Chains of co-located joints are plain
zero-offset links.  Rotations travel through the tree as unit quaternions;
matrices are only produced where a caller asks for them.

A model file is YAML.  Beyond the tree itself it carries everything the
retargeting and control stack needs to run against this robot: link groups,
the human-link mapping table, per-link residual weights, solver settings,
hand open/close presets, neck limits, and simulator gains.  See
``data/demo_humanoid.yaml`` for a complete, commented example.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    IDENTITY_QUAT,
    quat_from_axis_angle,
    quat_from_rpy,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
)

_AXIS_UNIT_TOL = 1e-9


@dataclass
class LinkPose:
    """World pose of a link: unit quaternion (w, x, y, z) + position (m)."""

    rotation: np.ndarray
    position: np.ndarray

    @classmethod
    def identity(cls) -> "LinkPose":
        return cls(IDENTITY_QUAT.copy(), np.zeros(3))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


@dataclass
class Link:
    name: str
    parent: int                 # -1 for the root
    translation: np.ndarray     # fixed offset, applied after the joint rotation
    rotation: np.ndarray        # fixed rotation (quat), applied after the offset
    joint: int | None = None    # index into RobotModel.joints, None if rigid


@dataclass
class Joint:
    name: str
    axis: np.ndarray            # unit axis in the parent link frame
    lo: float
    hi: float
    link: int = -1              # link this joint drives


@dataclass
class RobotModel:
    name: str
    links: list[Link]
    joints: list[Joint]
    groups: dict[str, list[str]] = field(default_factory=dict)
    mapping: dict[str, str] = field(default_factory=dict)
    human_links: list[str] = field(default_factory=list)
    rotation_weights: dict[str, float] = field(default_factory=dict)
    position_weights: dict[str, float] = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    neck: dict = field(default_factory=dict)
    hands: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    source_hash: str = ""

    def __post_init__(self) -> None:
        self._link_index = {l.name: i for i, l in enumerate(self.links)}
        self._joint_index = {j.name: i for i, j in enumerate(self.joints)}
        # ancestor joint chain per link, root-to-leaf order
        self._chains: list[tuple[int, ...]] = []
        for i, link in enumerate(self.links):
            chain = list(self._chains[link.parent]) if link.parent >= 0 else []
            if link.joint is not None:
                chain.append(link.joint)
            self._chains.append(tuple(chain))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([j.lo for j in self.joints])
        hi = np.array([j.hi for j in self.joints])
        return lo, hi

    def link_index(self, name: str) -> int:
        try:
            return self._link_index[name]
        except KeyError:
            raise KeyError(f"model has no link named '{name}'") from None

    def joint_index(self, name: str) -> int:
        try:
            return self._joint_index[name]
        except KeyError:
            raise KeyError(f"model has no joint named '{name}'") from None

    def chain_joints(self, link: int | str) -> tuple[int, ...]:
        """Indices of the joints between the root and the given link."""
        if isinstance(link, str):
            link = self.link_index(link)
        return self._chains[link]

    def clamp(self, q: np.ndarray) -> np.ndarray:
        lo, hi = self.limits
        return np.clip(q, lo, hi)

    def check_limits(self, q: np.ndarray, tol: float = 0.0) -> None:
        """Raise ValueError naming the first joint outside its limits."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_joints,):
            raise ValueError(
                f"joint config has shape {q.shape}, expected ({self.n_joints},)")
        for i, j in enumerate(self.joints):
            if q[i] < j.lo - tol or q[i] > j.hi + tol:
                raise ValueError(
                    f"joint '{j.name}' = {q[i]:.6f} rad outside limits "
                    f"[{j.lo:.6f}, {j.hi:.6f}]")

    def neutral_config(self) -> np.ndarray:
        """All zeros, pushed inside the limits where zero is not feasible."""
        lo, hi = self.limits
        return np.clip(np.zeros(self.n_joints), lo, hi)


@dataclass
class FKResult:
    """Poses of every link plus per-joint world axis/origin for Jacobians."""

    model: RobotModel
    rotations: np.ndarray       # (n_links, 4) quats
    positions: np.ndarray      # (n_links, 3)
    joint_axes: np.ndarray     # (n_joints, 3) world-frame unit axes
    joint_origins: np.ndarray  # (n_joints, 3) world-frame joint centers

    def pose(self, link: int | str) -> LinkPose:
        if isinstance(link, str):
            link = self.model.link_index(link)
        return LinkPose(self.rotations[link].copy(), self.positions[link].copy())

    def poses(self) -> dict[str, LinkPose]:
        return {l.name: self.pose(i) for i, l in enumerate(self.model.links)}


def forward_kinematics(model: RobotModel, q: np.ndarray,
                       root: LinkPose | None = None) -> FKResult:
    """Compute world poses for all links.

    Pure: no state on the model is touched.  ``root`` is the world pose of
    the root link (identity if omitted) and is passed through bit-for-bit.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_joints,):
        raise ValueError(
            f"joint config has shape {q.shape}, expected ({model.n_joints},)")
    if root is None:
        root = LinkPose.identity()

    n = len(model.links)
    rotations = np.empty((n, 4))
    positions = np.empty((n, 3))
    joint_axes = np.empty((model.n_joints, 3))
    joint_origins = np.empty((model.n_joints, 3))

    rotations[0] = root.rotation
    positions[0] = root.position
    for i, link in enumerate(model.links):
        if link.parent < 0:
            continue
        parent_rot = rotations[link.parent]
        parent_pos = positions[link.parent]
        if link.joint is not None:
            joint = model.joints[link.joint]
            joint_axes[link.joint] = quat_rotate(parent_rot, joint.axis)
            joint_origins[link.joint] = parent_pos
            frame_rot = quat_multiply(
                parent_rot, quat_from_axis_angle(joint.axis, q[link.joint]))
        else:
            frame_rot = parent_rot
        positions[i] = parent_pos + quat_rotate(frame_rot, link.translation)
        rotations[i] = quat_multiply(frame_rot, link.rotation)

    return FKResult(model, rotations, positions, joint_axes, joint_origins)


def jacobian(model: RobotModel, q: np.ndarray, link: int | str,
             root: LinkPose | None = None) -> np.ndarray:
    """Geometric Jacobian of one link, 6 x n_joints.

    Rows 0..2 are linear velocity, rows 3..5 angular, both in world frame,
    per unit joint rate.  Columns of joints that are not on the chain from
    the root to the link are exactly zero.
    """
    fk = forward_kinematics(model, q, root)
    if isinstance(link, str):
        link = model.link_index(link)
    J = np.zeros((6, model.n_joints))
    p = fk.positions[link]
    for j in model.chain_joints(link):
        axis = fk.joint_axes[j]
        J[:3, j] = np.cross(axis, p - fk.joint_origins[j])
        J[3:, j] = axis
    return J


def _parse_origin(raw: dict | None, where: str) -> tuple[np.ndarray, np.ndarray]:
    if raw is None:
        return np.zeros(3), IDENTITY_QUAT.copy()
    xyz = np.asarray(raw.get("xyz", [0.0, 0.0, 0.0]), dtype=float)
    rpy = np.asarray(raw.get("rpy", [0.0, 0.0, 0.0]), dtype=float)
    if xyz.shape != (3,) or rpy.shape != (3,):
        raise ValueError(f"{where}: origin xyz/rpy must be 3-vectors")
    return xyz, quat_from_rpy(*rpy)


def build_model(spec: dict, source_hash: str = "") -> RobotModel:
    """Assemble and validate a RobotModel from a parsed config dict."""
    links: list[Link] = []
    joints: list[Joint] = []
    seen_links: dict[str, int] = {}

    for entry in spec.get("links", []):
        name = entry.get("name")
        if not name:
            raise ValueError("every link needs a name")
        if name in seen_links:
            raise ValueError(f"duplicate link name '{name}'")
        parent_name = entry.get("parent")
        if parent_name is None:
            if links:
                raise ValueError(
                    f"link '{name}' has no parent but root is already "
                    f"'{links[0].name}'")
            if entry.get("origin") or entry.get("joint"):
                raise ValueError(
                    f"root link '{name}' may not carry an origin or joint")
            parent = -1
        else:
            if parent_name not in seen_links:
                raise ValueError(
                    f"link '{name}' references parent '{parent_name}' which is "
                    f"not defined earlier in the file (parents must come first)")
            parent = seen_links[parent_name]
        xyz, rot = _parse_origin(entry.get("origin"), f"link '{name}'")

        joint_idx = None
        jraw = entry.get("joint")
        if jraw is not None:
            jtype = jraw.get("type", "revolute")
            if jtype != "revolute":
                raise ValueError(
                    f"joint '{jraw.get('name', name)}' has type '{jtype}'; "
                    f"only revolute joints are supported")
            jname = jraw.get("name", f"{name}_joint")
            if any(j.name == jname for j in joints):
                raise ValueError(f"duplicate joint name '{jname}'")
            axis = np.asarray(jraw.get("axis", [0.0, 0.0, 1.0]), dtype=float)
            if abs(np.linalg.norm(axis) - 1.0) > _AXIS_UNIT_TOL:
                raise ValueError(
                    f"joint '{jname}' axis {axis.tolist()} is not unit length")
            limits = jraw.get("limits")
            if limits is None or len(limits) != 2:
                raise ValueError(f"joint '{jname}' needs limits [lo, hi]")
            lo, hi = float(limits[0]), float(limits[1])
            if not lo < hi:
                raise ValueError(
                    f"joint '{jname}' limits [{lo}, {hi}] must satisfy lo < hi")
            joint_idx = len(joints)
            joints.append(Joint(jname, axis, lo, hi, link=len(links)))

        seen_links[name] = len(links)
        links.append(Link(name, parent, xyz, rot, joint_idx))

    if not links:
        raise ValueError("model defines no links")

    model = RobotModel(
        name=spec.get("name", "unnamed"),
        links=links,
        joints=joints,
        groups={k: list(v) for k, v in (spec.get("groups") or {}).items()},
        mapping=dict(spec.get("mapping") or {}),
        human_links=[str(n) for n in
                     (spec.get("human_links") or
                      list((spec.get("mapping") or {}).keys()))],
        rotation_weights={k: float(v) for k, v in
                          ((spec.get("weights") or {}).get("rotation") or {}).items()},
        position_weights={k: float(v) for k, v in
                          ((spec.get("weights") or {}).get("position") or {}).items()},
        solver=dict(spec.get("solver") or {}),
        neck=dict(spec.get("neck") or {}),
        hands=dict(spec.get("hands") or {}),
        sim=dict(spec.get("sim") or {}),
        source_hash=source_hash,
    )

    grouped = {n for names in model.groups.values() for n in names}
    for gname, names in model.groups.items():
        for n in names:
            if n not in model._link_index:
                raise ValueError(f"group '{gname}' lists unknown link '{n}'")
    for human, robot in model.mapping.items():
        if robot not in model._link_index:
            raise ValueError(
                f"mapping '{human}' -> '{robot}': no such robot link")
        if grouped and robot not in grouped:
            raise ValueError(
                f"mapped link '{robot}' belongs to no group")
    for table_name, table in (("rotation", model.rotation_weights),
                              ("position", model.position_weights)):
        for n, w in table.items():
            if n not in model._link_index:
                raise ValueError(f"{table_name} weight for unknown link '{n}'")
            if w < 0.0:
                raise ValueError(
                    f"{table_name} weight for '{n}' is negative ({w})")
    return model


def load_model(path: str | Path) -> RobotModel:
    """Load and validate a robot model from a YAML file."""
    import yaml

    raw = Path(path).read_bytes()
    spec = yaml.safe_load(raw)
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    digest = hashlib.sha256(
        json.dumps(spec, sort_keys=True, default=str).encode()).hexdigest()
    return build_model(spec, source_hash=digest)


def bundled_model_path() -> Path:
    """Path of the demo humanoid shipped with the package."""
    return Path(__file__).parent / "data" / "demo_humanoid.yaml"
