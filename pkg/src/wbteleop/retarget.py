"""Human-to-humanoid retargeting.

Three independent trackers feed one result per streamed frame:

* body: a two-stage solve.  Stage 1 walks the tree once per sweep and sets
  each joint by closed-form single-axis alignment against the nearest mapped
  descendant's target rotation; it only seeds stage 2 when no warm start is
  available.  Stage 2 is damped least squares (Levenberg-Marquardt) over the
  whole joint vector: rotation residuals are the 9 entries of
  (R_target - R_link(q)) scaled by sqrt(w_R), position residuals are
  pelvis-centric link positions scaled by sqrt(lambda_pos * w_p), and steps
  are clamped to the joint limits before re-evaluation.
* hands: linear interpolation between per-mode open/close presets.
* neck: yaw/pitch extracted from the relative spine-to-head rotation.

The solve runs entirely in the human pelvis frame (robot root pinned there),
which is what makes global translations of the input provably irrelevant:
only differences of positions ever enter the residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_from_axis_angle, quat_to_matrix, wrap_angle
from .model import LinkPose, RobotModel, forward_kinematics

DEFAULT_SOLVER = {
    "lambda_pos": 1.0,
    "max_iterations": 30,
    "stage1_sweeps": 3,
    "step_tolerance": 1e-6,
    "objective_tolerance": 1e-10,
    "damping_init": 1e-4,
}

_DAMPING_GROWTH = 10.0
_DAMPING_SHRINK = 0.3
_MAX_RETRIES = 12


@dataclass
class HumanPoseFrame:
    """World-frame link poses for one streamed human sample.

    ``present`` marks which entries of ``links`` are valid this frame; it
    defaults to all of them.  The pelvis must always be present.
    """

    links: dict[str, LinkPose]
    timestamp: int = 0
    present: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.present is None:
            self.present = frozenset(self.links)
        if not self.has("pelvis"):
            raise ValueError("frame is missing the pelvis link")

    def has(self, name: str) -> bool:
        return name in self.links and name in self.present

    def link(self, name: str) -> LinkPose:
        if not self.has(name):
            raise KeyError(f"human link '{name}' not present in frame")
        return self.links[name]

    def validate(self) -> None:
        for name in self.present:
            pose = self.links[name]
            if not (np.all(np.isfinite(pose.rotation))
                    and np.all(np.isfinite(pose.position))):
                raise ValueError(f"link '{name}' pose is not finite")
            R = pose.matrix()
            if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
                raise ValueError(f"link '{name}' rotation is not orthonormal")


@dataclass
class GraspCommand:
    alpha: float
    mode: str = "power"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"grasp alpha {self.alpha} outside [0, 1]")


@dataclass
class GripperPoses:
    q_open: np.ndarray
    q_close: np.ndarray

    def __post_init__(self) -> None:
        self.q_open = np.asarray(self.q_open, dtype=float)
        self.q_close = np.asarray(self.q_close, dtype=float)
        if self.q_open.shape != self.q_close.shape:
            raise ValueError("open/close pose lengths differ")


@dataclass
class NeckAngles:
    yaw: float
    pitch: float
    degenerate: bool = False
    clamped: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch])


@dataclass
class RetargetResult:
    q: np.ndarray
    neck: NeckAngles | None = None
    hands: dict[str, np.ndarray] = field(default_factory=dict)
    residual: float = 0.0           # stage-2 objective value at q
    iterations: int = 0
    degraded: bool = False
    objective_trace: list[float] = field(default_factory=list)
    iterate_trace: list[np.ndarray] = field(default_factory=list)


class _BodyTargets:
    """Per-model constants for the stage-2 residual, computed once."""

    def __init__(self, model: RobotModel):
        self.model = model
        self.rot: list[tuple[str, int, float]] = []    # (human, link idx, w_R)
        self.pos: list[tuple[str, int, float]] = []    # (human, link idx, w_p)
        for human, robot in model.mapping.items():
            idx = model.link_index(robot)
            w_r = model.rotation_weights.get(robot, 1.0)
            if w_r > 0.0:
                self.rot.append((human, idx, w_r))
            w_p = model.position_weights.get(robot, 0.0)
            if w_p > 0.0:
                self.pos.append((human, idx, w_p))
        self.required = sorted({h for h, _, _ in self.rot}
                               | {h for h, _, _ in self.pos})
        # nearest rotation-targeted descendant for each joint (stage 1)
        rot_links = {idx for _, idx, _ in self.rot}
        children: dict[int, list[int]] = {}
        for i, link in enumerate(model.links):
            children.setdefault(link.parent, []).append(i)
        self.stage1_anchor: list[int | None] = []
        for joint in model.joints:
            queue = [joint.link]
            anchor = None
            while queue:
                nxt = []
                hits = [i for i in queue if i in rot_links]
                if hits:
                    anchor = hits[0]
                    break
                for i in queue:
                    nxt.extend(children.get(i, []))
                queue = nxt
            self.stage1_anchor.append(anchor)
        self._find_triples(children, rot_links)

    def _find_triples(self, children, rot_links) -> None:
        """Runs of three stacked joints with mutually orthogonal axes whose
        third link carries the rotation target (hips, shoulders, wrists,
        waist).  These admit an exact two-branch Euler decomposition, which
        stage 1 prefers over per-joint descent because it cannot pick the
        wrong branch of a spherical cluster."""
        model = self.model

        def ident(quat) -> bool:
            return abs(abs(quat[0]) - 1.0) < 1e-12

        def sole_jointed_child(link_idx):
            kids = [c for c in children.get(link_idx, [])
                    if model.links[c].joint is not None]
            return kids[0] if len(kids) == 1 else None

        self.triples: dict[int, tuple[int, int, int, int]] = {}
        in_triple: set[int] = set()
        for j1, joint in enumerate(model.joints):
            if j1 in in_triple:
                continue
            l1 = joint.link
            l2 = sole_jointed_child(l1)
            l3 = sole_jointed_child(l2) if l2 is not None else None
            if l3 is None or not (ident(model.links[l1].rotation)
                                  and ident(model.links[l2].rotation)):
                continue
            j2, j3 = model.links[l2].joint, model.links[l3].joint
            axes = [model.joints[j].axis for j in (j1, j2, j3)]
            if max(abs(axes[0] @ axes[1]), abs(axes[1] @ axes[2]),
                   abs(axes[0] @ axes[2])) > 1e-9:
                continue
            if l3 not in rot_links or self.stage1_anchor[j1] != l3:
                continue
            self.triples[j1] = (j1, j2, j3, l3)
            in_triple.update((j1, j2, j3))
        self.triple_members = in_triple


_targets_cache: dict[int, _BodyTargets] = {}


def _targets_for(model: RobotModel) -> _BodyTargets:
    key = id(model)
    if key not in _targets_cache:
        _targets_cache[key] = _BodyTargets(model)
    return _targets_cache[key]


def _pelvis_frame_targets(targets: _BodyTargets, frame: HumanPoseFrame):
    """Re-express the human targets in the human pelvis frame.

    Positions are differenced before any rotation is applied, so a constant
    world offset cancels exactly.
    """
    pelvis = frame.link("pelvis")
    Rp = pelvis.matrix()
    p0 = pelvis.position
    rot_t = []
    for human, idx, w in targets.rot:
        if not frame.has(human):
            raise ValueError(f"required human link '{human}' missing from frame")
        rot_t.append((idx, np.sqrt(w), Rp.T @ frame.links[human].matrix()))
    pos_t = []
    for human, idx, w in targets.pos:
        if not frame.has(human):
            raise ValueError(f"required human link '{human}' missing from frame")
        pos_t.append((idx, w, Rp.T @ (frame.links[human].position - p0)))
    return rot_t, pos_t


def _residual(model: RobotModel, q: np.ndarray, rot_t, pos_t, lam: float):
    fk = forward_kinematics(model, q)
    parts = []
    for idx, sw, R_target in rot_t:
        R = quat_to_matrix(fk.rotations[idx])
        parts.append(sw * (R_target - R).reshape(9))
    for idx, w, p_target in pos_t:
        parts.append(np.sqrt(lam * w) * (p_target - fk.positions[idx]))
    return np.concatenate(parts) if parts else np.zeros(0), fk


def _residual_jacobian(model: RobotModel, fk, rot_t, pos_t, lam: float) -> np.ndarray:
    """d(robot stack)/dq, same row order as the residual."""
    n = model.n_joints
    rows = 9 * len(rot_t) + 3 * len(pos_t)
    D = np.zeros((rows, n))
    r = 0
    for idx, sw, _ in rot_t:
        R = quat_to_matrix(fk.rotations[idx])
        for j in model.chain_joints(idx):
            a = fk.joint_axes[j]
            # d(R)/dq_j = [a]x R
            W = np.array([[0.0, -a[2], a[1]],
                          [a[2], 0.0, -a[0]],
                          [-a[1], a[0], 0.0]]) @ R
            D[r:r + 9, j] = sw * W.reshape(9)
        r += 9
    for idx, w, _ in pos_t:
        p = fk.positions[idx]
        sw = np.sqrt(lam * w)
        for j in model.chain_joints(idx):
            D[r:r + 3, j] = sw * np.cross(fk.joint_axes[j], p - fk.joint_origins[j])
        r += 3
    return D


def _axis_rot(u: np.ndarray, theta: float) -> np.ndarray:
    return quat_to_matrix(quat_from_axis_angle(u, theta))


def _euler_triple_candidates(M: np.ndarray, u1, u2, u3):
    """Both (t1, t2, t3) branches with R_u1(t1) R_u2(t2) R_u3(t3) = M.

    Valid for mutually orthogonal unit axes; handled by conjugating into the
    canonical intrinsic x-y-z problem.
    """
    C = np.column_stack([u1, u2, u3])
    s1 = 1.0
    if np.linalg.det(C) < 0.0:
        C = np.column_stack([-u1, u2, u3])
        s1 = -1.0
    Mc = C.T @ M @ C
    b = np.arcsin(np.clip(Mc[0, 2], -1.0, 1.0))
    out = []
    for t2, cs in ((b, 1.0), (wrap_angle(np.pi - b), -1.0)):
        t1 = np.arctan2(-Mc[1, 2] * cs, Mc[2, 2] * cs)
        t3 = np.arctan2(-Mc[0, 1] * cs, Mc[0, 0] * cs)
        out.append((s1 * t1, t2, t3))
    return out


def _stage1_align(model: RobotModel, targets: _BodyTargets, rot_local: dict[int, np.ndarray],
                  q: np.ndarray, sweeps: int) -> np.ndarray:
    """Closed-form alignment sweeps, root to leaves.

    Spherical three-joint stacks are solved exactly by Euler decomposition
    (the limit-feasible branch wins); every other joint takes the best
    single-axis angle against its anchor target, composed past the links in
    between at the current estimate.
    """
    lo, hi = model.limits
    q = q.copy()
    for _ in range(max(sweeps, 0)):
        fk = forward_kinematics(model, q)
        for jidx, joint in enumerate(model.joints):
            triple = targets.triples.get(jidx)
            if triple is not None:
                j1, j2, j3, anchor = triple
                if anchor not in rot_local:
                    continue
                l1 = model.joints[j1].link
                l3 = model.joints[j3].link
                parent = model.links[l1].parent
                R_par = (quat_to_matrix(fk.rotations[parent])
                         if parent >= 0 else np.eye(3))
                R_fix3 = quat_to_matrix(model.links[l3].rotation)
                M = R_par.T @ rot_local[anchor] @ R_fix3.T
                axes = [model.joints[j].axis for j in (j1, j2, j3)]
                best, best_err = None, np.inf
                for cand in _euler_triple_candidates(M, *axes):
                    th = np.clip(cand, lo[[j1, j2, j3]], hi[[j1, j2, j3]])
                    R_try = (_axis_rot(axes[0], th[0]) @ _axis_rot(axes[1], th[1])
                             @ _axis_rot(axes[2], th[2]))
                    err = float(np.sum((M - R_try) ** 2))
                    if err < best_err:
                        best, best_err = th, err
                q[[j1, j2, j3]] = best
                fk = forward_kinematics(model, q)
                continue
            if jidx in targets.triple_members:
                continue
            anchor = targets.stage1_anchor[jidx]
            if anchor is None or anchor not in rot_local:
                continue
            child = joint.link
            link = model.links[child]
            R_parent = (quat_to_matrix(fk.rotations[link.parent])
                        if link.parent >= 0 else np.eye(3))
            R_child = quat_to_matrix(fk.rotations[child])
            R_anchor = quat_to_matrix(fk.rotations[anchor])
            R_below = R_child.T @ R_anchor
            R_child_desired = rot_local[anchor] @ R_below.T
            R_fix = quat_to_matrix(link.rotation)
            M = R_parent.T @ R_child_desired @ R_fix.T
            a = joint.axis
            w = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
            theta = np.arctan2(a @ w, np.trace(M) - a @ M @ a)
            q[jidx] = np.clip(theta, lo[jidx], hi[jidx])
            fk = forward_kinematics(model, q)
    return q


def solver_params(model: RobotModel, overrides: dict | None = None) -> dict:
    params = dict(DEFAULT_SOLVER)
    params.update(model.solver)
    if overrides:
        params.update(overrides)
    return params


def retarget_body(model: RobotModel, frame: HumanPoseFrame,
                  warm_start: np.ndarray | None = None,
                  params: dict | None = None) -> RetargetResult:
    """Stage-2 body solve (with stage-1 seeding on cold starts)."""
    p = solver_params(model, params)
    targets = _targets_for(model)
    rot_t, pos_t = _pelvis_frame_targets(targets, frame)
    lam = float(p["lambda_pos"])
    lo, hi = model.limits

    if warm_start is not None:
        warm_start = np.asarray(warm_start, dtype=float)
        if warm_start.shape != (model.n_joints,):
            raise ValueError(
                f"warm_start has shape {warm_start.shape}, expected "
                f"({model.n_joints},)")
        q = np.clip(warm_start, lo, hi)
    else:
        rot_local = {idx: R for idx, _, R in rot_t}
        q = _stage1_align(model, targets, rot_local,
                          model.neutral_config(), int(p["stage1_sweeps"]))

    e, fk = _residual(model, q, rot_t, pos_t, lam)
    obj = float(e @ e)
    if not np.isfinite(obj):
        return RetargetResult(q=q, residual=obj, iterations=0, degraded=True,
                              objective_trace=[obj], iterate_trace=[q.copy()])

    mu = float(p["damping_init"])
    trace = [q.copy()]
    objs = [obj]
    iterations = 0
    n = model.n_joints

    for _ in range(int(p["max_iterations"])):
        D = _residual_jacobian(model, fk, rot_t, pos_t, lam)
        g = D.T @ e
        accepted = False
        for _ in range(_MAX_RETRIES):
            try:
                delta = np.linalg.solve(D.T @ D + mu * np.eye(n), g)
            except np.linalg.LinAlgError:
                mu *= _DAMPING_GROWTH
                continue
            q_new = np.clip(q + delta, lo, hi)
            e_new, fk_new = _residual(model, q_new, rot_t, pos_t, lam)
            obj_new = float(e_new @ e_new)
            if not np.isfinite(obj_new):
                return RetargetResult(q=q, residual=obj, iterations=iterations,
                                      degraded=True, objective_trace=objs,
                                      iterate_trace=trace)
            if obj_new <= obj:
                accepted = True
                break
            mu *= _DAMPING_GROWTH
        if not accepted:
            break
        step = float(np.max(np.abs(q_new - q)))
        decrease = obj - obj_new
        q, e, fk, obj = q_new, e_new, fk_new, obj_new
        mu = max(mu * _DAMPING_SHRINK, 1e-14)
        iterations += 1
        trace.append(q.copy())
        objs.append(obj)
        if step < float(p["step_tolerance"]) or decrease < float(p["objective_tolerance"]):
            break

    return RetargetResult(q=q, residual=obj, iterations=iterations,
                          objective_trace=objs, iterate_trace=trace)


def retarget_hand(poses: GripperPoses, cmd: GraspCommand) -> np.ndarray:
    return (1.0 - cmd.alpha) * poses.q_open + cmd.alpha * poses.q_close


def gripper_poses(model: RobotModel, mode: str) -> GripperPoses:
    modes = (model.hands or {}).get("modes", {})
    if mode not in modes:
        raise KeyError(f"model defines no hand mode '{mode}' "
                       f"(available: {sorted(modes)})")
    return GripperPoses(modes[mode]["open"], modes[mode]["close"])


def retarget_neck(frame: HumanPoseFrame,
                  limits: dict | None = None) -> NeckAngles:
    """Yaw/pitch of the head relative to the spine.

    ``limits`` is the model config ``neck`` section; without it the raw
    extraction is returned unclamped.
    """
    for name in ("spine", "head"):
        if not frame.has(name):
            raise ValueError(f"neck retargeting needs the '{name}' link")
    R_rel = frame.links["spine"].matrix().T @ frame.links["head"].matrix()
    yaw = float(np.arctan2(R_rel[1, 0], R_rel[0, 0]))
    pitch = float(np.arcsin(np.clip(-R_rel[2, 0], -1.0, 1.0)))
    degenerate = abs(R_rel[2, 0]) >= 1.0 - 1e-9
    clamped = False
    if limits:
        ylo, yhi = limits.get("yaw_limits", (-np.pi, np.pi))
        plo, phi = limits.get("pitch_limits", (-np.pi / 2, np.pi / 2))
        cy = float(np.clip(yaw, ylo, yhi))
        cp = float(np.clip(pitch, plo, phi))
        clamped = (cy != yaw) or (cp != pitch)
        yaw, pitch = cy, cp
    return NeckAngles(yaw=yaw, pitch=pitch, degenerate=degenerate, clamped=clamped)


def retarget_frame(model: RobotModel, frame: HumanPoseFrame,
                   grasp_left: GraspCommand | None = None,
                   grasp_right: GraspCommand | None = None,
                   warm_start: np.ndarray | None = None,
                   params: dict | None = None) -> RetargetResult:
    """One streamed frame: body solve + neck extraction + hand interpolation."""
    result = retarget_body(model, frame, warm_start=warm_start, params=params)
    if frame.has("head") and frame.has("spine"):
        result.neck = retarget_neck(frame, limits=model.neck)
    for side, grasp in (("left", grasp_left), ("right", grasp_right)):
        if grasp is not None:
            result.hands[side] = retarget_hand(
                gripper_poses(model, grasp.mode), grasp)
    return result


class Retargeter:
    """Per-session retargeting state: warm start carried frame to frame.

    Not reentrant; use one instance per teleoperation session.
    """

    def __init__(self, model: RobotModel, params: dict | None = None):
        self.model = model
        self.params = solver_params(model, params)
        self._warm: np.ndarray | None = None

    def reset(self) -> None:
        self._warm = None

    def retarget(self, frame: HumanPoseFrame,
                 grasp_left: GraspCommand | None = None,
                 grasp_right: GraspCommand | None = None) -> RetargetResult:
        result = retarget_frame(self.model, frame, grasp_left, grasp_right,
                                warm_start=self._warm, params=self.params)
        if not result.degraded:
            self._warm = result.q
        return result
