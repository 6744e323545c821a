import numpy as np
import pytest

from wbteleop.command import CommandVector
from wbteleop.model import build_model, bundled_model_path, load_model
from wbteleop.sim import TrackerSim, tracking_metric


def one_joint_model(kp=100.0, inertia=0.1, lo=-10.0, hi=10.0):
    return build_model({
        "name": "pendulum",
        "links": [
            {"name": "base"},
            {"name": "arm", "parent": "base",
             "joint": {"name": "j0", "axis": [0, 1, 0], "limits": [lo, hi]},
             "origin": {"xyz": [0.2, 0, 0]}},
        ],
        "sim": {"kp": kp, "inertia": inertia},
    })


def cmd_for(sim, **kw):
    kw.setdefault("q_ref", np.zeros(sim.model.n_joints))
    return CommandVector(**kw)


def test_zero_command_zero_state_is_fixed_point():
    sim = TrackerSim(one_joint_model())
    s0 = sim.initial_state()
    s1 = sim.step(s0, cmd_for(sim), 0.02)
    assert np.array_equal(s1.q, s0.q)
    assert np.array_equal(s1.dq, s0.dq)
    assert (s1.x, s1.y, s1.z, s1.roll, s1.pitch, s1.yaw) == (0,) * 6
    assert s1.time == pytest.approx(0.02)


def test_forward_velocity_integrates():
    sim = TrackerSim(one_joint_model())
    s = sim.step(sim.initial_state(), cmd_for(sim, vx=0.5), 0.02)
    assert s.x == pytest.approx(0.01)
    assert s.y == pytest.approx(0.0)


def test_velocity_follows_heading():
    sim = TrackerSim(one_joint_model())
    s0 = sim.initial_state()
    s0.yaw = np.pi / 2
    s = sim.step(s0, cmd_for(sim, vx=1.0), 0.01)
    assert s.y == pytest.approx(0.01)
    assert abs(s.x) < 1e-12


def test_yaw_rate_curves_the_path():
    sim = TrackerSim(one_joint_model())
    s = sim.initial_state()
    # Quarter circle: vx = v, yaw_rate = v/r with r = 1.
    for _ in range(100):
        s = sim.step(s, cmd_for(sim, vx=1.0, yaw_rate=1.0), np.pi / 200)
    assert s.yaw == pytest.approx(np.pi / 2)
    assert s.x == pytest.approx(1.0, abs=5e-3)
    assert s.y == pytest.approx(1.0, abs=5e-3)


def test_pd_torque_formula():
    sim = TrackerSim(one_joint_model(kp=50.0, inertia=0.2), kd=3.0)
    s = sim.initial_state()
    s.q[:] = 0.4
    s.dq[:] = -1.5
    tau = sim.pd_torque(s, np.array([1.0]))
    assert tau[0] == pytest.approx(50.0 * 0.6 - 3.0 * (-1.5))


def test_default_damping_is_critical():
    sim = TrackerSim(one_joint_model(kp=100.0, inertia=0.1))
    assert sim.kd[0] == pytest.approx(2.0 * np.sqrt(100.0 * 0.1))


def test_step_settles_within_a_second_without_overshoot():
    sim = TrackerSim(one_joint_model(kp=100.0, inertia=0.1))
    s = sim.initial_state()
    cmd = cmd_for(sim, q_ref=np.array([1.0]))
    peak = 0.0
    settled_at = None
    for i in range(500):
        s = sim.step(s, cmd, 0.002)
        peak = max(peak, s.q[0])
        if settled_at is None and abs(s.q[0] - 1.0) < 0.01:
            settled_at = s.time
    assert settled_at is not None and settled_at < 1.0
    assert peak < 1.01


def test_joint_limits_clamp_and_zero_velocity():
    sim = TrackerSim(one_joint_model(lo=-0.5, hi=0.5))
    s = sim.initial_state()
    cmd = cmd_for(sim, q_ref=np.array([2.0]))
    for _ in range(200):
        s = sim.step(s, cmd, 0.005)
    assert s.q[0] == pytest.approx(0.5)
    assert s.dq[0] == 0.0


def test_long_step_equals_chained_substeps():
    sim = TrackerSim(one_joint_model())
    cmd = cmd_for(sim, vx=0.3, z=0.7, q_ref=np.array([0.8]))
    a = sim.step(sim.initial_state(), cmd, 0.01)
    b = sim.initial_state()
    for _ in range(5):
        b = sim.step(b, cmd, 0.002)
    assert a.q.tobytes() == b.q.tobytes()
    assert a.dq.tobytes() == b.dq.tobytes()
    assert a.x == b.x and a.z == b.z


def test_height_low_pass_matches_exponential():
    sim = TrackerSim(one_joint_model())
    s = sim.initial_state()
    cmd = cmd_for(sim, z=1.0)
    for _ in range(50):
        s = sim.step(s, cmd, 0.002)
    # First-order relaxation with tau = 0.1 s, evaluated exactly.
    assert s.z == pytest.approx(1.0 - np.exp(-s.time / 0.1), abs=1e-12)


def test_energy_never_increases_at_control_rate():
    model = one_joint_model()
    sim = TrackerSim(model)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = sim.initial_state()
        s.q[:] = rng.uniform(-3, 3)
        s.dq[:] = rng.uniform(-10, 10)
        tgt = rng.uniform(-3, 3)
        cmd = cmd_for(sim, q_ref=np.array([tgt]))
        energy = (0.5 * sim.inertia[0] * s.dq[0] ** 2
                  + 0.5 * sim.kp[0] * (s.q[0] - tgt) ** 2)
        for _ in range(400):
            s = sim.step(s, cmd, 0.002)
            e = (0.5 * sim.inertia[0] * s.dq[0] ** 2
                 + 0.5 * sim.kp[0] * (s.q[0] - tgt) ** 2)
            assert e <= energy + 1e-12
            energy = e


def test_achieved_command_echoes_kinematic_dims():
    model = load_model(bundled_model_path())
    sim = TrackerSim(model)
    s = sim.initial_state()
    cmd = CommandVector(vx=0.4, vy=-0.2, z=0.8, yaw_rate=0.5,
                        q_ref=np.full(model.n_joints, 0.1),
                        neck=np.array([0.2, -0.1]),
                        hand_left=np.linspace(0, 1, 7),
                        hand_right=np.linspace(1, 0, 7))
    s = sim.step(s, cmd, 0.01)
    ach = sim.achieved_command(s, cmd)
    assert ach.vx == cmd.vx and ach.yaw_rate == cmd.yaw_rate
    assert np.array_equal(ach.neck, cmd.neck)
    assert np.array_equal(ach.hand_left, cmd.hand_left)
    assert 0.0 < ach.z < 0.8              # still relaxing toward the command
    assert np.all(np.abs(ach.q_ref) < 0.1)


def test_tracking_metric_values():
    assert tracking_metric(np.zeros(4), np.zeros(4)).r_track == 1.0
    m = tracking_metric(np.array([0.1, 0.0]), np.zeros(2), alpha=1.0)
    assert m.error_norm == pytest.approx(0.1)
    assert m.r_track == pytest.approx(np.exp(-0.1))
    harsher = tracking_metric(np.array([0.1, 0.0]), np.zeros(2), alpha=3.0)
    assert harsher.r_track == pytest.approx(np.exp(-0.3))
    assert harsher.r_track < m.r_track


def test_tracking_metric_accepts_command_vectors():
    a = CommandVector(vx=1.0, q_ref=np.zeros(2))
    b = CommandVector(vx=1.0, q_ref=np.zeros(2))
    assert tracking_metric(a, b).r_track == 1.0
    with pytest.raises(ValueError, match="alpha"):
        tracking_metric(a, b, alpha=0.0)


def test_tracking_metric_rejects_layout_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        tracking_metric(np.zeros(3), np.zeros(4))


def test_step_validates_inputs():
    sim = TrackerSim(one_joint_model())
    s = sim.initial_state()
    with pytest.raises(ValueError, match="dt"):
        sim.step(s, cmd_for(sim), -0.01)
    with pytest.raises(ValueError, match="q_ref"):
        sim.step(s, CommandVector(q_ref=np.zeros(3)), 0.01)
    with pytest.raises(ValueError, match="shape"):
        sim.initial_state(q0=np.zeros(2))


def test_gains_validated():
    with pytest.raises(ValueError, match="positive"):
        TrackerSim(one_joint_model(), kp=0.0)
