import threading
import time

import numpy as np
import pytest

from wbteleop.bus.broker import BrokerThread
from wbteleop.bus.client import BusClient
from wbteleop.bus.protocol import FLAG_ACK, CtrlEvent, MsgType, unpack_ctrl
from wbteleop.bus.session import SessionState
from wbteleop.command import LayoutDescriptor, unflatten
from wbteleop.model import bundled_model_path, load_model
from wbteleop.motion import generate_motion
from wbteleop.pipeline import (OperatorNode, TrackerNode, pack_frame,
                               pack_vector, run_teleop, unpack_vector)
from wbteleop.recorder import read_episode


@pytest.fixture(scope="module")
def model():
    return load_model(bundled_model_path())


@pytest.fixture()
def broker():
    with BrokerThread(port=0, ws_port=None) as bt:
        yield bt


class TestVectorCodec:
    def test_round_trip(self):
        vec = np.linspace(-3.0, 4.0, 17)
        assert np.array_equal(unpack_vector(pack_vector(vec)), vec)

    def test_not_a_vector(self):
        with pytest.raises(ValueError, match="1-d"):
            pack_vector(np.zeros((2, 2)))

    def test_truncated_payload(self):
        blob = pack_vector(np.zeros(4))
        with pytest.raises(ValueError, match="bytes"):
            unpack_vector(blob[:-1])


class TestOperatorNode:
    def feed(self, ctl, frames, model, n=None):
        for frame in frames[:n]:
            frame.timestamp = time.time_ns()
            ctl.publish(MsgType.POSE, pack_frame(frame, model.human_links),
                        timestamp=frame.timestamp)
            time.sleep(0.01)

    def test_idle_session_blocks_commands(self, model, broker):
        frames = generate_motion(model, "walk", duration=0.3, rate_hz=50.0)
        with OperatorNode(model, "127.0.0.1", broker.port).start() as node, \
                BusClient(port=broker.port, subscribe=("CMD",),
                          name="spy") as spy:
            self.feed(spy, frames, model)
            time.sleep(0.2)
            assert node.frames_in > 0
            assert node.commands_out == 0
            assert spy.drain(MsgType.CMD) == []

    def test_start_opens_the_gate(self, model, broker):
        frames = generate_motion(model, "walk", duration=0.4, rate_hz=50.0)
        with OperatorNode(model, "127.0.0.1", broker.port).start(), \
                BusClient(port=broker.port, subscribe=("CMD", "CTRL"),
                          name="spy") as spy:
            spy.send_ctrl(CtrlEvent.START)
            ack = spy.recv(MsgType.CTRL, timeout=1.0)
            assert ack is not None and ack.flags & FLAG_ACK
            event, state = unpack_ctrl(ack.payload)
            assert event is CtrlEvent.START
            assert state == int(SessionState.ACTIVE)
            self.feed(spy, frames, model)
            time.sleep(0.2)
            cmds = spy.drain(MsgType.CMD)
            assert len(cmds) >= len(frames) - 2

    def test_pause_streams_zero_velocity_holds(self, model, broker):
        layout = LayoutDescriptor.from_model(model)
        frames = generate_motion(model, "walk", duration=0.6, rate_hz=50.0)
        with OperatorNode(model, "127.0.0.1", broker.port).start(), \
                BusClient(port=broker.port, subscribe=("CMD", "CTRL"),
                          name="spy") as spy:
            spy.send_ctrl(CtrlEvent.START)
            assert spy.recv(MsgType.CTRL, timeout=1.0) is not None
            self.feed(spy, frames, model, n=10)
            time.sleep(0.1)
            spy.drain(MsgType.CMD)
            spy.send_ctrl(CtrlEvent.PAUSE)
            assert spy.recv(MsgType.CTRL, timeout=1.0) is not None
            self.feed(spy, frames[10:], model, n=10)
            time.sleep(0.2)
            held = spy.drain(MsgType.CMD)
            assert held
            for msg in held:
                cmd = unflatten(unpack_vector(msg.payload), layout)
                assert cmd.vx == 0.0 and cmd.vy == 0.0 and cmd.yaw_rate == 0.0

    def test_illegal_event_is_rejected_not_fatal(self, model, broker):
        with OperatorNode(model, "127.0.0.1", broker.port).start() as node, \
                BusClient(port=broker.port, subscribe=("CTRL",),
                          name="spy") as spy:
            spy.send_ctrl(CtrlEvent.RESUME)
            assert spy.recv(MsgType.CTRL, timeout=0.3) is None
            assert node.machine.state is SessionState.IDLE


class TestTrackerNode:
    def test_states_echo_command_timestamps(self, model, broker):
        layout = LayoutDescriptor.from_model(model)
        with TrackerNode(model, "127.0.0.1", broker.port).start() as node, \
                BusClient(port=broker.port, subscribe=("STATE",),
                          name="spy") as spy:
            flat = np.zeros(layout.dim)
            flat[2] = 0.78
            stamps = [time.time_ns() + i * 10_000_000 for i in range(5)]
            for ts in stamps:
                spy.publish(MsgType.CMD, pack_vector(flat), timestamp=ts)
            got = []
            for _ in stamps:
                msg = spy.recv(MsgType.STATE, timeout=1.0)
                assert msg is not None
                got.append(msg.timestamp)
            assert got == stamps
            assert node.steps == len(stamps)
            assert node.mean_r_track > 0.0


class TestRunTeleop:
    def test_full_loop_produces_report_and_episode(self, model, tmp_path):
        frames = generate_motion(model, "walk", duration=1.5, rate_hz=50.0,
                                 seed=11)
        out = tmp_path / "loop.tw2e"
        report = run_teleop(model, frames, rate_hz=50.0, record_path=out)
        assert report.frames_sent == len(frames)
        assert report.commands == len(frames) - 1
        assert report.states == report.commands
        assert report.drops == 0
        assert report.mean_r_track > 0.9
        assert report.latency_p99_ms < 100.0
        assert np.isfinite(report.echo_rtt_ms)
        ep = read_episode(out)
        assert len(ep.records) == report.records > 0
        kinds = (m.kind for m in ep.marks)
        assert "episode-start" in kinds
        assert any(m.kind == "episode-end" for m in ep.marks)

    def test_interrupt_sends_estop_instead_of_end_mark(self, model, tmp_path):
        frames = generate_motion(model, "walk", duration=1.0, rate_hz=50.0)
        out = tmp_path / "estop.tw2e"
        stop = threading.Event()

        def trip():
            time.sleep(0.4)
            stop.set()

        threading.Thread(target=trip, daemon=True).start()
        report = run_teleop(model, frames, rate_hz=50.0, record_path=out,
                            stop=stop)
        assert 0 < report.frames_sent < len(frames)
        ep = read_episode(out)
        assert all(m.kind != "episode-end" for m in ep.marks)
