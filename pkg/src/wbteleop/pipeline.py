"""End-to-end teleoperation loop assembled from bus nodes.

Each node owns one bus client and one thread: the operator node turns
incoming pose frames into gated commands, the tracker node turns commands
into simulated robot states, and the recorder node downsamples both
streams into an episode file.  ``run_teleop`` wires them to an embedded
broker, paces a pose stream through, and reports latency and tracking
quality.

Message payloads on the data plane are plain f64 vectors in the command
layout; pose frames use the motion-capture frame codec.  A message's
header timestamp always carries the originating pose capture time, so the
pose-to-state delay is measurable at any hop.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .bus.client import BusClient, BusTimeout
from .bus.protocol import FLAG_ACK, CtrlEvent, MsgType, unpack_ctrl
from .bus.session import IllegalTransition, SessionMachine
from .command import CommandSession, LayoutDescriptor, flatten, unflatten
from .model import RobotModel
from .motion import pack_frame, unpack_frame
from .recorder import EpisodeWriter, NearestSampler
from .retarget import Retargeter
from .sim import TrackerSim, tracking_metric

log = logging.getLogger(__name__)

_VEC_HEAD = struct.Struct("<I")

MARKS_BY_EVENT = {
    CtrlEvent.MARK_EPISODE_START: "episode-start",
    CtrlEvent.MARK_EPISODE_END: "episode-end",
    CtrlEvent.MARK_FAILURE: "failure",
    CtrlEvent.PAUSE: "pause",
}


def pack_vector(flat: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(flat, dtype=float)
    if flat.ndim != 1:
        raise ValueError("expected a 1-d vector")
    return _VEC_HEAD.pack(flat.shape[0]) + flat.tobytes()


def unpack_vector(payload: bytes) -> np.ndarray:
    if len(payload) < _VEC_HEAD.size:
        raise ValueError("vector payload too short")
    (dim,) = _VEC_HEAD.unpack_from(payload)
    want = _VEC_HEAD.size + 8 * dim
    if len(payload) != want:
        raise ValueError(f"vector payload is {len(payload)} bytes, "
                         f"dim {dim} needs {want}")
    return np.frombuffer(payload, dtype=float, offset=_VEC_HEAD.size).copy()


class _Node:
    """Thread plus bus client lifecycle shared by the pipeline nodes."""

    def __init__(self, name: str, host: str, port: int,
                 subscribe: tuple[str, ...]):
        self.client = BusClient(host=host, port=port, subscribe=subscribe,
                                name=name)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._guarded, daemon=True,
                                        name=name)

    def start(self) -> "_Node":
        self._thread.start()
        return self

    def _guarded(self) -> None:
        try:
            self._run()
        except Exception:
            if not self._stop.is_set():
                log.exception("%s crashed", self._thread.name)

    def _run(self) -> None:
        raise NotImplementedError

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=3.0)
        self.client.close()

    def __enter__(self) -> "_Node":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


class OperatorNode(_Node):
    """POSE + CTRL in, gated CMD (and CTRL acks) out."""

    def __init__(self, model: RobotModel, host: str, port: int,
                 layout: LayoutDescriptor | None = None):
        super().__init__("operator", host, port, ("POSE", "CTRL"))
        self.model = model
        self.layout = layout or LayoutDescriptor.from_model(model)
        self.retargeter = Retargeter(model)
        self.session = CommandSession()
        self.machine = SessionMachine()
        self.frames_in = 0
        self.commands_out = 0
        self._ack_client = BusClient(host=host, port=port, name="operator-ctl")
        self._last_ts: int | None = None

    def _handle_ctrl(self, msg) -> None:
        event, _ = unpack_ctrl(msg.payload)
        try:
            state = self.machine.apply(event, now=time.monotonic())
        except IllegalTransition as exc:
            log.warning("rejected control event: %s", exc)
            return
        if event in (CtrlEvent.STOP, CtrlEvent.ESTOP):
            self.session.reset()
            self.retargeter.reset()
            self._last_ts = None
        self._ack_client.send_ctrl(event, state=int(state), ack=True)

    def _handle_pose(self, msg) -> None:
        frame = unpack_frame(msg.payload, self.model.human_links)
        self.frames_in += 1
        if self._last_ts is not None and frame.timestamp <= self._last_ts:
            return   # stale or duplicated capture, nothing to derive from it
        result = self.retargeter.retarget(frame)
        first = self._last_ts is None
        dt = 1.0 if first else (frame.timestamp - self._last_ts) / 1e9
        self._last_ts = frame.timestamp
        nh = self.layout.hand_dof
        live = self.session.push(
            frame.link("pelvis"), result.q, dt,
            neck=result.neck.as_array() if result.neck is not None
            else np.zeros(len(self.layout.neck_joints)),
            hand_left=result.hands.get("left", np.zeros(nh)),
            hand_right=result.hands.get("right", np.zeros(nh)),
            timestamp=frame.timestamp)
        out = self.machine.gate(live, now=time.monotonic())
        if out is None:
            return
        self.client.publish(MsgType.CMD, pack_vector(flatten(out, self.layout)),
                            timestamp=msg.timestamp)
        self.commands_out += 1

    def _run(self) -> None:
        while not self._stop.is_set():
            msg = self.client.recv(MsgType.CTRL)
            if msg is not None and not msg.flags & FLAG_ACK:
                self._handle_ctrl(msg)
            msg = self.client.recv(MsgType.POSE, timeout=0.02)
            if msg is not None:
                self._handle_pose(msg)

    def stop(self) -> None:
        super().stop()
        self._ack_client.close()


class TrackerNode(_Node):
    """CMD in, simulated STATE out; also answers latency probes."""

    def __init__(self, model: RobotModel, host: str, port: int,
                 layout: LayoutDescriptor | None = None,
                 nominal_rate_hz: float = 100.0):
        super().__init__("tracker", host, port, ("CMD", "LATENCY"))
        self.model = model
        self.layout = layout or LayoutDescriptor.from_model(model)
        self.sim = TrackerSim(model)
        self.nominal_dt = 1.0 / nominal_rate_hz
        self.state = None
        self.steps = 0
        self.r_track_sum = 0.0
        self._last_ts: int | None = None
        self._echo = threading.Thread(target=self.client.echo_latency_forever,
                                      daemon=True, name="latency-echo")

    @property
    def mean_r_track(self) -> float:
        return self.r_track_sum / self.steps if self.steps else 0.0

    def _handle_cmd(self, msg) -> None:
        cmd = unflatten(unpack_vector(msg.payload), self.layout,
                        timestamp=msg.timestamp)
        if self.state is None:
            self.state = self.sim.initial_state(q0=cmd.q_ref, z0=cmd.z)
        if self._last_ts is None or msg.timestamp <= self._last_ts:
            dt = self.nominal_dt
        else:
            dt = min((msg.timestamp - self._last_ts) / 1e9, 0.5)
        self._last_ts = msg.timestamp
        self.state = self.sim.step(self.state, cmd, dt)
        achieved = self.sim.achieved_command(self.state, cmd)
        self.r_track_sum += tracking_metric(cmd, achieved).r_track
        self.steps += 1
        self.client.publish(MsgType.STATE,
                            pack_vector(flatten(achieved, self.layout)),
                            timestamp=msg.timestamp)

    def _run(self) -> None:
        self._echo.start()
        while not self._stop.is_set():
            msg = self.client.recv(MsgType.CMD, timeout=0.02)
            if msg is not None:
                self._handle_cmd(msg)


class RecorderNode(_Node):
    """CMD + STATE + FRAME in, one episode file out; CTRL events mark it."""

    def __init__(self, path, layout: LayoutDescriptor, host: str, port: int,
                 rate_hz: float = 30.0, meta: dict | None = None):
        super().__init__("recorder", host, port,
                         ("CMD", "STATE", "FRAME", "CTRL"))
        self.path = path
        self.sampler = NearestSampler(rate_hz=rate_hz)
        self.writer = EpisodeWriter(path, layout, rate_hz=rate_hz, meta=meta)
        self.summary = None
        self._lock = threading.Lock()

    def _pump(self) -> None:
        for msg in self.client.drain(MsgType.CMD):
            self.sampler.push_cmd(msg.timestamp, unpack_vector(msg.payload))
        for msg in self.client.drain(MsgType.STATE):
            self.sampler.push_state(msg.timestamp, unpack_vector(msg.payload))
        for msg in self.client.drain(MsgType.FRAME):
            self.sampler.push_image(msg.timestamp, msg.payload)
        for msg in self.client.drain(MsgType.CTRL):
            if msg.flags & FLAG_ACK:
                continue
            event, _ = unpack_ctrl(msg.payload)
            kind = MARKS_BY_EVENT.get(event)
            if kind is not None:
                with self._lock:
                    if not self.writer._closed:
                        self.writer.mark(kind, timestamp=msg.timestamp)
        with self._lock:
            if not self.writer._closed:
                for tick, cmd, state, image in self.sampler.poll(time.time_ns()):
                    self.writer.add(tick, cmd, state, image=image)

    def _run(self) -> None:
        while not self._stop.is_set():
            self._pump()
            time.sleep(0.01)
        self._pump()

    def finish(self):
        with self._lock:
            if not self.writer._closed:
                self.summary = self.writer.close()
        return self.summary

    def stop(self) -> None:
        super().stop()
        self.finish()


@dataclass
class TeleopReport:
    frames_sent: int = 0
    commands: int = 0
    states: int = 0
    records: int = 0
    drops: int = 0
    mean_r_track: float = 0.0
    echo_rtt_ms: float = float("nan")
    latency_p50_ms: float = float("nan")
    latency_p99_ms: float = float("nan")
    episode_path: str | None = None
    latencies_ms: list[float] = field(default_factory=list)

    def describe(self) -> str:
        lines = [
            f"pose frames sent      {self.frames_sent}",
            f"commands produced     {self.commands}",
            f"states observed       {self.states}",
            f"records written       {self.records}",
            f"messages dropped      {self.drops}",
            f"bus echo delay        {self.echo_rtt_ms:.2f} ms",
            f"pose->state latency   p50 {self.latency_p50_ms:.2f} ms, "
            f"p99 {self.latency_p99_ms:.2f} ms",
            f"mean r_track          {self.mean_r_track:.4f}",
        ]
        if self.episode_path:
            lines.append(f"episode               {self.episode_path}")
        return "\n".join(lines)


class PoseStream:
    """Paces recorded or synthesized frames onto the bus in real time.

    Frame timestamps are rewritten to the wall clock at send time so the
    downstream nodes measure genuine pipeline delay, scaled by ``speed``.
    """

    def __init__(self, client: BusClient, frames, link_names: list[str],
                 rate_hz: float, speed: float = 1.0):
        if rate_hz <= 0 or speed <= 0:
            raise ValueError("rate and speed must be positive")
        self.client = client
        self.frames = frames
        self.link_names = link_names
        self.period = 1.0 / (rate_hz * speed)
        self.sent = 0
        self.interrupted = False

    def run(self, stop: threading.Event | None = None,
            duration_s: float | None = None) -> int:
        t0 = time.monotonic()
        for i, frame in enumerate(self.frames):
            if stop is not None and stop.is_set():
                self.interrupted = True
                break
            if duration_s is not None and time.monotonic() - t0 >= duration_s:
                break
            frame.timestamp = time.time_ns()
            self.client.publish(MsgType.POSE,
                                pack_frame(frame, self.link_names),
                                timestamp=frame.timestamp)
            self.sent += 1
            target = t0 + (i + 1) * self.period
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        return self.sent


def run_teleop(model: RobotModel, frames, duration_s: float | None = None,
               rate_hz: float = 100.0, record_path=None,
               record_rate_hz: float = 30.0, speed: float = 1.0,
               host: str = "127.0.0.1", port: int | None = None,
               ws_port: int | None = None,
               stop: threading.Event | None = None,
               meta: dict | None = None) -> TeleopReport:
    """Drive a pose stream through the full loop on an embedded broker.

    ``frames`` is any iterable of pose frames (e.g. from generate_motion
    or read_pose_file).  ``stop`` aborts the stream early and triggers an
    emergency stop instead of a clean shutdown.  The embedded broker binds
    ``port`` (and ``ws_port`` when given), so external consoles can attach
    to a live session.
    """
    from .bus.broker import BrokerThread

    layout = LayoutDescriptor.from_model(model)
    report = TeleopReport()
    with BrokerThread(host=host, port=port or 0, ws_port=ws_port) as broker:
        operator = OperatorNode(model, host, broker.port, layout).start()
        tracker = TrackerNode(model, host, broker.port, layout,
                              nominal_rate_hz=rate_hz).start()
        recorder = None
        if record_path is not None:
            recorder = RecorderNode(record_path, layout, host, broker.port,
                                    rate_hz=record_rate_hz, meta=meta).start()
        monitor = BusClient(host=host, port=broker.port,
                            subscribe=("STATE", "LATENCY"), name="monitor")
        ctl = BusClient(host=host, port=broker.port, name="console")
        samples: list[float] = []
        done = threading.Event()

        def collect() -> None:
            while not done.is_set():
                msg = monitor.recv(MsgType.STATE, timeout=0.05)
                if msg is not None:
                    samples.append((time.time_ns() - msg.timestamp) / 1e6)

        collector = threading.Thread(target=collect, daemon=True,
                                     name="latency-monitor")
        collector.start()
        try:
            ctl.send_ctrl(CtrlEvent.START)
            ctl.send_ctrl(CtrlEvent.MARK_EPISODE_START)
            time.sleep(0.05)

            stream = PoseStream(ctl, frames, model.human_links, rate_hz,
                                speed=speed)
            stream.run(stop=stop, duration_s=duration_s)
            report.frames_sent = stream.sent

            deadline = time.monotonic() + 2.0
            while (tracker.steps < operator.commands_out
                   and time.monotonic() < deadline):
                time.sleep(0.01)
            if stream.interrupted:
                ctl.send_ctrl(CtrlEvent.ESTOP)
            else:
                ctl.send_ctrl(CtrlEvent.MARK_EPISODE_END)
                ctl.send_ctrl(CtrlEvent.STOP)
            try:
                report.echo_rtt_ms = monitor.measure_latency(timeout=1.0) * 1e3
            except BusTimeout:
                pass
            time.sleep(0.15)
            done.set()
            collector.join(timeout=1.0)

            report.states = len(samples)
            if samples:
                report.latencies_ms = samples
                report.latency_p50_ms = float(np.percentile(samples, 50))
                report.latency_p99_ms = float(np.percentile(samples, 99))
            report.commands = operator.commands_out
            report.mean_r_track = tracker.mean_r_track
            report.drops = (
                operator.client.drops[MsgType.POSE]
                + tracker.client.drops[MsgType.CMD]
                + monitor.drops[MsgType.STATE]
                + (recorder.client.drops[MsgType.CMD]
                   + recorder.client.drops[MsgType.STATE]
                   if recorder else 0))
        finally:
            done.set()
            operator.stop()
            tracker.stop()
            if recorder is not None:
                recorder.stop()
                if recorder.summary is not None:
                    report.records = recorder.summary.count
                    report.episode_path = str(record_path)
            monitor.close()
            ctl.close()
    return report
