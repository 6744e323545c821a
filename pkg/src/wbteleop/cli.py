"""Command line front end.

Every long-running subcommand honors Ctrl-C: the teleop loop converts it
into an emergency stop before shutting down, the service commands just
exit cleanly.  Broker endpoints default to the WBTELEOP_HOST /
WBTELEOP_PORT / WBTELEOP_WS_PORT environment variables so a rig's address
only has to be configured once per shell.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_HOST = os.environ.get("WBTELEOP_HOST", "127.0.0.1")
DEFAULT_PORT = int(os.environ.get("WBTELEOP_PORT", "7447"))
DEFAULT_WS_PORT = int(os.environ.get("WBTELEOP_WS_PORT", "7448"))


def _add_bus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--host", default=DEFAULT_HOST,
                   help="broker host (env WBTELEOP_HOST)")
    p.add_argument("--port", type=int, default=DEFAULT_PORT,
                   help="broker port (env WBTELEOP_PORT)")


def _add_model_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default=None,
                   help="robot model YAML (default: bundled demo humanoid)")


def _load_model(args):
    from .model import bundled_model_path, load_model

    return load_model(args.model or bundled_model_path())


def _stop_event(message: str) -> threading.Event:
    stop = threading.Event()

    def handler(signum, frame):
        if stop.is_set():
            raise KeyboardInterrupt
        print(message, file=sys.stderr)
        stop.set()

    signal.signal(signal.SIGINT, handler)
    return stop


def cmd_broker(args) -> int:
    from .bus.broker import serve_broker

    try:
        serve_broker(args.host, args.port, args.ws_port)
    except KeyboardInterrupt:
        pass
    return 0


def cmd_gen_motion(args) -> int:
    from .motion import generate_motion_file

    model = _load_model(args)
    count = generate_motion_file(model, args.out, args.kind,
                                 duration=args.duration, rate_hz=args.rate,
                                 seed=args.seed)
    print(f"wrote {count} frames of '{args.kind}' to {args.out}")
    return 0


def cmd_teleop(args) -> int:
    from .motion import MOTION_KINDS, generate_motion, read_pose_file
    from .pipeline import run_teleop

    model = _load_model(args)
    if args.motion in MOTION_KINDS:
        duration = args.duration or 10.0
        frames = generate_motion(model, args.motion, duration=duration,
                                 rate_hz=args.rate, seed=args.seed)
    else:
        frames, header = read_pose_file(args.motion)
        if header.get("links") != model.human_links:
            print("error: pose file links do not match the model",
                  file=sys.stderr)
            return 2
    stop = _stop_event("interrupt: sending emergency stop")
    report = run_teleop(model, frames, duration_s=args.duration,
                        rate_hz=args.rate, record_path=args.record,
                        speed=args.speed, host=args.host, port=args.port,
                        ws_port=args.ws_port, stop=stop)
    print(report.describe())
    return 0


def cmd_sim(args) -> int:
    from .pipeline import TrackerNode

    model = _load_model(args)
    stop = _stop_event("interrupt: stopping tracker")
    node = TrackerNode(model, args.host, args.port,
                       nominal_rate_hz=args.rate).start()
    print(f"tracker online against {args.host}:{args.port}", file=sys.stderr)
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        node.stop()
    print(f"steps {node.steps}  mean r_track {node.mean_r_track:.4f}")
    return 0


def cmd_record(args) -> int:
    from .command import LayoutDescriptor
    from .pipeline import RecorderNode

    model = _load_model(args)
    layout = LayoutDescriptor.from_model(model)
    stop = _stop_event("interrupt: closing episode")
    node = RecorderNode(args.out, layout, args.host, args.port,
                        rate_hz=args.rate).start()
    print(f"recording to {args.out}", file=sys.stderr)
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        node.stop()
    summary = node.summary
    if summary is None:
        return 1
    print(f"wrote {summary.count} records, {len(summary.marks)} marks, "
          f"{summary.image_count} images to {args.out}")
    return 0


def cmd_segment(args) -> int:
    from .recorder import segment

    summary = segment(args.input, args.output, args.start, args.end)
    print(f"wrote records [{args.start}, {args.end}] "
          f"({summary.count} total) to {args.output}")
    return 0


def _print_filter_report(report) -> None:
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    for start, end, why in report.dropped:
        print(f"dropped [{start}, {end}]: {why}")
    for start, end in report.kept:
        print(f"kept    [{start}, {end}]")


def cmd_filter(args) -> int:
    from .recorder import filter_idle, split_episodes

    if args.split:
        report = split_episodes(args.input, args.output)
        _print_filter_report(report)
        print(f"split into {len(report.kept)} episodes under {args.output}")
        return 0
    report = filter_idle(args.input, args.output, eps=args.eps,
                         hold_s=args.hold)
    _print_filter_report(report)
    print(f"collapsed {len(report.dropped)} idle stretches into {args.output}")
    return 0


def cmd_replay(args) -> int:
    from .bus.client import BusClient
    from .bus.protocol import MsgType
    from .pipeline import pack_vector
    from .recorder import replay

    stop = _stop_event("interrupt: stopping replay")
    with BusClient(host=args.host, port=args.port, name="replay") as client:
        def publish(ts, cmd, rec):
            if stop.is_set():
                raise KeyboardInterrupt
            client.publish(MsgType.CMD, pack_vector(cmd), timestamp=ts)

        try:
            count = replay(args.input, publish, speed=args.speed)
        except KeyboardInterrupt:
            return 1
    print(f"replayed {count} records at {args.speed:g}x")
    return 0


def cmd_run_policy(args) -> int:
    from .bus.client import BusClient
    from .bus.protocol import MsgType
    from .command import NormalizationStats
    from .pipeline import pack_vector, unpack_vector
    from .policy import EchoPolicyServer, HistoryBuffer, PolicyClient, \
        PolicyRunner
    from .recorder import compute_stats

    echo = None
    if args.policy is not None:
        host, _, port = args.policy.rpartition(":")
        policy_addr = (host or "127.0.0.1", int(port))
    else:
        echo = EchoPolicyServer(latency_s=args.echo_latency_ms / 1e3)
        policy_addr = (echo.host, echo.port)
        print(f"echo policy server on {policy_addr[0]}:{policy_addr[1]} "
              f"({args.echo_latency_ms:g} ms)", file=sys.stderr)
    if args.stats is not None:
        stats = compute_stats(args.stats, "state")
    else:
        from .command import LayoutDescriptor

        model = _load_model(args)
        stats = NormalizationStats.identity(LayoutDescriptor.from_model(model).dim)

    stop = _stop_event("interrupt: stopping policy runner")
    bus = BusClient(host=args.host, port=args.port, subscribe=("STATE",),
                    name="policy-runner")
    client = PolicyClient(*policy_addr)
    runner = PolicyRunner(client, stats, history=HistoryBuffer(stats.dim),
                          rate_hz=args.rate)
    try:
        def on_action(flat: np.ndarray) -> None:
            bus.publish(MsgType.CMD, pack_vector(flat))

        period = 1.0 / args.rate
        t0 = time.monotonic()
        k = 0
        while not stop.is_set():
            if args.duration and time.monotonic() - t0 >= args.duration:
                break
            msg = None
            for msg in bus.drain(MsgType.STATE):
                pass
            if msg is not None:
                runner.observe(unpack_vector(msg.payload))
            action = runner.tick()
            if action is not None:
                on_action(action)
            k += 1
            delay = t0 + k * period - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        elapsed = time.monotonic() - t0
        stats_ = runner.scheduler.stats
        rate = runner.report.ticks / elapsed if elapsed > 0 else 0.0
        print(f"ticks {runner.report.ticks}  rate {rate:.2f} Hz  "
              f"chunks {stats_.chunks_started}  "
              f"fallbacks {runner.report.fallbacks}  "
              f"starved ticks {stats_.starved_ticks}")
    finally:
        runner.close()
        bus.close()
        if echo is not None:
            echo.close()
    return 0


def cmd_latency(args) -> int:
    from .bus.client import BusClient, BusTimeout

    with BusClient(host=args.host, port=args.port, subscribe=("LATENCY",),
                   name="latency-probe") as client:
        samples = []
        for _ in range(args.count):
            try:
                samples.append(client.measure_latency(timeout=args.timeout))
            except BusTimeout as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            time.sleep(args.interval)
    ms = np.array(samples) * 1e3
    print(f"bus round trip over {len(ms)} probes: "
          f"mean {ms.mean():.3f} ms  min {ms.min():.3f} ms  "
          f"max {ms.max():.3f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wbteleop",
        description="Whole-body teleoperation tools: broker, teleop loop, "
                    "tracker, recorder, episode utilities, policy runner.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run the message broker")
    _add_bus_args(p)
    p.add_argument("--ws-port", type=int, default=DEFAULT_WS_PORT,
                   help="websocket bridge port (env WBTELEOP_WS_PORT)")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("gen-motion", help="synthesize a pose recording")
    _add_model_arg(p)
    p.add_argument("out", help="output .tw2m path")
    p.add_argument("--kind", default="walk",
                   help="walk, crouch, reach, or head-scan")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--rate", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_motion)

    p = sub.add_parser("teleop",
                       help="run the full loop on an embedded broker")
    _add_model_arg(p)
    _add_bus_args(p)
    p.add_argument("--ws-port", type=int, default=DEFAULT_WS_PORT,
                   help="websocket bridge port for operator consoles")
    p.add_argument("--motion", default="walk",
                   help="motion kind or a .tw2m pose file")
    p.add_argument("--duration", type=float, default=None,
                   help="seconds to stream (default: whole motion)")
    p.add_argument("--rate", type=float, default=100.0,
                   help="pose stream rate in Hz")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record", default=None, help="episode output path")
    p.set_defaults(func=cmd_teleop)

    p = sub.add_parser("sim", help="run a standalone tracker node")
    _add_model_arg(p)
    _add_bus_args(p)
    p.add_argument("--rate", type=float, default=100.0,
                   help="nominal command rate for the first step")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("record", help="run a standalone episode recorder")
    _add_model_arg(p)
    _add_bus_args(p)
    p.add_argument("out", help="episode output path (.tw2e)")
    p.add_argument("--rate", type=float, default=30.0)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("segment", help="cut a record span into a new episode")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--end", type=int, required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("filter", help="drop idle stretches or split episodes")
    p.add_argument("input")
    p.add_argument("output", help="output file (or directory with --split)")
    p.add_argument("--eps", type=float, default=1e-3,
                   help="idle threshold on command deltas")
    p.add_argument("--hold", type=float, default=2.0,
                   help="seconds of stillness before collapsing")
    p.add_argument("--split", action="store_true",
                   help="split by episode marks instead")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("replay", help="replay an episode onto the bus")
    _add_bus_args(p)
    p.add_argument("input")
    p.add_argument("--speed", type=float, default=1.0)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("run-policy", help="drive commands from a policy server")
    _add_model_arg(p)
    _add_bus_args(p)
    p.add_argument("--policy", default=None,
                   help="policy server HOST:PORT (default: local echo server)")
    p.add_argument("--echo-latency-ms", type=float, default=40.0,
                   help="latency of the built-in echo server")
    p.add_argument("--stats", default=None,
                   help="episode file to take normalization stats from")
    p.add_argument("--rate", type=float, default=30.0)
    p.add_argument("--duration", type=float, default=0.0,
                   help="seconds to run (0 = until interrupted)")
    p.set_defaults(func=cmd_run_policy)

    p = sub.add_parser("latency", help="measure bus round-trip time")
    _add_bus_args(p)
    p.add_argument("-n", "--count", type=int, default=10)
    p.add_argument("--interval", type=float, default=0.05)
    p.add_argument("--timeout", type=float, default=1.0)
    p.set_defaults(func=cmd_latency)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
