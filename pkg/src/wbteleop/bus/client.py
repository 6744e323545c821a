"""Blocking bus client for the pipeline processes.

One background thread reads the socket and sorts messages into per-type
queues; callers publish and poll without touching asyncio.  Sequence gaps
per (peer-agnostic) type are counted as drops, as are messages discarded
because a queue backed up.
"""

from __future__ import annotations

import itertools
import queue
import socket
import threading
import time

from .protocol import (HEADER_SIZE, CtrlEvent, FLAG_ACK, FLAG_REPLY, Message,
                       MsgType, StreamDecoder, encode, pack_ctrl,
                       pack_handshake, unpack_handshake)

QUEUE_DEPTH = 4096
LATENCY_TIMEOUT_S = 1.0


class BusTimeout(TimeoutError):
    pass


class BusClient:
    def __init__(self, host: str = "127.0.0.1", port: int = 7447,
                 subscribe: tuple[str, ...] = (), name: str = "",
                 layout: dict | None = None, rates: dict | None = None,
                 connect_timeout: float = 5.0):
        self.name = name
        self._sock = socket.create_connection((host, port),
                                              timeout=connect_timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._seq = {t: itertools.count() for t in MsgType}
        self._queues: dict[MsgType, queue.Queue] = {
            t: queue.Queue(maxsize=QUEUE_DEPTH) for t in MsgType}
        self._last_seq: dict[MsgType, int] = {}
        self.drops: dict[MsgType, int] = {t: 0 for t in MsgType}
        self.peer_info: dict | None = None
        self._closed = threading.Event()
        self._handshake_done = threading.Event()

        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"bus-reader-{name or 'client'}")
        self._reader.start()
        self._send(Message(type=MsgType.HANDSHAKE,
                           timestamp=time.time_ns(),
                           payload=pack_handshake(name, list(subscribe),
                                                  layout, rates)))
        if not self._handshake_done.wait(connect_timeout):
            self.close()
            raise BusTimeout("broker did not acknowledge the handshake")

    # -- sending ---------------------------------------------------------

    def _send(self, msg: Message) -> None:
        data = encode(msg)
        with self._send_lock:
            self._sock.sendall(data)

    def publish(self, mtype: MsgType, payload: bytes = b"",
                timestamp: int | None = None, flags: int = 0) -> int:
        seq = next(self._seq[mtype])
        self._send(Message(type=mtype, payload=payload, seq=seq,
                           timestamp=time.time_ns() if timestamp is None
                           else timestamp, flags=flags))
        return seq

    def send_ctrl(self, event: CtrlEvent, state: int | None = None,
                  ack: bool = False) -> int:
        return self.publish(MsgType.CTRL, pack_ctrl(event, state),
                            flags=FLAG_ACK if ack else 0)

    # -- receiving -------------------------------------------------------

    def recv(self, mtype: MsgType, timeout: float | None = 0.0) -> Message | None:
        """Next queued message of a type; None when none arrives in time."""
        try:
            if timeout == 0.0:
                return self._queues[mtype].get_nowait()
            return self._queues[mtype].get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self, mtype: MsgType) -> list[Message]:
        out = []
        while True:
            msg = self.recv(mtype)
            if msg is None:
                return out
            out.append(msg)

    def _read_loop(self) -> None:
        decoder = StreamDecoder()
        sock = self._sock
        while not self._closed.is_set():
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            try:
                messages = decoder.feed(data)
            except ValueError:
                break
            for msg in messages:
                self._dispatch(msg)
        self._closed.set()

    def _dispatch(self, msg: Message) -> None:
        if msg.type is MsgType.HANDSHAKE and msg.is_ack():
            self.peer_info = unpack_handshake(msg.payload)
            self._handshake_done.set()
            return
        last = self._last_seq.get(msg.type)
        if last is not None and msg.seq > last + 1:
            self.drops[msg.type] += msg.seq - last - 1
        self._last_seq[msg.type] = msg.seq
        try:
            self._queues[msg.type].put_nowait(msg)
        except queue.Full:
            self.drops[msg.type] += 1

    # -- utilities -------------------------------------------------------

    def measure_latency(self, timeout: float = LATENCY_TIMEOUT_S) -> float:
        """Round trip to whichever peer echoes LATENCY messages, seconds.

        Raises BusTimeout if no echo arrives within ``timeout``; a healthy
        rig always runs exactly one echo responder, so silence means the
        responder (or the path to it) is down.
        """
        token = time.time_ns()
        self.drain(MsgType.LATENCY)
        self.publish(MsgType.LATENCY, timestamp=token)
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BusTimeout(f"no latency echo within {timeout} s")
            msg = self.recv(MsgType.LATENCY, timeout=remaining)
            if msg is not None and msg.is_reply() and msg.timestamp == token:
                return (time.time_ns() - token) / 1e9

    def echo_latency_forever(self, poll_s: float = 0.05) -> None:
        """Serve as the latency echo peer until the connection closes."""
        while not self._closed.is_set():
            msg = self.recv(MsgType.LATENCY, timeout=poll_s)
            if msg is not None and not msg.is_reply():
                self.publish(MsgType.LATENCY, timestamp=msg.timestamp,
                             flags=FLAG_REPLY)

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def close(self) -> None:
        self._closed.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        if self._reader.is_alive() and threading.current_thread() is not self._reader:
            self._reader.join(timeout=2.0)

    def __enter__(self) -> "BusClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
