"""Chunked policy execution.

A policy server answers an observation-history request with a fixed 64-step
chunk of normalized commands.  The runner executes the first 48 steps at
the control rate and requests the next chunk as soon as a new one starts,
so the reply has a 1.6 s budget.  The remaining 16 steps are the grace
tail: they only execute when the next chunk is late, and if even the tail
runs out the runner holds the last action and flags starvation rather than
emit garbage.

Requests and replies use the bus message framing over a direct socket (no
broker hop): request = STATE message carrying the history window, reply =
CMD message with the matching sequence number carrying the chunk.
"""

from __future__ import annotations

import logging
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .bus.protocol import Message, MsgType, StreamDecoder, encode
from .command import NormalizationStats

log = logging.getLogger(__name__)

CHUNK_LEN = 64
SWITCH_AT = 48
HISTORY_LEN = 16
RATE_HZ = 30.0
REQUEST_TIMEOUT_S = 0.2

_VEC_HEAD = struct.Struct("<II")     # rows, dim


def pack_matrix(mat: np.ndarray) -> bytes:
    mat = np.ascontiguousarray(mat, dtype=float)
    if mat.ndim != 2:
        raise ValueError("expected a 2-d array")
    return _VEC_HEAD.pack(mat.shape[0], mat.shape[1]) + mat.tobytes()


def unpack_matrix(payload: bytes) -> np.ndarray:
    if len(payload) < _VEC_HEAD.size:
        raise ValueError("matrix payload too short")
    rows, dim = _VEC_HEAD.unpack_from(payload)
    want = _VEC_HEAD.size + 8 * rows * dim
    if len(payload) != want:
        raise ValueError(f"matrix payload is {len(payload)} bytes, "
                         f"{rows}x{dim} needs {want}")
    return np.frombuffer(payload, dtype=float,
                         offset=_VEC_HEAD.size).reshape(rows, dim).copy()


class HistoryBuffer:
    """Sliding window of normalized observations, oldest first.

    Until the window fills, the oldest sample is repeated at the front so
    the policy always sees a full (HISTORY_LEN, dim) block.
    """

    def __init__(self, dim: int, length: int = HISTORY_LEN):
        if length < 1:
            raise ValueError("history length must be at least 1")
        self.dim = dim
        self.length = length
        self._rows: list[np.ndarray] = []

    def push(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.dim,):
            raise ValueError(f"observation has shape {flat.shape}, "
                             f"expected ({self.dim},)")
        self._rows.append(flat.copy())
        if len(self._rows) > self.length:
            self._rows.pop(0)

    def __len__(self) -> int:
        return len(self._rows)

    def window(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((self.length, self.dim))
        pad = self.length - len(self._rows)
        rows = [self._rows[0]] * pad + self._rows
        return np.stack(rows)


@dataclass
class SchedulerStats:
    executed: int = 0
    chunks_started: int = 0
    holds: int = 0
    starved_ticks: int = 0
    switch_steps: list[int] = field(default_factory=list)

    @property
    def starved(self) -> bool:
        return self.starved_ticks > 0


class ChunkScheduler:
    """Pure chunk-stepping logic; IO lives elsewhere.

    ``tick`` returns the action for this control step (or None before the
    first chunk and during starvation holds with no history).  ``offer``
    hands over the next chunk whenever it arrives.
    """

    def __init__(self, chunk_len: int = CHUNK_LEN, switch_at: int = SWITCH_AT):
        if not 1 <= switch_at <= chunk_len:
            raise ValueError("switch point must lie inside the chunk")
        self.chunk_len = chunk_len
        self.switch_at = switch_at
        self.stats = SchedulerStats()
        self._chunk: np.ndarray | None = None
        self._next: np.ndarray | None = None
        self._step = 0
        self._last_action: np.ndarray | None = None
        self.starving = False

    def offer(self, chunk: np.ndarray) -> None:
        chunk = np.asarray(chunk, dtype=float)
        if chunk.ndim != 2 or chunk.shape[0] != self.chunk_len:
            raise ValueError(f"chunk must be ({self.chunk_len}, dim), "
                             f"got {chunk.shape}")
        self._next = chunk

    @property
    def wants_request(self) -> bool:
        """True when no fresh chunk is queued or in hand beyond this one."""
        return self._next is None

    def _begin(self, chunk: np.ndarray) -> None:
        if self._chunk is not None:
            self.stats.switch_steps.append(self._step)
        self._chunk = chunk
        self._next = None
        self._step = 0
        self.stats.chunks_started += 1

    def tick(self) -> np.ndarray | None:
        if self._chunk is None:
            if self._next is not None:
                self._begin(self._next)
            else:
                self.stats.holds += 1
                return self._last_action
        elif self._step >= self.switch_at and self._next is not None:
            self._begin(self._next)
        elif self._step >= self.chunk_len:
            # Grace tail exhausted: hold and flag until a chunk shows up.
            self.starving = True
            self.stats.starved_ticks += 1
            self.stats.holds += 1
            return self._last_action
        self.starving = False
        action = self._chunk[self._step]
        self._step += 1
        self.stats.executed += 1
        self._last_action = action
        return action


class PolicyTimeout(TimeoutError):
    pass


class PolicyProtocolError(ValueError):
    pass


class PolicyClient:
    """Blocking request-reply channel to a policy server."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self._sock = socket.create_connection((host, port),
                                              timeout=connect_timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._decoder = StreamDecoder()
        self._inbox: list[Message] = []
        self._seq = 0

    def request(self, history: np.ndarray,
                timeout: float = REQUEST_TIMEOUT_S) -> np.ndarray:
        """One chunk for one history window; raises on timeout or bad reply."""
        seq = self._seq
        self._seq += 1
        self._sock.sendall(encode(Message(type=MsgType.STATE, seq=seq,
                                          timestamp=time.time_ns(),
                                          payload=pack_matrix(history))))
        deadline = time.monotonic() + timeout
        while True:
            reply = self._take(seq)
            if reply is not None:
                break
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PolicyTimeout(f"no chunk within {timeout} s")
            self._sock.settimeout(remaining)
            try:
                data = self._sock.recv(65536)
            except socket.timeout:
                raise PolicyTimeout(f"no chunk within {timeout} s") from None
            if not data:
                raise PolicyProtocolError("policy server closed the connection")
            self._inbox.extend(self._decoder.feed(data))
        if reply.type is not MsgType.CMD:
            raise PolicyProtocolError(
                f"expected a CMD reply, got {reply.type.name}")
        chunk = unpack_matrix(reply.payload)
        if chunk.shape[0] != CHUNK_LEN:
            raise PolicyProtocolError(
                f"chunk has {chunk.shape[0]} steps, protocol requires "
                f"{CHUNK_LEN}")
        return chunk

    def _take(self, seq: int) -> Message | None:
        for i, msg in enumerate(self._inbox):
            if msg.seq == seq:
                return self._inbox.pop(i)
        return None

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "PolicyClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class EchoPolicyServer:
    """Stand-in policy: replies with the latest observation tiled out.

    ``latency_s`` delays each reply; ``reply_steps`` overrides the chunk
    length to exercise client-side protocol validation; ``mute`` drops
    requests entirely to exercise timeouts.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 latency_s: float = 0.0, reply_steps: int = CHUNK_LEN,
                 mute: bool = False):
        self.latency_s = latency_s
        self.reply_steps = reply_steps
        self.mute = mute
        self.requests_served = 0
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True,
                                        name="echo-policy")
        self._thread.start()

    def _serve(self) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self._listener, selectors.EVENT_READ, None)
        while not self._stop.is_set():
            for key, _ in sel.select(timeout=0.05):
                if key.data is None:
                    try:
                        conn, _addr = self._listener.accept()
                    except OSError:
                        continue
                    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    sel.register(conn, selectors.EVENT_READ, StreamDecoder())
                    continue
                conn, decoder = key.fileobj, key.data
                try:
                    data = conn.recv(65536)
                except OSError:
                    data = b""
                if not data:
                    sel.unregister(conn)
                    conn.close()
                    continue
                for msg in decoder.feed(data):
                    if msg.type is not MsgType.STATE or self.mute:
                        continue
                    history = unpack_matrix(msg.payload)
                    chunk = np.tile(history[-1], (self.reply_steps, 1))
                    if self.latency_s:
                        time.sleep(self.latency_s)
                    try:
                        conn.sendall(encode(Message(
                            type=MsgType.CMD, seq=msg.seq,
                            timestamp=time.time_ns(),
                            payload=pack_matrix(chunk))))
                        self.requests_served += 1
                    except OSError:
                        pass
        for key in list(sel.get_map().values()):
            if key.data is not None:
                key.fileobj.close()
        sel.close()

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._thread.join(timeout=2.0)

    def __enter__(self) -> "EchoPolicyServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class RunReport:
    ticks: int = 0
    duration_s: float = 0.0
    rate_hz: float = 0.0
    fallbacks: int = 0
    protocol_errors: int = 0
    stats: SchedulerStats | None = None


class PolicyRunner:
    """Drives a ChunkScheduler against a live policy server.

    One background requester thread keeps at most one request in flight;
    request failures (timeout or malformed chunk) count as fallbacks and
    the scheduler simply keeps holding, which is the safe behavior.
    """

    def __init__(self, client: PolicyClient, stats: NormalizationStats,
                 history: HistoryBuffer | None = None,
                 rate_hz: float = RATE_HZ,
                 request_timeout: float = REQUEST_TIMEOUT_S):
        self.client = client
        self.norm = stats
        self.history = history or HistoryBuffer(stats.dim)
        self.rate_hz = rate_hz
        self.request_timeout = request_timeout
        self.scheduler = ChunkScheduler()
        self.report = RunReport()
        self._mailbox: np.ndarray | None = None
        self._mail_lock = threading.Lock()
        self._request_wanted = threading.Event()
        self._stop = threading.Event()
        self._requester = threading.Thread(target=self._request_loop,
                                           daemon=True, name="policy-request")
        self._requester.start()

    def observe(self, flat: np.ndarray) -> None:
        """Feed one raw observation (command-layout vector)."""
        from .command import normalize

        self.history.push(normalize(flat, self.norm))

    def _request_loop(self) -> None:
        while not self._stop.is_set():
            if not self._request_wanted.wait(timeout=0.05):
                continue
            self._request_wanted.clear()
            window = self.history.window()
            try:
                chunk = self.client.request(window,
                                            timeout=self.request_timeout)
            except PolicyTimeout:
                self.report.fallbacks += 1
                continue
            except PolicyProtocolError as exc:
                log.warning("policy protocol error: %s", exc)
                self.report.protocol_errors += 1
                self.report.fallbacks += 1
                continue
            except OSError:
                self.report.fallbacks += 1
                continue
            with self._mail_lock:
                self._mailbox = chunk

    def tick(self) -> np.ndarray | None:
        """One control step: returns the denormalized action or None."""
        from .command import denormalize

        with self._mail_lock:
            if self._mailbox is not None:
                self.scheduler.offer(self._mailbox)
                self._mailbox = None
        if self.scheduler.wants_request:
            self._request_wanted.set()
        action = self.scheduler.tick()
        self.report.ticks += 1
        if action is None:
            return None
        return denormalize(action, self.norm)

    def run(self, duration_s: float, on_action=None,
            sleep=time.sleep, now=time.monotonic) -> RunReport:
        """Real-time loop at ``rate_hz`` for ``duration_s`` seconds."""
        period = 1.0 / self.rate_hz
        t0 = now()
        k = 0
        while True:
            elapsed = now() - t0
            if elapsed >= duration_s:
                break
            action = self.tick()
            if action is not None and on_action is not None:
                on_action(action)
            k += 1
            target = t0 + k * period
            delay = target - now()
            if delay > 0:
                sleep(delay)
        self.report.duration_s = now() - t0
        self.report.rate_hz = self.report.ticks / self.report.duration_s \
            if self.report.duration_s > 0 else 0.0
        self.report.stats = self.scheduler.stats
        return self.report

    def close(self) -> None:
        self._stop.set()
        self._requester.join(timeout=2.0)
        self.client.close()

    def __enter__(self) -> "PolicyRunner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
