"""Episode capture, surgery, and replay.

An episode file (``.tw2e``) is:

    magic "TW2E"
    u32 header length, JSON header (format, version, layout, rates, meta)
    N fixed-stride records: u64 timestamp, i32 image index, u32 flags,
        command vector (f64 * dim), achieved-state vector (f64 * dim)
    image blob region (concatenated encoded frames)
    JSON footer (record count, marks, image table, checksums)
    u32 footer length + magic "TW2E"

Records stream straight to disk while recording; images and the footer are
written at close.  A file without its trailer is detectably unfinished, and
``recover_episode`` can still salvage the complete records.
"""

from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .command import LayoutDescriptor, NormalizationStats

log = logging.getLogger(__name__)

EPISODE_MAGIC = b"TW2E"
EPISODE_VERSION = 1
RECORD_RATE_HZ = 30.0
GAP_THRESHOLD_S = 0.5

MARK_KINDS = ("episode-start", "episode-end", "failure", "pause", "gap")

_FIXED = struct.Struct("<QiI")          # timestamp, image index, flags
_TRAILER = struct.Struct("<I4s")


def record_stride(dim: int) -> int:
    return _FIXED.size + 16 * dim


@dataclass
class Mark:
    kind: str
    timestamp: int
    record: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "timestamp": self.timestamp,
                "record": self.record}

    @classmethod
    def from_dict(cls, d: dict) -> "Mark":
        return cls(str(d["kind"]), int(d["timestamp"]), int(d["record"]))


@dataclass
class Record:
    timestamp: int
    cmd: np.ndarray
    state: np.ndarray
    image_index: int = -1
    flags: int = 0


@dataclass
class Episode:
    header: dict
    records: list[Record]
    marks: list[Mark]
    images: list[bytes]

    @property
    def layout(self) -> LayoutDescriptor:
        return LayoutDescriptor.from_dict(self.header["layout"])

    def cmd_matrix(self) -> np.ndarray:
        return np.stack([r.cmd for r in self.records]) if self.records \
            else np.zeros((0, self.layout.dim))

    def state_matrix(self) -> np.ndarray:
        return np.stack([r.state for r in self.records]) if self.records \
            else np.zeros((0, self.layout.dim))

    def duration_s(self) -> float:
        if len(self.records) < 2:
            return 0.0
        return (self.records[-1].timestamp - self.records[0].timestamp) / 1e9


class EpisodeWriter:
    def __init__(self, path, layout: LayoutDescriptor,
                 rate_hz: float = RECORD_RATE_HZ, meta: dict | None = None,
                 gap_threshold_s: float = GAP_THRESHOLD_S):
        self.path = path
        self.layout = layout
        self.dim = layout.dim
        self.gap_threshold_ns = int(gap_threshold_s * 1e9)
        self._file = open(path, "wb")
        self._crc = 0
        self._count = 0
        self._marks: list[Mark] = []
        self._images: list[bytes] = []
        self._image_meta: list[dict] = []
        self._last_ts: int | None = None
        self._closed = False
        header = {
            "format": "tw2e", "version": EPISODE_VERSION,
            "layout": layout.to_dict(), "rate_hz": rate_hz,
            "created_ns": time.time_ns(), "meta": meta or {},
        }
        blob = json.dumps(header, sort_keys=True).encode()
        self._file.write(EPISODE_MAGIC)
        self._file.write(struct.pack("<I", len(blob)))
        self._file.write(blob)

    @property
    def count(self) -> int:
        return self._count

    def add(self, timestamp: int, cmd: np.ndarray, state: np.ndarray,
            image: bytes | None = None, flags: int = 0) -> int:
        if self._closed:
            raise ValueError("episode writer already closed")
        cmd = np.ascontiguousarray(cmd, dtype=float)
        state = np.ascontiguousarray(state, dtype=float)
        if cmd.shape != (self.dim,) or state.shape != (self.dim,):
            raise ValueError(f"record vectors must both have dim {self.dim}, "
                             f"got {cmd.shape} and {state.shape}")
        if (self._last_ts is not None
                and timestamp - self._last_ts > self.gap_threshold_ns):
            gap_s = (timestamp - self._last_ts) / 1e9
            log.warning("%.2f s gap in the record stream at record %d",
                        gap_s, self._count)
            self._marks.append(Mark("gap", timestamp, self._count))
        self._last_ts = timestamp
        image_index = -1
        if image is not None:
            image_index = len(self._images)
            self._images.append(bytes(image))
            self._image_meta.append({"timestamp": timestamp,
                                     "length": len(image)})
        rec = (_FIXED.pack(timestamp, image_index, flags)
               + cmd.tobytes() + state.tobytes())
        self._crc = zlib.crc32(rec, self._crc)
        self._file.write(rec)
        self._count += 1
        return self._count - 1

    def mark(self, kind: str, timestamp: int | None = None) -> None:
        if kind not in MARK_KINDS:
            raise ValueError(f"unknown mark kind '{kind}' "
                             f"(one of {', '.join(MARK_KINDS)})")
        self._marks.append(Mark(kind, time.time_ns() if timestamp is None
                                else timestamp, self._count))

    def close(self) -> "EpisodeSummary":
        if self._closed:
            raise ValueError("episode writer already closed")
        self._closed = True
        images_crc = 0
        offsets = []
        pos = 0
        for blob in self._images:
            images_crc = zlib.crc32(blob, images_crc)
            offsets.append(pos)
            pos += len(blob)
        footer = {
            "count": self._count,
            "records_crc": self._crc,
            "images_crc": images_crc,
            "marks": [m.to_dict() for m in self._marks],
            "images": [{"offset": off, **meta}
                       for off, meta in zip(offsets, self._image_meta)],
        }
        for blob in self._images:
            self._file.write(blob)
        blob = json.dumps(footer, sort_keys=True).encode()
        self._file.write(blob)
        self._file.write(_TRAILER.pack(len(blob), EPISODE_MAGIC))
        self._file.close()
        return EpisodeSummary(path=self.path, count=self._count,
                              marks=list(self._marks),
                              image_count=len(self._images))

    def __enter__(self) -> "EpisodeWriter":
        return self

    def __exit__(self, *exc) -> None:
        if not self._closed:
            self.close()


@dataclass
class EpisodeSummary:
    path: object
    count: int
    marks: list[Mark]
    image_count: int


def read_episode(path) -> Episode:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EPISODE_MAGIC:
        raise ValueError(f"{path}: not an episode file (bad magic)")
    if len(data) < _TRAILER.size + 8:
        raise ValueError(f"{path}: truncated episode file")
    footer_len, trail_magic = _TRAILER.unpack_from(data, len(data) - _TRAILER.size)
    if trail_magic != EPISODE_MAGIC:
        raise ValueError(f"{path}: episode file has no trailer "
                         "(recording was interrupted?)")
    footer_start = len(data) - _TRAILER.size - footer_len
    footer = json.loads(data[footer_start:footer_start + footer_len])
    (header_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + header_len])
    if header.get("version") != EPISODE_VERSION:
        raise ValueError(f"{path}: unsupported episode version "
                         f"{header.get('version')!r}")
    dim = LayoutDescriptor.from_dict(header["layout"]).dim
    stride = record_stride(dim)
    count = footer["count"]
    rec_off = 8 + header_len
    img_off = rec_off + stride * count
    if img_off > footer_start:
        raise ValueError(f"{path}: record region overruns the footer")
    rec_bytes = data[rec_off:img_off]
    if zlib.crc32(rec_bytes) != footer["records_crc"]:
        raise ValueError(f"{path}: record checksum mismatch")
    records = []
    for i in range(count):
        base = i * stride
        ts, img_idx, flags = _FIXED.unpack_from(rec_bytes, base)
        vecs = np.frombuffer(rec_bytes, dtype=float,
                             offset=base + _FIXED.size, count=2 * dim)
        records.append(Record(timestamp=ts, cmd=vecs[:dim].copy(),
                              state=vecs[dim:].copy(),
                              image_index=img_idx, flags=flags))
    images = []
    images_crc = 0
    for entry in footer.get("images", []):
        start = img_off + entry["offset"]
        blob = data[start:start + entry["length"]]
        images_crc = zlib.crc32(blob, images_crc)
        images.append(blob)
    if footer.get("images") and images_crc != footer["images_crc"]:
        raise ValueError(f"{path}: image checksum mismatch")
    marks = [Mark.from_dict(d) for d in footer.get("marks", [])]
    return Episode(header=header, records=records, marks=marks, images=images)


def recover_episode(path) -> Episode:
    """Salvage complete records from a file that was never closed."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EPISODE_MAGIC:
        raise ValueError(f"{path}: not an episode file (bad magic)")
    (header_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + header_len])
    dim = LayoutDescriptor.from_dict(header["layout"]).dim
    stride = record_stride(dim)
    rec_off = 8 + header_len
    count = (len(data) - rec_off) // stride
    records = []
    for i in range(count):
        base = rec_off + i * stride
        ts, img_idx, flags = _FIXED.unpack_from(data, base)
        vecs = np.frombuffer(data, dtype=float, offset=base + _FIXED.size,
                             count=2 * dim)
        records.append(Record(timestamp=ts, cmd=vecs[:dim].copy(),
                              state=vecs[dim:].copy(),
                              image_index=-1, flags=flags))
    log.warning("%s: recovered %d records from an unclosed episode",
                path, count)
    return Episode(header=header, records=records, marks=[], images=[])


def write_episode(path, episode: Episode) -> EpisodeSummary:
    """Write a full in-memory episode (used by the editing operations)."""
    layout = episode.layout
    with EpisodeWriter(path, layout,
                       rate_hz=episode.header.get("rate_hz", RECORD_RATE_HZ),
                       meta=episode.header.get("meta")) as w:
        w.gap_threshold_ns = 1 << 62    # gaps were already marked at capture
        for rec in episode.records:
            image = (episode.images[rec.image_index]
                     if 0 <= rec.image_index < len(episode.images) else None)
            w.add(rec.timestamp, rec.cmd, rec.state, image=image,
                  flags=rec.flags)
        w._marks = [Mark(m.kind, m.timestamp, m.record) for m in episode.marks]
        return w.close()


class NearestSampler:
    """Downsamples bus traffic to the record rate.

    Messages are pushed as they arrive; ``poll`` emits one entry per
    elapsed tick, pairing each tick with the command/state message whose
    timestamp is nearest the tick time.  Frames attach to a tick only once
    each (the next ticks get None until a new frame arrives).
    """

    def __init__(self, rate_hz: float = RECORD_RATE_HZ,
                 window_s: float = 1.0):
        if rate_hz <= 0:
            raise ValueError("rate must be positive")
        self.step_ns = int(round(1e9 / rate_hz))
        self.window_ns = int(window_s * 1e9)
        self._cmd: deque[tuple[int, np.ndarray]] = deque()
        self._state: deque[tuple[int, np.ndarray]] = deque()
        self._image: tuple[int, bytes] | None = None
        self._next_tick: int | None = None

    def push_cmd(self, timestamp: int, flat: np.ndarray) -> None:
        self._cmd.append((timestamp, flat))
        if self._next_tick is None:
            self._next_tick = timestamp

    def push_state(self, timestamp: int, flat: np.ndarray) -> None:
        self._state.append((timestamp, flat))

    def push_image(self, timestamp: int, blob: bytes) -> None:
        self._image = (timestamp, blob)

    @staticmethod
    def _nearest(buf: deque, tick: int):
        best = None
        dist = None
        for ts, value in buf:
            d = abs(ts - tick)
            if dist is None or d < dist:
                best, dist = value, d
        return best

    def _prune(self, buf: deque, horizon: int) -> None:
        while len(buf) > 1 and buf[0][0] < horizon:
            buf.popleft()

    def poll(self, now: int) -> list[tuple[int, np.ndarray, np.ndarray, bytes | None]]:
        out = []
        if self._next_tick is None:
            return out
        while self._next_tick <= now:
            tick = self._next_tick
            if not self._cmd and not self._state:
                self._next_tick += self.step_ns
                continue
            cmd = self._nearest(self._cmd, tick)
            state = self._nearest(self._state, tick)
            if cmd is not None and state is not None:
                image = None
                if self._image is not None:
                    image = self._image[1]
                    self._image = None
                out.append((tick, cmd, state, image))
            self._prune(self._cmd, tick - self.window_ns)
            self._prune(self._state, tick - self.window_ns)
            self._next_tick += self.step_ns
        return out


def segment(in_path, out_path, start: int, end: int) -> EpisodeSummary:
    """Copy the inclusive record span [start, end] into a new episode."""
    ep = read_episode(in_path)
    n = len(ep.records)
    if not (0 <= start <= end < n):
        raise ValueError(f"span [{start}, {end}] out of range for "
                         f"{n} records")
    records = []
    images: list[bytes] = []
    for rec in ep.records[start:end + 1]:
        new_idx = -1
        if 0 <= rec.image_index < len(ep.images):
            new_idx = len(images)
            images.append(ep.images[rec.image_index])
        records.append(Record(rec.timestamp, rec.cmd, rec.state,
                              image_index=new_idx, flags=rec.flags))
    marks = [Mark(m.kind, m.timestamp, m.record - start) for m in ep.marks
             if start <= m.record <= end]
    header = dict(ep.header)
    meta = dict(header.get("meta") or {})
    meta["segment_of"] = {"source": str(in_path), "start": start, "end": end}
    header["meta"] = meta
    return write_episode(out_path, Episode(header=header, records=records,
                                           marks=marks, images=images))


@dataclass
class FilterReport:
    kept: list[tuple[int, int]] = field(default_factory=list)
    dropped: list[tuple[int, int, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def episode_spans(episode: Episode) -> FilterReport:
    """Resolve start/end marks into inclusive record spans.

    A start with no matching end runs to the last record (with a warning);
    an end with no start is ignored (with a warning); spans containing a
    failure mark are reported in ``dropped`` instead of ``kept``.
    """
    report = FilterReport()
    n = len(episode.records)
    failures = [m.record for m in episode.marks if m.kind == "failure"]
    open_start: int | None = None
    spans: list[tuple[int, int]] = []
    for m in episode.marks:
        if m.kind == "episode-start":
            if open_start is not None:
                report.warnings.append(
                    f"episode-start at record {m.record} while the span from "
                    f"{open_start} is still open; restarting")
            open_start = m.record
        elif m.kind == "episode-end":
            if open_start is None:
                report.warnings.append(
                    f"episode-end at record {m.record} with no open span; "
                    "ignored")
                continue
            spans.append((open_start, min(m.record, n - 1)))
            open_start = None
    if open_start is not None:
        report.warnings.append(
            f"episode-start at record {open_start} never closed; "
            "running to the end of the file")
        spans.append((open_start, n - 1))
    for start, end in spans:
        hit = [r for r in failures if start <= r <= end]
        if hit:
            report.dropped.append(
                (start, end, f"failure mark at record {hit[0]}"))
        else:
            report.kept.append((start, end))
    return report


def split_episodes(in_path, out_dir, stem: str = "episode") -> FilterReport:
    """Cut a recording into per-span files under ``out_dir``."""
    import pathlib

    ep = read_episode(in_path)
    report = episode_spans(ep)
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (start, end) in enumerate(report.kept):
        segment(in_path, out_dir / f"{stem}_{i:03d}.tw2e", start, end)
    return report


def filter_idle(in_path, out_path, eps: float = 1e-3,
                hold_s: float = 2.0) -> FilterReport:
    """Collapse stretches where the command stream stands still.

    A run of consecutive records whose command deltas all stay below
    ``eps`` (infinity norm) and that lasts longer than ``hold_s`` keeps
    only its first and last record.  ``eps = 0`` disables filtering, and
    the operation is idempotent.
    """
    if eps < 0 or hold_s < 0:
        raise ValueError("eps and hold_s must be non-negative")
    ep = read_episode(in_path)
    report = FilterReport()
    n = len(ep.records)
    if eps == 0.0 or n == 0:
        write_episode(out_path, ep)
        report.kept.append((0, max(0, n - 1)))
        return report
    cmds = ep.cmd_matrix()
    still = np.zeros(n, dtype=bool)
    if n > 1:
        still[1:] = np.max(np.abs(np.diff(cmds, axis=0)), axis=1) < eps
    keep = np.ones(n, dtype=bool)
    hold_ns = hold_s * 1e9
    i = 0
    while i < n:
        if i + 1 < n and still[i + 1]:
            j = i + 1
            while j + 1 < n and still[j + 1]:
                j += 1
            span_ns = ep.records[j].timestamp - ep.records[i].timestamp
            if span_ns > hold_ns and j - i >= 2:
                keep[i + 1:j] = False
                report.dropped.append(
                    (i + 1, j - 1, f"idle for {span_ns / 1e9:.2f} s"))
            i = j
        else:
            i += 1
    kept_idx = np.flatnonzero(keep)
    index_of = {int(old): new for new, old in enumerate(kept_idx)}
    records = []
    images: list[bytes] = []
    for old in kept_idx:
        rec = ep.records[int(old)]
        new_img = -1
        if 0 <= rec.image_index < len(ep.images):
            new_img = len(images)
            images.append(ep.images[rec.image_index])
        records.append(Record(rec.timestamp, rec.cmd, rec.state,
                              image_index=new_img, flags=rec.flags))
    marks = []
    positions = kept_idx.tolist()
    for m in ep.marks:
        if m.record in index_of:
            marks.append(Mark(m.kind, m.timestamp, index_of[m.record]))
        else:
            nxt = bisect_left(positions, m.record)
            marks.append(Mark(m.kind, m.timestamp,
                              min(nxt, len(positions) - 1)))
    write_episode(out_path, Episode(header=ep.header, records=records,
                                    marks=marks, images=images))
    report.kept = [(0, len(records) - 1)]
    return report


def compute_stats(path, which: str = "cmd") -> NormalizationStats:
    ep = read_episode(path)
    if which == "cmd":
        data = ep.cmd_matrix()
    elif which == "state":
        data = ep.state_matrix()
    else:
        raise ValueError("which must be 'cmd' or 'state'")
    if data.shape[0] == 0:
        raise ValueError(f"{path}: episode holds no records")
    return NormalizationStats.from_samples(data)


def replay(path, publish, speed: float = 1.0, sleep=time.sleep,
           now_ns=time.time_ns) -> int:
    """Push recorded commands back out at ``speed`` times live rate.

    ``publish(timestamp_ns, cmd_flat, record)`` is called once per record
    with timestamps rewritten to the replay clock.  Returns the number of
    records replayed.
    """
    if speed <= 0:
        raise ValueError("speed must be positive")
    ep = read_episode(path)
    if not ep.records:
        return 0
    t0_src = ep.records[0].timestamp
    t0_dst = now_ns()
    for rec in ep.records:
        offset_ns = (rec.timestamp - t0_src) / speed
        target = t0_dst + offset_ns
        wait = (target - now_ns()) / 1e9
        if wait > 0:
            sleep(wait)
        publish(int(target), rec.cmd, rec)
    return len(ep.records)
