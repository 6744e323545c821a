import { ConnectionStatus } from "./connection.js";
import {
  BridgeMessage,
  CtrlEventName,
  FLAG_ACK,
  SessionStateName,
  decodeVector,
} from "./protocol.js";
import { SessionModel } from "./session.js";

/** Snapshot rate cap. Messages arrive far faster; rendering must not. */
export const VIEW_RATE_HZ = 10;

const MIN_SNAPSHOT_GAP_MS = 1000 / VIEW_RATE_HZ;
const RATE_WINDOW_MS = 2000;

/** Timeline entries come from acked ctrl events, so each one is a mark
 * the operator actually applied. */
const TIMELINE_KINDS: Partial<Record<CtrlEventName, string>> = {
  "mark-episode-start": "episode-start",
  "mark-episode-end": "episode-end",
  "mark-failure": "failure",
  pause: "pause",
};

export interface TimelineMark {
  kind: string;
  /** Console clock at arrival, ms. */
  atMs: number;
  /** Bus timestamp of the ack, ns. */
  timestampNs: number;
}

export interface ViewSnapshot {
  status: ConnectionStatus;
  mode: SessionStateName;
  pending: CtrlEventName | null;
  legal: readonly CtrlEventName[];
  blend: number | null;
  latencyMs: number | null;
  rTrack: number | null;
  cmd: Float64Array | null;
  state: Float64Array | null;
  cmdSeen: number;
  stateSeen: number;
  msgRateHz: number;
  marks: readonly TimelineMark[];
}

/**
 * Reduces bridge traffic to something a render loop can draw. `ingest`
 * accepts every message; `poll` hands out at most VIEW_RATE_HZ fresh
 * snapshots per second, and only when something changed.
 */
export class ConsoleView {
  readonly session: SessionModel;

  private readonly clock: () => number;
  private status: ConnectionStatus = "closed";
  private latencyMs: number | null = null;
  private cmd: Float64Array | null = null;
  private state: Float64Array | null = null;
  private cmdSeen = 0;
  private stateSeen = 0;
  private marks: TimelineMark[] = [];
  private arrivals: number[] = [];
  private dirty = true;
  private lastEmitMs = Number.NEGATIVE_INFINITY;

  constructor(session: SessionModel, clock: () => number = () => Date.now()) {
    this.session = session;
    this.clock = clock;
  }

  setStatus(status: ConnectionStatus): void {
    if (status === this.status) {
      return;
    }
    this.status = status;
    if (status !== "open") {
      // Live data from a dead connection must not render as live.
      this.cmd = null;
      this.state = null;
      this.latencyMs = null;
    }
    this.dirty = true;
  }

  setLatency(ms: number): void {
    this.latencyMs = ms;
    this.dirty = true;
  }

  ingest(msg: BridgeMessage): void {
    const now = this.clock();
    switch (msg.type) {
      case "ctrl": {
        this.session.ingest(msg, now);
        if (msg.flags & FLAG_ACK && msg.event) {
          const kind = TIMELINE_KINDS[msg.event];
          if (kind !== undefined) {
            this.marks.push({ kind, atMs: now, timestampNs: msg.timestamp });
          }
        }
        break;
      }
      case "cmd": {
        if (msg.payload !== undefined) {
          this.cmd = decodeVector(msg.payload);
          this.cmdSeen += 1;
          this.noteArrival(now);
        }
        break;
      }
      case "state": {
        if (msg.payload !== undefined) {
          this.state = decodeVector(msg.payload);
          this.stateSeen += 1;
          this.noteArrival(now);
        }
        break;
      }
      default:
        // handshake acks and latency echoes carry nothing to draw
        return;
    }
    this.dirty = true;
  }

  /** Unthrottled snapshot of the current state. */
  snapshot(nowMs: number = this.clock()): ViewSnapshot {
    return {
      status: this.status,
      mode: this.session.mode,
      pending: this.session.pending,
      legal: this.session.legal(),
      blend: this.session.blendProgress(nowMs),
      latencyMs: this.latencyMs,
      rTrack: this.rTrack(),
      cmd: this.cmd,
      state: this.state,
      cmdSeen: this.cmdSeen,
      stateSeen: this.stateSeen,
      msgRateHz: this.msgRate(nowMs),
      marks: this.marks.slice(),
    };
  }

  /**
   * A fresh snapshot when one is due, else null. The blend indicator
   * animates during resume, so interpolating counts as always dirty.
   */
  poll(nowMs: number = this.clock()): ViewSnapshot | null {
    const due = this.dirty || this.session.mode === "interpolating";
    if (!due || nowMs - this.lastEmitMs < MIN_SNAPSHOT_GAP_MS) {
      return null;
    }
    this.lastEmitMs = nowMs;
    this.dirty = false;
    return this.snapshot(nowMs);
  }

  /** exp(-distance) between the latest command and achieved state. */
  private rTrack(): number | null {
    if (!this.cmd || !this.state || this.cmd.length !== this.state.length) {
      return null;
    }
    let sq = 0;
    for (let i = 0; i < this.cmd.length; i++) {
      const d = this.cmd[i] - this.state[i];
      sq += d * d;
    }
    return Math.exp(-Math.sqrt(sq));
  }

  private noteArrival(nowMs: number): void {
    this.arrivals.push(nowMs);
    const cutoff = nowMs - RATE_WINDOW_MS;
    while (this.arrivals.length && this.arrivals[0] < cutoff) {
      this.arrivals.shift();
    }
  }

  private msgRate(nowMs: number): number {
    const cutoff = nowMs - RATE_WINDOW_MS;
    const live = this.arrivals.filter((t) => t >= cutoff).length;
    return (live * 1000) / RATE_WINDOW_MS;
  }
}
