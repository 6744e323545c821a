/**
 * JSON shapes spoken by the bus websocket bridge, plus the session
 * rules the console needs to gate its buttons.
 */

export const FLAG_REPLY = 0x01;
export const FLAG_ACK = 0x02;

export const SESSION_STATES = [
  "idle",
  "active",
  "paused",
  "interpolating",
  "stopped",
] as const;
export type SessionStateName = (typeof SESSION_STATES)[number];

export const CTRL_EVENTS = [
  "start",
  "pause",
  "resume",
  "stop",
  "estop",
  "mark-episode-start",
  "mark-episode-end",
  "mark-failure",
] as const;
export type CtrlEventName = (typeof CTRL_EVENTS)[number];

export const MARK_KINDS = ["episode-start", "episode-end", "failure"] as const;
export type MarkKind = (typeof MARK_KINDS)[number];

export function markEvent(kind: MarkKind): CtrlEventName {
  return `mark-${kind}` as CtrlEventName;
}

const MARK_EVENTS: readonly CtrlEventName[] = [
  "mark-episode-start",
  "mark-episode-end",
  "mark-failure",
];

/**
 * Control events the operator accepts in each session state. The console
 * mirrors this table so illegal transitions are never clickable; the
 * operator side enforces it regardless.
 */
const LEGAL: Record<SessionStateName, readonly CtrlEventName[]> = {
  idle: ["start", "stop", "estop"],
  active: ["pause", "stop", "estop", ...MARK_EVENTS],
  paused: ["resume", "stop", "estop", ...MARK_EVENTS],
  interpolating: ["pause", "stop", "estop", ...MARK_EVENTS],
  stopped: [],
};

export function legalEvents(state: SessionStateName): readonly CtrlEventName[] {
  return LEGAL[state];
}

export function isLegal(state: SessionStateName, event: CtrlEventName): boolean {
  return LEGAL[state].includes(event);
}

export function stateName(code: number): SessionStateName {
  const name = SESSION_STATES[code];
  if (name === undefined) {
    throw new Error(`unknown session state code ${code}`);
  }
  return name;
}

/** One parsed bridge frame. Fields beyond the first four are per-type. */
export interface BridgeMessage {
  type: string;
  seq: number;
  timestamp: number;
  flags: number;
  /** ctrl frames */
  event?: CtrlEventName;
  state?: number;
  /** handshake frames */
  info?: Record<string, unknown>;
  /** everything else: base64 of the binary payload */
  payload?: string;
}

/** The bridge reports malformed input as a bare error object. */
export interface BridgeError {
  error: string;
}

export function isBridgeError(
  frame: BridgeMessage | BridgeError,
): frame is BridgeError {
  return typeof (frame as BridgeError).error === "string";
}

export function parseBridgeMessage(raw: string): BridgeMessage | BridgeError {
  const obj: unknown = JSON.parse(raw);
  if (typeof obj !== "object" || obj === null) {
    throw new Error("bridge sent a non-object frame");
  }
  const rec = obj as Record<string, unknown>;
  if (typeof rec.error === "string") {
    return { error: rec.error };
  }
  if (typeof rec.type !== "string") {
    throw new Error("bridge frame has no type");
  }
  return {
    ...rec,
    type: rec.type,
    seq: Number(rec.seq ?? 0),
    timestamp: Number(rec.timestamp ?? 0),
    flags: Number(rec.flags ?? 0),
  } as BridgeMessage;
}

/** Wall clock in nanoseconds, the unit message timestamps use on the bus. */
export function nowNs(): number {
  return Date.now() * 1e6;
}

export function handshakeFrame(
  name: string,
  subscribe: readonly string[],
  seq: number,
): string {
  return JSON.stringify({
    type: "handshake",
    seq,
    timestamp: nowNs(),
    info: { version: 1, name, subscribe: [...subscribe].sort() },
  });
}

export function controlFrame(event: CtrlEventName, seq: number): string {
  return JSON.stringify({ type: "ctrl", event, seq, timestamp: nowNs() });
}

/** The tracker echoes latency frames back with the timestamp untouched. */
export function latencyFrame(token: number, seq: number): string {
  return JSON.stringify({ type: "latency", seq, timestamp: token });
}

function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) {
    out[i] = bin.charCodeAt(i);
  }
  return out;
}

/**
 * Decode a cmd/state payload: u32 length then that many f64, little
 * endian. The payload is self-describing, so the console needs no layout
 * metadata to render it.
 */
export function decodeVector(payload: string): Float64Array {
  const bytes = base64ToBytes(payload);
  if (bytes.byteLength < 4) {
    throw new Error(`vector payload too short (${bytes.byteLength} bytes)`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const dim = view.getUint32(0, true);
  if (bytes.byteLength !== 4 + 8 * dim) {
    throw new Error(
      `vector payload of ${bytes.byteLength} bytes does not hold ${dim} values`,
    );
  }
  const out = new Float64Array(dim);
  for (let i = 0; i < dim; i++) {
    out[i] = view.getFloat64(4 + 8 * i, true);
  }
  return out;
}
