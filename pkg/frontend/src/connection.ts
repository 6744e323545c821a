import {
  BridgeMessage,
  CtrlEventName,
  FLAG_ACK,
  FLAG_REPLY,
  controlFrame,
  handshakeFrame,
  isBridgeError,
  latencyFrame,
  parseBridgeMessage,
} from "./protocol.js";

export type ConnectionStatus = "connecting" | "handshaking" | "open" | "closed";

/**
 * The slice of the WebSocket API the console uses. Browser sockets and
 * the `ws` package both satisfy it, which keeps the tests off the DOM.
 */
export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: string, listener: (ev: { data?: unknown }) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ConnectionOptions {
  name?: string;
  subscribe?: readonly string[];
  socketFactory?: SocketFactory;
  /** 0 disables automatic reconnection. */
  reconnectDelayMs?: number;
  /** 0 disables the periodic latency probe. */
  probeIntervalMs?: number;
  clock?: () => number;
}

const DEFAULT_SUBSCRIBE = ["ctrl", "cmd", "state", "latency"] as const;
const PROBE_EXPIRY_MS = 5000;

function browserSocket(url: string): SocketLike {
  return new WebSocket(url);
}

/**
 * Websocket lifecycle for one bridge: handshake on open, automatic
 * reconnect with the same subscriptions (no page reload needed when the
 * broker restarts), and periodic latency probes answered by the tracker.
 *
 * The only outbound frames are handshake, ctrl and latency. There is
 * deliberately no API for publishing cmd or pose payloads: the console
 * observes and controls, it never drives the robot stream.
 */
export class BridgeConnection {
  readonly url: string;
  status: ConnectionStatus = "closed";
  latencyMs: number | null = null;
  reconnects = 0;

  onmessage: ((msg: BridgeMessage) => void) | null = null;
  onstatus: ((status: ConnectionStatus) => void) | null = null;
  onlatency: ((ms: number) => void) | null = null;
  onerror: ((detail: string) => void) | null = null;

  private readonly name: string;
  private readonly subscribe: readonly string[];
  private readonly factory: SocketFactory;
  private readonly reconnectDelayMs: number;
  private readonly probeIntervalMs: number;
  private readonly clock: () => number;

  private socket: SocketLike | null = null;
  private seq = 0;
  private closedByUser = false;
  private everOpened = false;
  private probeTimer: ReturnType<typeof setInterval> | null = null;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
  /** Outstanding probe tokens mapped to the clock reading at send. */
  private probes = new Map<number, number>();

  constructor(url: string, opts: ConnectionOptions = {}) {
    this.url = url;
    this.name = opts.name ?? "console";
    this.subscribe = opts.subscribe ?? DEFAULT_SUBSCRIBE;
    this.factory = opts.socketFactory ?? browserSocket;
    this.reconnectDelayMs = opts.reconnectDelayMs ?? 1000;
    this.probeIntervalMs = opts.probeIntervalMs ?? 1000;
    this.clock = opts.clock ?? (() => Date.now());
  }

  connect(): void {
    if (this.socket) {
      return;
    }
    this.closedByUser = false;
    if (this.reconnectTimer) {
      clearTimeout(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.setStatus("connecting");
    let sock: SocketLike;
    try {
      sock = this.factory(this.url);
    } catch (err) {
      this.onerror?.(String(err));
      this.setStatus("closed");
      this.scheduleReconnect();
      return;
    }
    this.socket = sock;
    sock.addEventListener("open", () => this.handleOpen(sock));
    sock.addEventListener("message", (ev) => {
      if (sock === this.socket) {
        this.handleFrame(typeof ev.data === "string" ? ev.data : String(ev.data));
      }
    });
    sock.addEventListener("close", () => this.handleClose(sock));
    sock.addEventListener("error", () => {
      // The close event follows; nothing to do here.
    });
  }

  close(): void {
    this.closedByUser = true;
    if (this.reconnectTimer) {
      clearTimeout(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.stopProbes();
    const sock = this.socket;
    this.socket = null;
    if (sock) {
      try {
        sock.close();
      } catch {
        // Already dead; the goal was to be closed.
      }
    }
    this.setStatus("closed");
  }

  /** Send one control event. Returns false when the bridge is not open. */
  sendControl(event: CtrlEventName): boolean {
    if (this.status !== "open" || !this.socket) {
      return false;
    }
    this.socket.send(controlFrame(event, this.seq++));
    return true;
  }

  private setStatus(status: ConnectionStatus): void {
    if (status === this.status) {
      return;
    }
    this.status = status;
    this.onstatus?.(status);
  }

  private handleOpen(sock: SocketLike): void {
    if (sock !== this.socket) {
      return;
    }
    this.setStatus("handshaking");
    sock.send(handshakeFrame(this.name, this.subscribe, this.seq++));
  }

  private handleClose(sock: SocketLike): void {
    if (sock !== this.socket) {
      return;
    }
    this.socket = null;
    this.stopProbes();
    this.probes.clear();
    this.latencyMs = null;
    this.setStatus("closed");
    this.scheduleReconnect();
  }

  private scheduleReconnect(): void {
    if (this.closedByUser || this.reconnectDelayMs <= 0 || this.reconnectTimer) {
      return;
    }
    this.reconnectTimer = setTimeout(() => {
      this.reconnectTimer = null;
      if (!this.closedByUser && !this.socket) {
        this.reconnects += 1;
        this.connect();
      }
    }, this.reconnectDelayMs);
  }

  private handleFrame(raw: string): void {
    let frame;
    try {
      frame = parseBridgeMessage(raw);
    } catch (err) {
      this.onerror?.(String(err));
      return;
    }
    if (isBridgeError(frame)) {
      this.onerror?.(frame.error);
      return;
    }
    if (frame.type === "handshake" && frame.flags & FLAG_ACK) {
      this.everOpened = true;
      this.setStatus("open");
      this.startProbes();
    } else if (frame.type === "latency" && frame.flags & FLAG_REPLY) {
      const sentAt = this.probes.get(frame.timestamp);
      if (sentAt !== undefined) {
        this.probes.delete(frame.timestamp);
        this.latencyMs = this.clock() - sentAt;
        this.onlatency?.(this.latencyMs);
      }
    }
    this.onmessage?.(frame);
  }

  private startProbes(): void {
    if (this.probeIntervalMs <= 0 || this.probeTimer) {
      return;
    }
    this.probeTimer = setInterval(() => this.sendProbe(), this.probeIntervalMs);
    this.sendProbe();
  }

  private stopProbes(): void {
    if (this.probeTimer) {
      clearInterval(this.probeTimer);
      this.probeTimer = null;
    }
  }

  private sendProbe(): void {
    if (this.status !== "open" || !this.socket) {
      return;
    }
    const now = this.clock();
    for (const [token, sentAt] of this.probes) {
      if (now - sentAt > PROBE_EXPIRY_MS) {
        this.probes.delete(token);
      }
    }
    // Random tokens: probes fan out to every latency subscriber, so a
    // counter would collide between two consoles on the same bus.
    const token = Math.floor(Math.random() * 0x7fffffff) + 1;
    this.probes.set(token, now);
    this.socket.send(latencyFrame(token, this.seq++));
  }

  /** True once any handshake has completed, reconnects included. */
  get hasConnected(): boolean {
    return this.everOpened;
  }
}
