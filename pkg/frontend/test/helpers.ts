import { AddressInfo } from "node:net";
import { WebSocket, WebSocketServer } from "ws";
import { SocketLike } from "../src/connection.js";

export const FLAG_REPLY = 0x01;
export const FLAG_ACK = 0x02;

/** Socket factory backed by the `ws` client, for driving the console in Node. */
export function nodeSocket(url: string): SocketLike {
  return new WebSocket(url) as unknown as SocketLike;
}

export interface MockBridge {
  port: number;
  url: string;
  /** Every JSON frame any client sent, in arrival order. */
  frames: Record<string, unknown>[];
  /** Replace to change behaviour; the default acks handshakes only. */
  onframe: (frame: Record<string, unknown>, reply: (obj: unknown) => void) => void;
  broadcast(obj: unknown): void;
  close(): Promise<void>;
}

export function handshakeAck(frame: Record<string, unknown>): unknown {
  const info = (frame.info ?? {}) as Record<string, unknown>;
  const subscribe = Array.isArray(info.subscribe) ? [...info.subscribe].sort() : [];
  return {
    type: "handshake",
    seq: 0,
    timestamp: Date.now() * 1e6,
    flags: FLAG_ACK,
    info: { version: 1, name: "broker", subscribe, layout: null, rates: {} },
  };
}

/**
 * A websocket endpoint that mimics the bridge side of the broker just
 * enough for connection tests: JSON frames in, JSON frames out.
 */
export async function startMockBridge(port = 0): Promise<MockBridge> {
  const wss = new WebSocketServer({ host: "127.0.0.1", port });
  await new Promise<void>((resolve, reject) => {
    wss.once("listening", resolve);
    wss.once("error", reject);
  });
  const bound = (wss.address() as AddressInfo).port;

  const bridge: MockBridge = {
    port: bound,
    url: `ws://127.0.0.1:${bound}`,
    frames: [],
    onframe: (frame, reply) => {
      if (frame.type === "handshake") {
        reply(handshakeAck(frame));
      }
    },
    broadcast(obj) {
      const raw = JSON.stringify(obj);
      for (const client of wss.clients) {
        if (client.readyState === WebSocket.OPEN) {
          client.send(raw);
        }
      }
    },
    close() {
      for (const client of wss.clients) {
        client.terminate();
      }
      return new Promise((resolve) => wss.close(() => resolve()));
    },
  };

  wss.on("connection", (sock) => {
    sock.on("message", (raw) => {
      const frame = JSON.parse(raw.toString()) as Record<string, unknown>;
      bridge.frames.push(frame);
      bridge.onframe(frame, (obj) => sock.send(JSON.stringify(obj)));
    });
  });
  return bridge;
}

export async function waitFor(
  cond: () => boolean,
  timeoutMs = 5000,
  what = "condition",
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!cond()) {
    if (Date.now() > deadline) {
      throw new Error(`timed out waiting for ${what}`);
    }
    await new Promise((r) => setTimeout(r, 5));
  }
}

/** Base64 vector payload in the bus encoding: u32 length then f64 values. */
export function vectorPayload(values: number[]): string {
  const buf = Buffer.alloc(4 + 8 * values.length);
  buf.writeUInt32LE(values.length, 0);
  values.forEach((v, i) => buf.writeDoubleLE(v, 4 + 8 * i));
  return buf.toString("base64");
}
