import { describe, expect, it } from "vitest";
import { BridgeMessage } from "../src/protocol.js";
import { BLEND_WINDOW_MS, SessionModel } from "../src/session.js";

function ack(event: string, state: number): BridgeMessage {
  return { type: "ctrl", seq: 0, timestamp: 0, flags: 2, event, state } as BridgeMessage;
}

describe("SessionModel", () => {
  it("moves only on acknowledged ctrl frames", () => {
    const s = new SessionModel();
    const plain = { ...ack("start", 1), flags: 0 };
    expect(s.ingest(plain, 0)).toBe(false);
    expect(s.mode).toBe("idle");
    expect(s.ingest(ack("start", 1), 0)).toBe(true);
    expect(s.mode).toBe("active");
    expect(s.acks).toBe(1);
  });

  it("never moves optimistically on sent events", () => {
    const s = new SessionModel();
    s.sent("start");
    expect(s.mode).toBe("idle");
    expect(s.pending).toBe("start");
    s.ingest(ack("start", 1), 0);
    expect(s.mode).toBe("active");
    expect(s.pending).toBeNull();
  });

  it("keeps the mode on mark acks, which echo the current state", () => {
    const s = new SessionModel();
    s.ingest(ack("start", 1), 0);
    expect(s.ingest(ack("mark-failure", 1), 0)).toBe(false);
    expect(s.mode).toBe("active");
    expect(s.acks).toBe(2);
  });

  it("ignores acks with a missing or unknown state byte", () => {
    const s = new SessionModel();
    const noState = { ...ack("start", 1) };
    delete (noState as Record<string, unknown>).state;
    expect(s.ingest(noState, 0)).toBe(false);
    expect(s.ingest(ack("start", 9), 0)).toBe(false);
    expect(s.mode).toBe("idle");
    expect(s.acks).toBe(0);
  });

  it("ignores non-ctrl traffic", () => {
    const s = new SessionModel();
    const state = { type: "state", seq: 0, timestamp: 0, flags: 0 } as BridgeMessage;
    expect(s.ingest(state, 0)).toBe(false);
  });

  it("tracks the resume blend window", () => {
    const s = new SessionModel();
    s.ingest(ack("start", 1), 0);
    s.ingest(ack("pause", 2), 1000);
    expect(s.blendProgress(1500)).toBeNull();
    s.ingest(ack("resume", 3), 2000);
    expect(s.mode).toBe("interpolating");
    expect(s.blendProgress(2000)).toBe(0);
    expect(s.blendProgress(2000 + BLEND_WINDOW_MS / 2)).toBeCloseTo(0.5, 10);
    expect(s.blendProgress(2000 + 2 * BLEND_WINDOW_MS)).toBe(1);
    s.ingest(ack("stop", 4), 5000);
    expect(s.blendProgress(5000)).toBeNull();
  });

  it("exposes the button gate for the current mode", () => {
    const s = new SessionModel();
    expect(s.canSend("start")).toBe(true);
    expect(s.canSend("resume")).toBe(false);
    s.ingest(ack("start", 1), 0);
    expect(s.canSend("start")).toBe(false);
    expect(s.canSend("pause")).toBe(true);
    expect(s.canSend("mark-failure")).toBe(true);
    s.ingest(ack("stop", 4), 0);
    expect(s.legal()).toHaveLength(0);
  });
});
