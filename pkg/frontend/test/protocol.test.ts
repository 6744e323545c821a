import { describe, expect, it } from "vitest";
import {
  CTRL_EVENTS,
  SESSION_STATES,
  controlFrame,
  decodeVector,
  handshakeFrame,
  isBridgeError,
  isLegal,
  latencyFrame,
  legalEvents,
  markEvent,
  parseBridgeMessage,
  stateName,
} from "../src/protocol.js";
import { vectorPayload } from "./helpers.js";

describe("session rules", () => {
  // Restated independently of the table in protocol.ts: start only from
  // idle, resume only from paused, stop/estop anywhere but stopped,
  // marks only while the stream is live.
  const expected: Record<string, string[]> = {
    idle: ["start", "stop", "estop"],
    active: ["pause", "stop", "estop",
             "mark-episode-start", "mark-episode-end", "mark-failure"],
    paused: ["resume", "stop", "estop",
             "mark-episode-start", "mark-episode-end", "mark-failure"],
    interpolating: ["pause", "stop", "estop",
                    "mark-episode-start", "mark-episode-end", "mark-failure"],
    stopped: [],
  };

  it("matches the operator transition table in every state", () => {
    for (const state of SESSION_STATES) {
      expect([...legalEvents(state)].sort()).toEqual(expected[state].sort());
      for (const event of CTRL_EVENTS) {
        expect(isLegal(state, event)).toBe(expected[state].includes(event));
      }
    }
  });

  it("leaves nothing clickable once stopped", () => {
    expect(legalEvents("stopped")).toHaveLength(0);
  });

  it("maps state codes to names and rejects strays", () => {
    expect(stateName(0)).toBe("idle");
    expect(stateName(4)).toBe("stopped");
    expect(() => stateName(5)).toThrow(/unknown session state/);
    expect(() => stateName(-1)).toThrow(/unknown session state/);
  });

  it("derives mark events from mark kinds", () => {
    expect(markEvent("failure")).toBe("mark-failure");
    expect(markEvent("episode-start")).toBe("mark-episode-start");
  });
});

describe("frame building", () => {
  it("builds ctrl frames the bridge accepts", () => {
    const obj = JSON.parse(controlFrame("pause", 7));
    expect(obj).toMatchObject({ type: "ctrl", event: "pause", seq: 7 });
    expect(obj.timestamp).toBeGreaterThan(1e18);
  });

  it("builds handshakes with sorted subscriptions and a version", () => {
    const obj = JSON.parse(handshakeFrame("console", ["state", "ctrl"], 0));
    expect(obj.type).toBe("handshake");
    expect(obj.info.version).toBe(1);
    expect(obj.info.name).toBe("console");
    expect(obj.info.subscribe).toEqual(["ctrl", "state"]);
  });

  it("keeps the probe token in the timestamp field", () => {
    const obj = JSON.parse(latencyFrame(123456, 3));
    expect(obj).toEqual({ type: "latency", seq: 3, timestamp: 123456 });
  });
});

describe("frame parsing", () => {
  it("parses a ctrl ack", () => {
    const msg = parseBridgeMessage(
      '{"type":"ctrl","seq":4,"timestamp":9,"flags":2,"event":"start","state":1}',
    );
    expect(isBridgeError(msg)).toBe(false);
    if (!isBridgeError(msg)) {
      expect(msg.type).toBe("ctrl");
      expect(msg.event).toBe("start");
      expect(msg.state).toBe(1);
      expect(msg.flags).toBe(2);
    }
  });

  it("passes bridge error objects through typed", () => {
    const msg = parseBridgeMessage('{"error":"unknown control event"}');
    expect(isBridgeError(msg)).toBe(true);
  });

  it("defaults missing header fields to zero", () => {
    const msg = parseBridgeMessage('{"type":"state","payload":""}');
    if (!isBridgeError(msg)) {
      expect(msg.seq).toBe(0);
      expect(msg.flags).toBe(0);
    }
  });

  it("rejects frames that are not objects", () => {
    expect(() => parseBridgeMessage("42")).toThrow(/non-object/);
    expect(() => parseBridgeMessage('{"seq":1}')).toThrow(/no type/);
  });
});

describe("vector payloads", () => {
  it("round-trips values exactly", () => {
    const values = [1.5, -2.25, 0, 3.141592653589793, 1e-12];
    expect(Array.from(decodeVector(vectorPayload(values)))).toEqual(values);
  });

  it("decodes the empty vector", () => {
    expect(decodeVector(vectorPayload([]))).toHaveLength(0);
  });

  it("rejects truncated payloads", () => {
    const good = vectorPayload([1, 2, 3]);
    const bytes = Buffer.from(good, "base64").subarray(0, 20);
    expect(() => decodeVector(bytes.toString("base64"))).toThrow(/does not hold/);
  });

  it("rejects payloads shorter than the length field", () => {
    expect(() => decodeVector(Buffer.from([1, 0]).toString("base64"))).toThrow(
      /too short/,
    );
  });
});
