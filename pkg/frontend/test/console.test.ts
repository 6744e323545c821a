import { afterEach, describe, expect, it } from "vitest";
import { OperatorConsole } from "../src/console.js";
import { CTRL_EVENTS } from "../src/protocol.js";
import { MockBridge, handshakeAck, nodeSocket, startMockBridge, waitFor } from "./helpers.js";

const ACK_STATE: Record<string, number> = {
  start: 1, pause: 2, resume: 3, stop: 4, estop: 4,
};

/** Bridge that acks ctrl frames the way the operator would. */
function ackingBridge(bridge: MockBridge, current = { state: 0 }): void {
  bridge.onframe = (frame, reply) => {
    if (frame.type === "handshake") {
      reply(handshakeAck(frame));
    } else if (frame.type === "ctrl") {
      const event = String(frame.event);
      current.state = ACK_STATE[event] ?? current.state;
      reply({ type: "ctrl", seq: frame.seq, timestamp: Date.now() * 1e6,
              flags: 2, event, state: current.state });
    }
  };
}

let bridges: MockBridge[] = [];
let consoles: OperatorConsole[] = [];

async function bridgeUp(port = 0): Promise<MockBridge> {
  const b = await startMockBridge(port);
  bridges.push(b);
  return b;
}

function consoleUp(url: string): OperatorConsole {
  const op = new OperatorConsole({
    url,
    socketFactory: nodeSocket,
    reconnectDelayMs: 100,
    probeIntervalMs: 0,
  });
  consoles.push(op);
  op.connect();
  return op;
}

afterEach(async () => {
  for (const c of consoles) {
    c.dispose();
  }
  consoles = [];
  await Promise.all(bridges.map((b) => b.close()));
  bridges = [];
});

describe("OperatorConsole", () => {
  it("renders every control disabled until the bridge is open", async () => {
    const bridge = await bridgeUp();
    const op = consoleUp(bridge.url);
    const before = op.controls();
    for (const event of CTRL_EVENTS) {
      expect(before[event]).toBe(event === "estop");
    }
    await waitFor(() => op.connection.status === "open");
    const after = op.controls();
    expect(after.start).toBe(true);
    expect(after.resume).toBe(false);
    expect(after["mark-failure"]).toBe(false);
  });

  it("walks a session through acked transitions and gates each step", async () => {
    const bridge = await bridgeUp();
    ackingBridge(bridge);
    const op = consoleUp(bridge.url);
    await waitFor(() => op.connection.status === "open");

    expect(op.sendControl("resume")).toBe(false);
    expect(op.placeMark("failure")).toBe(false);
    expect(op.session.mode).toBe("idle");

    expect(op.sendControl("start")).toBe(true);
    await waitFor(() => op.session.mode === "active", 3000, "start ack");

    expect(op.controls().start).toBe(false);
    expect(op.placeMark("episode-start")).toBe(true);
    await waitFor(() => op.view.snapshot().marks.length === 1);
    expect(op.view.snapshot().marks[0].kind).toBe("episode-start");

    expect(op.sendControl("pause")).toBe(true);
    await waitFor(() => op.session.mode === "paused");
    expect(op.controls().pause).toBe(false);
    expect(op.controls().resume).toBe(true);

    expect(op.sendControl("resume")).toBe(true);
    await waitFor(() => op.session.mode === "interpolating");
    expect(op.view.snapshot().blend).not.toBeNull();

    expect(op.sendControl("stop")).toBe(true);
    await waitFor(() => op.session.mode === "stopped");
    const final = op.controls();
    for (const event of CTRL_EVENTS) {
      expect(final[event]).toBe(false);
    }
  });

  it("queues an estop clicked while disconnected and resends on reconnect", async () => {
    const first = await bridgeUp();
    ackingBridge(first);
    const op = consoleUp(first.url);
    await waitFor(() => op.connection.status === "open");
    op.sendControl("start");
    await waitFor(() => op.session.mode === "active");

    const port = first.port;
    await first.close();
    await waitFor(() => op.connection.status === "closed");

    const controls = op.controls();
    for (const event of CTRL_EVENTS) {
      expect(controls[event]).toBe(event === "estop");
    }
    expect(op.sendControl("pause")).toBe(false);
    expect(op.sendControl("estop")).toBe(true);
    expect(op.estopQueued).toBe(true);

    const second = await bridgeUp(port);
    ackingBridge(second, { state: 1 });
    await waitFor(() => op.connection.status === "open", 10_000, "reconnect");
    await waitFor(
      () => second.frames.some((f) => f.type === "ctrl" && f.event === "estop"),
      5000,
      "estop resend",
    );
    expect(op.estopQueued).toBe(false);
    await waitFor(() => op.session.mode === "stopped", 3000, "estop ack");
  });
});
