import { describe, expect, it } from "vitest";
import { BridgeMessage } from "../src/protocol.js";
import { SessionModel } from "../src/session.js";
import { ConsoleView, VIEW_RATE_HZ } from "../src/view.js";
import { vectorPayload } from "./helpers.js";

function makeView(): { view: ConsoleView; tick: (ms: number) => void; now: () => number } {
  let t = 0;
  const clock = () => t;
  const view = new ConsoleView(new SessionModel(), clock);
  return { view, tick: (ms) => { t += ms; }, now: clock };
}

function vec(type: "cmd" | "state", values: number[], ts = 0): BridgeMessage {
  return { type, seq: 0, timestamp: ts, flags: 0, payload: vectorPayload(values) };
}

describe("ConsoleView", () => {
  it("caps snapshots at the view rate no matter the message rate", () => {
    const { view, tick, now } = makeView();
    view.setStatus("open");
    let emitted = 0;
    // 1000 messages over one second, polled every 2 ms.
    for (let i = 0; i < 1000; i++) {
      view.ingest(vec("state", [i]));
      if (view.poll(now())) {
        emitted++;
      }
      tick(1);
      if (view.poll(now())) {
        emitted++;
      }
      tick(1);
    }
    expect(emitted).toBeLessThanOrEqual(VIEW_RATE_HZ * 2 + 1);
    expect(emitted).toBeGreaterThanOrEqual(VIEW_RATE_HZ * 2 - 1);
  });

  it("emits nothing when idle and unthrottles once dirty again", () => {
    const { view, tick, now } = makeView();
    view.setStatus("open");
    view.ingest(vec("cmd", [1]));
    expect(view.poll(now())).not.toBeNull();
    tick(200);
    expect(view.poll(now())).toBeNull();
    view.ingest(vec("cmd", [2]));
    expect(view.poll(now())).not.toBeNull();
  });

  it("computes the tracking gauge from the latest cmd/state pair", () => {
    const { view, now } = makeView();
    view.setStatus("open");
    view.ingest(vec("cmd", [1, 2, 2]));
    view.ingest(vec("state", [1, 2, 2]));
    expect(view.snapshot(now()).rTrack).toBeCloseTo(1.0, 12);
    view.ingest(vec("state", [1, 2, 1]));
    expect(view.snapshot(now()).rTrack).toBeCloseTo(Math.exp(-1), 12);
    view.ingest(vec("state", [1, 2]));
    expect(view.snapshot(now()).rTrack).toBeNull();
  });

  it("builds the timeline from acknowledged marks and pauses only", () => {
    const { view, now } = makeView();
    const msgs: BridgeMessage[] = [
      { type: "ctrl", seq: 0, timestamp: 10, flags: 2, event: "start", state: 1 },
      { type: "ctrl", seq: 1, timestamp: 20, flags: 0, event: "mark-failure" },
      { type: "ctrl", seq: 2, timestamp: 30, flags: 2, event: "mark-failure", state: 1 },
      { type: "ctrl", seq: 3, timestamp: 40, flags: 2, event: "pause", state: 2 },
      { type: "ctrl", seq: 4, timestamp: 50, flags: 2, event: "mark-episode-end", state: 2 },
    ] as BridgeMessage[];
    for (const m of msgs) {
      view.ingest(m);
    }
    const marks = view.snapshot(now()).marks;
    expect(marks.map((m) => m.kind)).toEqual(["failure", "pause", "episode-end"]);
    expect(marks[0].timestampNs).toBe(30);
  });

  it("drops live data the moment the connection is lost", () => {
    const { view, now } = makeView();
    view.setStatus("open");
    view.ingest(vec("cmd", [1]));
    view.ingest(vec("state", [1]));
    view.setLatency(3.5);
    expect(view.snapshot(now()).cmd).not.toBeNull();
    view.setStatus("closed");
    const snap = view.snapshot(now());
    expect(snap.cmd).toBeNull();
    expect(snap.state).toBeNull();
    expect(snap.latencyMs).toBeNull();
    expect(snap.rTrack).toBeNull();
  });

  it("keeps the timeline across a reconnect", () => {
    const { view, now } = makeView();
    view.setStatus("open");
    view.ingest({ type: "ctrl", seq: 0, timestamp: 1, flags: 2,
                  event: "mark-failure", state: 1 } as BridgeMessage);
    view.setStatus("closed");
    view.setStatus("open");
    expect(view.snapshot(now()).marks).toHaveLength(1);
  });

  it("always re-emits while interpolating so the blend bar animates", () => {
    const { view, tick, now } = makeView();
    view.setStatus("open");
    view.ingest({ type: "ctrl", seq: 0, timestamp: 0, flags: 2,
                  event: "resume", state: 3 } as BridgeMessage);
    expect(view.poll(now())).not.toBeNull();
    tick(150);
    const snap = view.poll(now());
    expect(snap).not.toBeNull();
    expect(snap!.blend).toBeCloseTo(0.15, 10);
  });
});
