import { BridgeConnection, ConnectionOptions } from "./connection.js";
import { CTRL_EVENTS, CtrlEventName, MarkKind, markEvent } from "./protocol.js";
import { SessionModel } from "./session.js";
import { ConsoleView } from "./view.js";

export interface ConsoleOptions extends ConnectionOptions {
  url: string;
}

/**
 * Wires connection, session and view together and owns the button
 * policy: which controls are clickable, and the estop-resend affordance
 * that survives a dead bridge.
 */
export class OperatorConsole {
  readonly connection: BridgeConnection;
  readonly session: SessionModel;
  readonly view: ConsoleView;

  /** An estop clicked while disconnected, delivered on the next open. */
  estopQueued = false;

  constructor(opts: ConsoleOptions) {
    const clock = opts.clock ?? (() => Date.now());
    this.session = new SessionModel();
    this.view = new ConsoleView(this.session, clock);
    this.connection = new BridgeConnection(opts.url, opts);
    this.connection.onmessage = (msg) => this.view.ingest(msg);
    this.connection.onlatency = (ms) => this.view.setLatency(ms);
    this.connection.onstatus = (status) => {
      this.view.setStatus(status);
      if (status === "open" && this.estopQueued) {
        this.estopQueued = false;
        if (this.connection.sendControl("estop")) {
          this.session.sent("estop");
        }
      }
    };
  }

  connect(): void {
    this.connection.connect();
  }

  dispose(): void {
    this.connection.close();
  }

  /**
   * Enabled-state for every control. This is exactly what the buttons
   * render: illegal transitions are unclickable, and a dead bridge
   * disables everything except the estop-resend affordance.
   */
  controls(): Record<CtrlEventName, boolean> {
    const open = this.connection.status === "open";
    const out = {} as Record<CtrlEventName, boolean>;
    for (const event of CTRL_EVENTS) {
      out[event] = open ? this.session.canSend(event) : event === "estop";
    }
    return out;
  }

  /**
   * Send one control event, subject to the same gate the buttons use.
   * Returns true when the event was delivered or queued (estop only).
   */
  sendControl(event: CtrlEventName): boolean {
    if (!this.controls()[event]) {
      return false;
    }
    if (this.connection.status !== "open") {
      // Only estop passes the gate while disconnected.
      this.estopQueued = true;
      return true;
    }
    const sent = this.connection.sendControl(event);
    if (sent) {
      this.session.sent(event);
    }
    return sent;
  }

  placeMark(kind: MarkKind): boolean {
    return this.sendControl(markEvent(kind));
  }
}
