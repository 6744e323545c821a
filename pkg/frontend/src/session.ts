import {
  BridgeMessage,
  CtrlEventName,
  FLAG_ACK,
  SessionStateName,
  isLegal,
  legalEvents,
  stateName,
} from "./protocol.js";

/** How long the operator blends back to the live stream after a resume. */
export const BLEND_WINDOW_MS = 1000;

/**
 * The session as the operator has acknowledged it. The displayed mode
 * moves only on CTRL acks; optimistic updates are forbidden so the
 * console can never show a state the robot is not actually in.
 */
export class SessionModel {
  mode: SessionStateName = "idle";
  /** Event sent but not acked yet. Display only; never moves `mode`. */
  pending: CtrlEventName | null = null;
  acks = 0;
  private blendStartMs = Number.NEGATIVE_INFINITY;

  /** Feed one bridge frame. Returns true when the displayed mode changed. */
  ingest(msg: BridgeMessage, nowMs: number): boolean {
    if (msg.type !== "ctrl" || !(msg.flags & FLAG_ACK)) {
      return false;
    }
    if (typeof msg.state !== "number") {
      return false;
    }
    let next: SessionStateName;
    try {
      next = stateName(msg.state);
    } catch {
      return false;
    }
    this.acks += 1;
    if (msg.event === this.pending) {
      this.pending = null;
    }
    const changed = next !== this.mode;
    if (changed && next === "interpolating") {
      this.blendStartMs = nowMs;
    }
    this.mode = next;
    return changed;
  }

  sent(event: CtrlEventName): void {
    this.pending = event;
  }

  /**
   * Progress through the resume blend window in [0, 1], or null when the
   * session is not interpolating. Saturates at 1 until the next ack moves
   * the mode; the operator finishes the blend on its own without one.
   */
  blendProgress(nowMs: number): number | null {
    if (this.mode !== "interpolating") {
      return null;
    }
    return Math.min((nowMs - this.blendStartMs) / BLEND_WINDOW_MS, 1);
  }

  legal(): readonly CtrlEventName[] {
    return legalEvents(this.mode);
  }

  canSend(event: CtrlEventName): boolean {
    return isLegal(this.mode, event);
  }
}
