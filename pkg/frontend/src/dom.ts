import { OperatorConsole } from "./console.js";
import { CTRL_EVENTS, CtrlEventName } from "./protocol.js";
import { ViewSnapshot } from "./view.js";

const SESSION_BUTTONS: readonly CtrlEventName[] = [
  "start",
  "pause",
  "resume",
  "stop",
  "estop",
];

const MARK_BUTTONS: readonly [CtrlEventName, string][] = [
  ["mark-episode-start", "mark: episode start"],
  ["mark-episode-end", "mark: episode end"],
  ["mark-failure", "mark: failure"],
];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function fmtMs(ms: number | null): string {
  return ms === null ? "--" : `${ms.toFixed(1)} ms`;
}

function fmtRatio(x: number | null): string {
  return x === null ? "--" : x.toFixed(3);
}

/** Overlaid per-dimension bars: command as outline, achieved as fill. */
function drawVectors(canvas: HTMLCanvasElement, snap: ViewSnapshot): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    return;
  }
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const vec = snap.state ?? snap.cmd;
  if (!vec || vec.length === 0) {
    ctx.fillStyle = "#667";
    ctx.fillText("no stream", 8, height / 2);
    return;
  }
  const mid = height / 2;
  const barW = width / vec.length;
  const scale = mid / Math.PI;
  ctx.strokeStyle = "#889";
  ctx.beginPath();
  ctx.moveTo(0, mid);
  ctx.lineTo(width, mid);
  ctx.stroke();
  ctx.fillStyle = "#4a9";
  for (let i = 0; i < vec.length; i++) {
    const h = Math.max(-mid, Math.min(mid, vec[i] * scale));
    ctx.fillRect(i * barW + 1, Math.min(mid, mid - h), barW - 2, Math.abs(h));
  }
  if (snap.cmd && snap.cmd.length === vec.length) {
    ctx.strokeStyle = "#e82";
    for (let i = 0; i < snap.cmd.length; i++) {
      const h = Math.max(-mid, Math.min(mid, snap.cmd[i] * scale));
      ctx.strokeRect(i * barW + 1, Math.min(mid, mid - h), barW - 2, Math.abs(h) || 1);
    }
  }
}

/**
 * Build the console UI under `root` and start the render loop. Returns
 * a teardown function. Rendering is pull-based: the view hands out at
 * most 10 snapshots per second no matter how fast the bus talks.
 */
export function mountConsole(root: HTMLElement, op: OperatorConsole): () => void {
  root.replaceChildren();

  const status = el("div", "status", "closed");
  const mode = el("div", "mode", "idle");
  const header = el("header");
  header.append(status, mode);

  const buttons = new Map<CtrlEventName, HTMLButtonElement>();
  const controlsRow = el("div", "controls");
  for (const event of SESSION_BUTTONS) {
    const b = el("button", `ctl ctl-${event}`, event);
    b.addEventListener("click", () => op.sendControl(event));
    buttons.set(event, b);
    controlsRow.append(b);
  }
  const marksRow = el("div", "controls");
  for (const [event, label] of MARK_BUTTONS) {
    const b = el("button", `ctl ctl-${event}`, label);
    b.addEventListener("click", () => op.sendControl(event));
    buttons.set(event, b);
    marksRow.append(b);
  }

  const latency = el("span", "gauge", "latency --");
  const rTrack = el("span", "gauge", "r_track --");
  const rate = el("span", "gauge", "0 msg/s");
  const gauges = el("div", "gauges");
  gauges.append(latency, rTrack, rate);

  const blendOuter = el("div", "blend");
  const blendInner = el("div", "blend-fill");
  blendOuter.append(blendInner);
  blendOuter.style.visibility = "hidden";

  const canvas = el("canvas", "vectors");
  canvas.width = 900;
  canvas.height = 180;

  const timeline = el("ol", "timeline");

  root.append(header, controlsRow, marksRow, gauges, blendOuter, canvas, timeline);

  let drawnMarks = 0;
  const render = (snap: ViewSnapshot): void => {
    status.textContent = snap.status;
    status.dataset.status = snap.status;
    mode.textContent = snap.pending
      ? `${snap.mode} (${snap.pending}...)`
      : snap.mode;
    const enabled = op.controls();
    for (const event of CTRL_EVENTS) {
      const b = buttons.get(event);
      if (b) {
        b.disabled = !enabled[event];
      }
    }
    latency.textContent = `latency ${fmtMs(snap.latencyMs)}`;
    rTrack.textContent = `r_track ${fmtRatio(snap.rTrack)}`;
    rate.textContent = `${snap.msgRateHz.toFixed(0)} msg/s`;
    if (snap.blend === null) {
      blendOuter.style.visibility = "hidden";
    } else {
      blendOuter.style.visibility = "visible";
      blendInner.style.width = `${(snap.blend * 100).toFixed(0)}%`;
    }
    drawVectors(canvas, snap);
    for (; drawnMarks < snap.marks.length; drawnMarks++) {
      const m = snap.marks[drawnMarks];
      const when = new Date(m.timestampNs / 1e6).toLocaleTimeString();
      timeline.append(el("li", `mark mark-${m.kind}`, `${when}  ${m.kind}`));
    }
  };

  render(op.view.snapshot());
  const timer = setInterval(() => {
    const snap = op.view.poll();
    if (snap) {
      render(snap);
    }
  }, 25);

  return () => {
    clearInterval(timer);
    root.replaceChildren();
  };
}
