import { OperatorConsole } from "./console.js";
import { mountConsole } from "./dom.js";

// The bridge URL comes from ?bridge=ws://host:port, falling back to the
// default websocket port on whatever host serves the page.
const params = new URLSearchParams(location.search);
const bridge =
  params.get("bridge") ?? `ws://${location.hostname || "127.0.0.1"}:7448`;

const op = new OperatorConsole({ url: bridge });
const root = document.getElementById("console");
if (!root) {
  throw new Error("page is missing the #console element");
}
mountConsole(root, op);
op.connect();
