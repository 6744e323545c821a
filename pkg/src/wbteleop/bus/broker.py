"""Central pub/sub broker.

Topology is a star: every process (tracker feed, pipeline, simulator,
recorder, policy runner, consoles) connects to one broker and declares in
its handshake which message types it wants.  The broker forwards each
message to every other subscribed peer; it never interprets payloads.

A JSON bridge on a second port speaks the same topics over websockets for
browser clients.  Binary payloads cross the bridge base64-encoded; CTRL
and HANDSHAKE payloads are translated to structured JSON.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import json
import logging
import time

from .protocol import (HEADER_SIZE, MAX_PAYLOAD, PROTOCOL_VERSION, CtrlEvent,
                       FLAG_ACK, Message, MsgType, StreamDecoder, decode_header,
                       encode, pack_ctrl, pack_handshake, type_by_name,
                       unpack_ctrl, unpack_handshake)

log = logging.getLogger(__name__)

DEFAULT_PORT = 7447
DEFAULT_WS_PORT = 7448

_ALL_TOPICS = frozenset(t.name.lower() for t in MsgType)


class _TcpPeer:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.subs: frozenset[str] = frozenset()
        self.name = ""

    def wants(self, mtype: MsgType) -> bool:
        return mtype.name.lower() in self.subs


class _WsPeer:
    def __init__(self, socket):
        self.socket = socket
        self.subs: frozenset[str] = frozenset()
        self.name = ""

    def wants(self, mtype: MsgType) -> bool:
        return mtype.name.lower() in self.subs


def message_to_json(msg: Message) -> dict:
    out = {
        "type": msg.type.name.lower(),
        "seq": msg.seq,
        "timestamp": msg.timestamp,
        "flags": msg.flags,
    }
    if msg.type is MsgType.CTRL:
        event, state = unpack_ctrl(msg.payload)
        out["event"] = event.name.lower().replace("_", "-")
        if state is not None:
            out["state"] = state
    elif msg.type is MsgType.HANDSHAKE:
        out["info"] = unpack_handshake(msg.payload)
    else:
        out["payload"] = base64.b64encode(msg.payload).decode()
    return out


def message_from_json(obj: dict) -> Message:
    mtype = type_by_name(obj["type"])
    flags = int(obj.get("flags", 0))
    seq = int(obj.get("seq", 0))
    timestamp = int(obj.get("timestamp", 0))
    if mtype is MsgType.CTRL:
        name = str(obj["event"]).replace("-", "_").upper()
        try:
            event = CtrlEvent[name]
        except KeyError:
            raise ValueError(f"unknown control event '{obj['event']}'") from None
        payload = pack_ctrl(event, obj.get("state"))
    elif mtype is MsgType.HANDSHAKE:
        payload = json.dumps(obj.get("info", {}), sort_keys=True).encode()
    else:
        try:
            payload = base64.b64decode(obj.get("payload", ""), validate=True)
        except binascii.Error as exc:
            raise ValueError(f"bad base64 payload: {exc}") from None
    return Message(type=mtype, payload=payload, seq=seq,
                   timestamp=timestamp, flags=flags)


class Broker:
    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 ws_port: int | None = DEFAULT_WS_PORT):
        self.host = host
        self.port = port
        self.ws_port = ws_port
        self._tcp_peers: set[_TcpPeer] = set()
        self._ws_peers: set[_WsPeer] = set()
        self._server: asyncio.Server | None = None
        self._ws_server = None
        self.forwarded = 0

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._serve_tcp, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        if self.ws_port is not None:
            import websockets

            self._ws_server = await websockets.serve(
                self._serve_ws, self.host, self.ws_port)
            self.ws_port = next(iter(self._ws_server.sockets)).getsockname()[1]
        log.info("broker listening on %s:%d (ws %s)", self.host, self.port,
                 self.ws_port)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._ws_server is not None:
            self._ws_server.close()
            await self._ws_server.wait_closed()
        for peer in list(self._tcp_peers):
            peer.writer.close()

    async def run_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Future()
        finally:
            await self.stop()

    async def _fanout(self, msg: Message, origin) -> None:
        data = None
        for peer in list(self._tcp_peers):
            if peer is origin or not peer.wants(msg.type):
                continue
            if data is None:
                data = encode(msg)
            try:
                peer.writer.write(data)
                await peer.writer.drain()
                self.forwarded += 1
            except (ConnectionError, RuntimeError):
                self._tcp_peers.discard(peer)
        doc = None
        for peer in list(self._ws_peers):
            if peer is origin or not peer.wants(msg.type):
                continue
            if doc is None:
                doc = json.dumps(message_to_json(msg))
            try:
                await peer.socket.send(doc)
                self.forwarded += 1
            except Exception:
                self._ws_peers.discard(peer)

    async def _handle_handshake(self, peer, msg: Message, reply) -> None:
        info = unpack_handshake(msg.payload)
        subs = frozenset(str(s).lower() for s in info.get("subscribe", []))
        unknown = subs - _ALL_TOPICS
        if unknown:
            raise ValueError(f"handshake subscribes to unknown topics "
                             f"{sorted(unknown)}")
        peer.subs = subs
        peer.name = str(info.get("name", ""))
        ack = Message(type=MsgType.HANDSHAKE, flags=FLAG_ACK,
                      timestamp=time.time_ns(),
                      payload=pack_handshake("broker", sorted(subs)))
        await reply(ack)

    async def _serve_tcp(self, reader: asyncio.StreamReader,
                         writer: asyncio.StreamWriter) -> None:
        peer = _TcpPeer(writer)
        self._tcp_peers.add(peer)

        async def reply(msg: Message) -> None:
            writer.write(encode(msg))
            await writer.drain()

        try:
            while True:
                header = await reader.readexactly(HEADER_SIZE)
                mtype, flags, seq, ts, length = decode_header(header)
                payload = await reader.readexactly(length) if length else b""
                msg = Message(type=mtype, payload=payload, seq=seq,
                              timestamp=ts, flags=flags)
                if mtype is MsgType.HANDSHAKE and not msg.is_ack():
                    await self._handle_handshake(peer, msg, reply)
                else:
                    await self._fanout(msg, peer)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        except ValueError as exc:
            log.warning("dropping peer '%s': %s", peer.name, exc)
        finally:
            self._tcp_peers.discard(peer)
            writer.close()

    async def _serve_ws(self, socket) -> None:
        peer = _WsPeer(socket)
        self._ws_peers.add(peer)

        async def reply(msg: Message) -> None:
            await socket.send(json.dumps(message_to_json(msg)))

        try:
            async for raw in socket:
                try:
                    obj = json.loads(raw)
                    msg = message_from_json(obj)
                except (ValueError, KeyError, TypeError) as exc:
                    await socket.send(json.dumps({"error": str(exc)}))
                    continue
                if len(msg.payload) > MAX_PAYLOAD:
                    await socket.send(json.dumps({"error": "payload too large"}))
                    continue
                if msg.type is MsgType.HANDSHAKE and not msg.is_ack():
                    try:
                        await self._handle_handshake(peer, msg, reply)
                    except ValueError as exc:
                        await socket.send(json.dumps({"error": str(exc)}))
                else:
                    await self._fanout(msg, peer)
        except Exception:
            pass
        finally:
            self._ws_peers.discard(peer)


def serve_broker(host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 ws_port: int | None = DEFAULT_WS_PORT) -> None:
    """Blocking entry point used by the CLI."""
    broker = Broker(host, port, ws_port)
    try:
        asyncio.run(broker.run_forever())
    except KeyboardInterrupt:
        pass


class BrokerThread:
    """Broker on a background event loop, for embedding and for tests."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 ws_port: int | None = 0):
        import threading

        self.broker = Broker(host, port, ws_port)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever,
                                        daemon=True, name="bus-broker")
        self._thread.start()
        asyncio.run_coroutine_threadsafe(self.broker.start(),
                                         self._loop).result(10.0)

    @property
    def port(self) -> int:
        return self.broker.port

    @property
    def ws_port(self) -> int | None:
        return self.broker.ws_port

    def stop(self) -> None:
        asyncio.run_coroutine_threadsafe(self.broker.stop(),
                                         self._loop).result(10.0)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=5.0)
        self._loop.close()

    def __enter__(self) -> "BrokerThread":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
