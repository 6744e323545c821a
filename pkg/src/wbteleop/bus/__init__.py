from .protocol import (FLAG_ACK, FLAG_REPLY, MAX_PAYLOAD, PROTOCOL_VERSION,
                       CtrlEvent, Message, MsgType, StreamDecoder, decode,
                       encode, pack_ctrl, unpack_ctrl)
from .client import BusClient, BusTimeout
from .broker import Broker, BrokerThread, serve_broker
from .session import IllegalTransition, SessionMachine, SessionState

__all__ = [
    "Broker", "BrokerThread", "BusClient", "BusTimeout", "CtrlEvent",
    "FLAG_ACK", "FLAG_REPLY", "IllegalTransition", "MAX_PAYLOAD", "Message",
    "MsgType", "PROTOCOL_VERSION", "SessionMachine", "SessionState",
    "StreamDecoder", "decode", "encode", "pack_ctrl", "serve_broker",
    "unpack_ctrl",
]
