"""Vehicle-cloud link: wire format, simulated impairment channel, TCP transport."""

from advloop.netchan.channel import AdversaryScenario, Channel, NetworkCondition, Stage
from advloop.netchan.wire import (
    HEADER_SIZE,
    MSG_COMMAND,
    MSG_FRAME,
    MSG_HEARTBEAT,
    IncompleteFrame,
    NotAProtocolMessage,
    ProtocolError,
    UnsupportedVersion,
    WireMessage,
    decode,
    encode,
)

__all__ = [
    "AdversaryScenario", "Channel", "NetworkCondition", "Stage", "HEADER_SIZE", "MSG_COMMAND",
    "MSG_FRAME", "MSG_HEARTBEAT", "IncompleteFrame", "NotAProtocolMessage", "ProtocolError",
    "UnsupportedVersion", "WireMessage", "decode", "encode",
]
