"""Robust task, RPC and broadcast messaging behind a single communicator."""
from .communicator import (
    NO_RESPONSE,
    Communicator,
    CommunicatorState,
    ConnectOptions,
    SubscriberKind,
    SubscriberToken,
    connect,
)
from .envelope import (
    BroadcastFilter,
    Envelope,
    MessageKind,
    decode_envelope,
    encode_envelope,
    filter_matches,
    new_correlation_id,
)
from .exceptions import *  # noqa: F401,F403
from .exceptions import __all__ as _exc_all
from .futures import CancelledError, Future, FutureState
from .local import LocalBroker, TaskQueueState

__version__ = "0.1.0"

__all__ = (
    "NO_RESPONSE",
    "Communicator",
    "CommunicatorState",
    "ConnectOptions",
    "SubscriberKind",
    "SubscriberToken",
    "connect",
    "BroadcastFilter",
    "Envelope",
    "MessageKind",
    "decode_envelope",
    "encode_envelope",
    "filter_matches",
    "new_correlation_id",
    "CancelledError",
    "Future",
    "FutureState",
    "LocalBroker",
    "TaskQueueState",
) + _exc_all
