from frlhf.federation.aggregation import AggregationStrategy, DimensionMismatchError, aggregate
from frlhf.federation.server import FederationResult, RoundRecord, run_federation
from frlhf.federation.transport import (
    FederationServer,
    InProcessClient,
    RemoteClient,
    RoundAbortedError,
    run_client_loop,
)
from frlhf.federation.wire import (
    BadMagicError,
    ConnectionClosedError,
    Hello,
    PayloadLengthError,
    ProtocolError,
    RoundBroadcast,
    Shutdown,
    TruncatedFrameError,
    UnknownMessageTypeError,
    VersionMismatchError,
    decode_frame,
    encode_frame,
)

__all__ = [
    "AggregationStrategy",
    "BadMagicError",
    "ConnectionClosedError",
    "DimensionMismatchError",
    "FederationResult",
    "FederationServer",
    "Hello",
    "InProcessClient",
    "PayloadLengthError",
    "ProtocolError",
    "RemoteClient",
    "RoundAbortedError",
    "RoundBroadcast",
    "RoundRecord",
    "Shutdown",
    "TruncatedFrameError",
    "UnknownMessageTypeError",
    "VersionMismatchError",
    "aggregate",
    "decode_frame",
    "encode_frame",
    "run_client_loop",
    "run_federation",
]
